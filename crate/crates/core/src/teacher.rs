//! Momentum teacher: an exponential moving average of the student
//! parameters that provides soft targets for the contrastive and masked
//! language modeling objectives. The matching objective gets no teacher
//! targets.

use thiserror::Error;

use crate::backbone::{Model, ModelConfig};
use crate::params::{Leaves, ParamSet};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("teacher parameter {0} is missing from the student")]
    MissingInStudent(String),
    #[error("parameter {name}: teacher shape {teacher:?} vs student {student:?}")]
    ShapeMismatch {
        name: String,
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
}

/// The EMA copy of the student, updated after every optimizer step.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub model: Model,
    pub momentum: f64,
}

impl Teacher {
    /// Starts as an exact clone of the student.
    pub fn init(cfg: ModelConfig, student: &ParamSet, momentum: f64) -> Teacher {
        assert!((0.0..1.0).contains(&momentum), "momentum in [0, 1)");
        Teacher {
            model: Model {
                cfg,
                params: student.clone(),
            },
            momentum,
        }
    }

    /// theta_hat <- m * theta_hat + (1 - m) * theta, per scalar. Student
    /// parameters the teacher has never seen (e.g. a head added mid-run)
    /// are adopted at their current values.
    pub fn update(&mut self, student: &ParamSet) -> Result<(), TeacherError> {
        let m = self.momentum;
        for p in self.model.params.iter_mut() {
            let s = student
                .get(&p.name)
                .map_err(|_| TeacherError::MissingInStudent(p.name.clone()))?;
            if s.shape != p.shape {
                return Err(TeacherError::ShapeMismatch {
                    name: p.name.clone(),
                    teacher: p.shape.clone(),
                    student: s.shape.clone(),
                });
            }
            for (t, v) in p.data.iter_mut().zip(&s.data) {
                *t = m * *t + (1.0 - m) * v;
            }
        }
        for s in student.iter() {
            if self.model.params.position(&s.name).is_none() {
                self.model
                    .params
                    .add(&s.name, s.kind, s.shape.clone(), s.data.clone());
            }
        }
        Ok(())
    }

    /// Frozen leaves: the teacher forward pass never joins the tape.
    pub fn leaves(&self) -> Leaves {
        self.model.params.leaves(false)
    }
}

/// Mean over rows of KL(teacher row softmax || student row softmax). The
/// teacher side is plain data; gradients reach the student logits only.
pub fn kl_rows(student_logits: &Tensor, teacher_logits: &[f64]) -> TensorResult<Tensor> {
    let (r, c) = student_logits.rows_cols("kl_rows")?;
    if teacher_logits.len() != r * c {
        return Err(TensorError::ShapeMismatch {
            op: "kl_rows",
            lhs: vec![r, c],
            rhs: vec![teacher_logits.len()],
        });
    }
    if r == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let mut w = vec![0.0; r * c];
    let mut entropy = 0.0;
    for i in 0..r {
        let row = &teacher_logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for j in 0..c {
            let lp = row[j] - lse;
            let p = lp.exp();
            w[i * c + j] = -p / r as f64;
            entropy += p * lp / r as f64;
        }
    }
    let cross = student_logits.log_softmax_rows()?.weighted_sum(&w)?;
    cross.add_const(&[entropy])
}

/// Contrastive distillation: average of the row-direction and
/// column-direction KL between the teacher's and student's scaled
/// similarity matrices.
pub fn distill_itc(student_sims: &Tensor, teacher_sims: &[f64]) -> TensorResult<Tensor> {
    let (r, c) = student_sims.rows_cols("distill_itc")?;
    let fwd = kl_rows(student_sims, teacher_sims)?;
    let mut tt = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            tt[j * r + i] = teacher_sims[i * c + j];
        }
    }
    let bwd = kl_rows(&student_sims.transpose()?, &tt)?;
    Ok(fwd.add(&bwd)?.scale(0.5))
}

/// MLM distillation: mean per-position KL between teacher and student
/// vocab distributions at the prediction positions.
pub fn distill_mlm(student_logits: &Tensor, teacher_logits: &[f64]) -> TensorResult<Tensor> {
    kl_rows(student_logits, teacher_logits)
}
