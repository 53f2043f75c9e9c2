//! Named, kind-tagged parameter storage shared by the student model, the
//! momentum teacher, and the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter {0} not found")]
    Missing(String),
    #[error("parameter {name}: shape {got:?} does not match {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

/// Role of a parameter, used by the weight-decay policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    LayerNorm,
    Embedding,
    Temperature,
}

impl ParamKind {
    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::LayerNorm => 2,
            ParamKind::Embedding => 3,
            ParamKind::Temperature => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<ParamKind> {
        Some(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::LayerNorm,
            3 => ParamKind::Embedding,
            4 => ParamKind::Temperature,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameters. Order is stable and determines
/// leaf indices during a forward pass and checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: bad shape"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            shape,
            data,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Param, ParamError> {
        self.position(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, ParamError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(ParamError::Missing(name.to_string())),
        }
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// One leaf tensor per parameter. Trainable leaves accumulate
    /// gradients; frozen ones (the teacher) stay off the graph entirely.
    pub fn leaves(&self, trainable: bool) -> Leaves {
        let t = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    Tensor::leaf(p.data.clone(), p.shape.clone())
                } else {
                    Tensor::constant(p.data.clone(), p.shape.clone())
                }
            })
            .collect();
        Leaves {
            t,
            index: self.index.clone(),
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Per-step leaf tensors, one per parameter, shared across every forward
/// pass of the step so gradients from all uses accumulate in one place.
pub struct Leaves {
    t: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Leaves {
    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.t[i]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.t[i])
    }

    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.t.iter().map(|t| t.grad()).collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.t
    }

    /// Swaps one leaf for an externally constructed tensor, used by
    /// finite-difference checks that perturb a subset of parameters.
    pub fn replace(&mut self, name: &str, t: Tensor) {
        let i = self.index[name];
        self.t[i] = t;
    }
}

/// Truncated-normal-ish init: normal(0, std) clamped to 2 std.
pub fn init_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller from two uniforms keeps the RNG stream simple
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (z * std).clamp(-2.0 * std, 2.0 * std)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn add_get_roundtrip() {
        let mut ps = ParamSet::new();
        ps.add("a.w", ParamKind::Weight, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ps.get("a.w").unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(ps.get("a.b"), Err(ParamError::Missing(_))));
    }

    #[test]
    fn frozen_leaves_stay_off_graph() {
        let mut ps = ParamSet::new();
        ps.add("w", ParamKind::Weight, vec![2], vec![1.0, 2.0]);
        let frozen = ps.leaves(false);
        let loss = frozen.get("w").mul(frozen.get("w")).unwrap().sum();
        assert!(!loss.requires_grad());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = init_normal(&mut r1, 100, 0.02);
        let b = init_normal(&mut r2, 100, 0.02);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 0.04));
    }
}
