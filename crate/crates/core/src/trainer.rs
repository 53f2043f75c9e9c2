//! Pre-training loop: one randomly sampled loss per iteration, linear
//! warmup/decay schedule, AdamW with a weight-decay exclusion policy,
//! multi-scale augmentation, the momentum teacher, and single-file
//! checkpointing with exact continuation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, MaskMode, Model, ModelConfig};
use crate::checkpoint::{
    find, pack_param_set, read_checkpoint, unpack_param_set, write_checkpoint, CkptError,
    TensorEntry,
};
use crate::corpus::SceneRecord;
use crate::losses::{
    itc_loss, itm_with_alignment, mask_text, mlm_loss, ContrastiveBatch, LossError, LossOutput,
    MaskGranularity, ALIGN_WEIGHT, LABEL_SMOOTHING,
};
use crate::params::{Leaves, ParamKind, ParamSet};
use crate::teacher::{distill_itc, distill_mlm, Teacher, TeacherError};
use crate::tensor::{Tensor, TensorError};
use crate::tokenize::{ImageInput, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("non-finite loss at step {step} on task {task}")]
    NonFinite { step: u64, task: Task },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CkptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ITC")]
    Itc,
    #[serde(rename = "ITM")]
    Itm,
    #[serde(rename = "MLM")]
    Mlm,
    #[serde(rename = "SMLM")]
    Smlm,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Itc => "ITC",
            Task::Itm => "ITM",
            Task::Mlm => "MLM",
            Task::Smlm => "SMLM",
        })
    }
}

pub const ALL_TASKS: [Task; 4] = [Task::Itc, Task::Itm, Task::Mlm, Task::Smlm];

fn default_weight_decay() -> f64 {
    0.01
}
fn default_crop_min_area() -> f64 {
    0.8
}
fn default_momentum() -> f64 {
    0.999
}
fn default_task_set() -> Vec<Task> {
    ALL_TASKS.to_vec()
}
fn default_model_field(which: &str) -> usize {
    let toy = ModelConfig::toy(512);
    match which {
        "layers" => toy.layers,
        "hidden" => toy.hidden,
        "heads" => toy.heads,
        "mlp_ratio" => toy.mlp_ratio,
        "patch_size" => toy.patch_size,
        "max_text_len" => toy.max_text_len,
        "vocab_size" => toy.vocab_size,
        _ => unreachable!(),
    }
}
macro_rules! model_default {
    ($name:ident, $key:literal) => {
        fn $name() -> usize {
            default_model_field($key)
        }
    };
}
model_default!(d_layers, "layers");
model_default!(d_hidden, "hidden");
model_default!(d_heads, "heads");
model_default!(d_mlp_ratio, "mlp_ratio");
model_default!(d_patch_size, "patch_size");
model_default!(d_max_text_len, "max_text_len");
model_default!(d_vocab_size, "vocab_size");
fn default_min_s() -> usize {
    16
}
fn default_max_s() -> usize {
    32
}
fn default_corpus_n() -> usize {
    256
}
fn default_multi_caption_prob() -> f64 {
    0.3
}

/// Flat training configuration; the config file is JSON with these exact
/// keys, and unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default = "default_task_set")]
    pub task_set: Vec<Task>,
    #[serde(default)]
    pub distill_weight: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    #[serde(default = "default_min_s")]
    pub min_s: usize,
    #[serde(default = "default_max_s")]
    pub max_s: usize,
    #[serde(default = "default_crop_min_area")]
    pub crop_min_area: f64,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "d_patch_size")]
    pub patch_size: usize,
    #[serde(default = "d_max_text_len")]
    pub max_text_len: usize,
    #[serde(default = "d_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_corpus_n")]
    pub corpus_n: usize,
    #[serde(default)]
    pub corpus_seed: u64,
    #[serde(default = "default_multi_caption_prob")]
    pub multi_caption_prob: f64,
}

impl TrainConfig {
    pub fn toy(seed: u64) -> TrainConfig {
        serde_json::from_str(
            &format!(r#"{{"total_steps": 2000, "warmup_steps": 200, "peak_lr": 2e-4, "batch_size": 8, "seed": {seed}}}"#),
        )
        .expect("toy config parses")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} > total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.min_s > self.max_s {
            return Err(TrainError::Config(format!(
                "min_s {} > max_s {}",
                self.min_s, self.max_s
            )));
        }
        if self.min_s % self.patch_size != 0 || self.max_s % self.patch_size != 0 {
            return Err(TrainError::Config(format!(
                "min_s {} and max_s {} must be divisible by patch_size {}",
                self.min_s, self.max_s, self.patch_size
            )));
        }
        if self.task_set.is_empty() {
            return Err(TrainError::EmptyTaskSet);
        }
        if !(0.0..=1.0).contains(&self.crop_min_area) {
            return Err(TrainError::Config(format!(
                "crop_min_area {} outside [0,1]",
                self.crop_min_area
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
            max_text_len: self.max_text_len,
            vocab_size: self.vocab_size,
            dropout: 0.0,
            grid_max: self.max_s / self.patch_size,
            interpolate_pos: true,
        }
    }

    pub fn load(path: &Path) -> Result<TrainConfig, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("read {}: {e}", path.display())))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| TrainError::Config(format!("parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Uniform draw over the configured task set.
pub fn sample_task(rng: &mut ChaCha8Rng, task_set: &[Task]) -> Result<Task, TrainError> {
    if task_set.is_empty() {
        return Err(TrainError::EmptyTaskSet);
    }
    Ok(task_set[rng.random_range(0..task_set.len())])
}

/// Linear warmup to the peak, then linear decay to zero at total_steps.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    lr_linear(step, cfg.total_steps, cfg.warmup_steps, cfg.peak_lr)
}

/// The same schedule as a free function, shared with fine-tuning.
pub fn lr_linear(step: u64, total: u64, warmup: u64, peak: f64) -> f64 {
    assert!(step <= total, "step past the schedule");
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total == warmup {
        0.0
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Decay applies to everything except biases, layer norms, and the
/// temperature.
pub fn decay_mask(kind: ParamKind) -> bool {
    !matches!(
        kind,
        ParamKind::Bias | ParamKind::LayerNorm | ParamKind::Temperature
    )
}

/// Bilinear resize to `target` x `target`, channels-last.
pub fn resize_bilinear(img: &ImageInput, target: usize) -> ImageInput {
    if img.h == target && img.w == target {
        return img.clone();
    }
    let mut pixels = vec![0.0; target * target * 3];
    let map = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let f = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = f.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, f - lo as f64)
    };
    for y in 0..target {
        let (y0, y1, fy) = map(y, target, img.h);
        for x in 0..target {
            let (x0, x1, fx) = map(x, target, img.w);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| img.pixels[(yy * img.w + xx) * 3 + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                pixels[(y * target + x) * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    ImageInput {
        pixels,
        h: target,
        w: target,
    }
}

/// Square crop with area fraction in [crop_min_area, 1], then bilinear
/// resize to a scale drawn uniformly from {min_s, min_s+p, ..., max_s}.
/// Returns the augmented image and an upscaled flag for undersized
/// sources.
pub fn augment_multiscale(
    img: &ImageInput,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> (ImageInput, bool) {
    let mut src = img.clone();
    let mut upscaled = false;
    if src.h.min(src.w) < cfg.min_s {
        src = resize_bilinear(&src, cfg.max_s);
        upscaled = true;
    }
    let n_scales = (cfg.max_s - cfg.min_s) / cfg.patch_size + 1;
    let s = cfg.min_s + cfg.patch_size * rng.random_range(0..n_scales);
    let short = src.h.min(src.w);
    let area = cfg.crop_min_area + (1.0 - cfg.crop_min_area) * rng.random::<f64>();
    let side = ((area.sqrt() * short as f64).round() as usize).clamp(1, short);
    let y0 = rng.random_range(0..=src.h - side);
    let x0 = rng.random_range(0..=src.w - side);
    let mut crop = vec![0.0; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                crop[(y * side + x) * 3 + c] = src.pixels[((y0 + y) * src.w + x0 + x) * 3 + c];
            }
        }
    }
    let cropped = ImageInput {
        pixels: crop,
        h: side,
        w: side,
    };
    (resize_bilinear(&cropped, s), upscaled)
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;

impl AdamW {
    /// Applies one update. `grads` is ordered like `ps`; parameters with
    /// no gradient this step are untouched (no decay, no moment update).
    /// Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        ps: &mut ParamSet,
        grads: &[Option<Vec<f64>>],
        lr: f64,
        weight_decay: f64,
    ) -> f64 {
        assert_eq!(grads.len(), ps.len());
        self.t += 1;
        let sq: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        let clip = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..ps.len() {
            let Some(g) = &grads[i] else { continue };
            let p = ps.at_mut(i);
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let decay = decay_mask(p.kind);
            for j in 0..g.len() {
                let gj = g[j] * clip;
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                if decay {
                    p.data[j] -= lr * weight_decay * p.data[j];
                }
            }
        }
        norm
    }
}

/// How losses are scheduled across iterations: the paper's sampled
/// strategy, or the all-losses-every-step baseline kept for comparison
/// experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskStrategy {
    Random,
    Full,
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub task: String,
    pub loss: f64,
    pub sub: Vec<(String, f64)>,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    /// `step<TAB>task<TAB>loss<TAB>sub_losses_json`
    pub fn line(&self) -> String {
        let sub: serde_json::Map<String, serde_json::Value> = self
            .sub
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        format!(
            "{}\t{}\t{}\t{}",
            self.step,
            self.task,
            self.loss,
            serde_json::Value::Object(sub)
        )
    }
}

/// Full mutable training state; everything here round-trips through the
/// checkpoint file bit-exactly.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub teacher: Option<Teacher>,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn init(cfg: TrainConfig) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        let model = Model::init(cfg.model_config(), cfg.seed);
        let teacher = (cfg.distill_weight > 0.0)
            .then(|| Teacher::init(cfg.model_config(), &model.params, cfg.momentum));
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            teacher,
            opt: AdamW::default(),
            step: 0,
            cfg,
        })
    }

    /// One pre-training iteration with the sampled-task strategy: exactly
    /// one loss evaluation.
    pub fn train_step(
        &mut self,
        corpus: &[SceneRecord],
        vocab: &Vocabulary,
    ) -> Result<StepMetrics, TrainError> {
        let task = sample_task(&mut self.rng, &self.cfg.task_set.clone())?;
        self.apply_tasks(corpus, vocab, &[task])
    }

    /// One iteration of the all-losses baseline: |task_set| loss
    /// evaluations folded into a single optimizer step.
    pub fn train_step_full(
        &mut self,
        corpus: &[SceneRecord],
        vocab: &Vocabulary,
    ) -> Result<StepMetrics, TrainError> {
        self.apply_tasks(corpus, vocab, &self.cfg.task_set.clone())
    }

    fn apply_tasks(
        &mut self,
        corpus: &[SceneRecord],
        vocab: &Vocabulary,
        tasks: &[Task],
    ) -> Result<StepMetrics, TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let lv = self.model.params.leaves(true);
        let mut total: Option<Tensor> = None;
        let mut sub = Vec::new();
        for &task in tasks {
            let out = self.task_loss(&lv, corpus, vocab, task)?;
            sub.push((format!("{task}"), out.value()));
            sub.extend(out.sub);
            total = Some(match total {
                None => out.loss,
                Some(t) => t.add(&out.loss)?,
            });
        }
        let loss = total.expect("at least one task");
        let task_label = if tasks.len() == 1 {
            format!("{}", tasks[0])
        } else {
            "FULL".to_string()
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                task: tasks[0],
            });
        }
        if loss.requires_grad() {
            loss.backward()?;
        }
        let grads = lv.grads();
        if grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .any(|g| !g.is_finite())
        {
            return Err(TrainError::NonFinite {
                step: self.step,
                task: tasks[0],
            });
        }
        let lr = lr_at(self.step.min(self.cfg.total_steps), &self.cfg);
        let grad_norm = self
            .opt
            .step(&mut self.model.params, &grads, lr, self.cfg.weight_decay);
        if let Some(teacher) = &mut self.teacher {
            teacher.update(&self.model.params)?;
        }
        self.step += 1;
        Ok(StepMetrics {
            step: self.step - 1,
            task: task_label,
            loss: value,
            sub,
            grad_norm,
            lr,
        })
    }

    fn draw_batch<'a>(&mut self, corpus: &'a [SceneRecord]) -> Vec<&'a SceneRecord> {
        let n = self.cfg.batch_size.min(corpus.len());
        sample_indices(&mut self.rng, corpus.len(), n)
            .into_iter()
            .map(|i| &corpus[i])
            .collect()
    }

    fn pick_caption<'a>(&mut self, r: &'a SceneRecord) -> &'a str {
        let i = if r.captions.len() > 1 {
            self.rng.random_range(0..r.captions.len())
        } else {
            0
        };
        &r.captions[i]
    }

    fn task_loss(
        &mut self,
        lv: &Leaves,
        corpus: &[SceneRecord],
        vocab: &Vocabulary,
        task: Task,
    ) -> Result<LossOutput, TrainError> {
        match task {
            Task::Itc => self.itc_step(lv, corpus, vocab),
            Task::Itm => self.itm_step(lv, corpus, vocab),
            Task::Mlm => self.mlm_step(lv, corpus, vocab, MaskMode::Bidirectional),
            Task::Smlm => self.mlm_step(lv, corpus, vocab, MaskMode::Seq2Seq),
        }
    }

    fn itc_step(
        &mut self,
        lv: &Leaves,
        corpus: &[SceneRecord],
        vocab: &Vocabulary,
    ) -> Result<LossOutput, TrainError> {
        let batch = self.draw_batch(corpus);
        let mut images = Vec::new();
        let mut caps: Vec<String> = Vec::new();
        for r in &batch {
            let (img, _) = augment_multiscale(&r.image, &mut self.rng, &self.cfg.clone());
            images.push(img);
            caps.push(self.pick_caption(r).to_string());
        }
        // delta: an image is positive for any caption its scene could
        // have produced, so duplicated captions stay consistent
        let n = batch.len();
        let mut delta = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                delta[i * n + j] = i == j || batch[i].captions.iter().any(|c| *c == caps[j]);
            }
        }
        let cb = self.contrastive_encode(lv, &images, &caps, vocab, &delta)?;
        let (mut out, sims) = itc_loss(&cb)?;
        if let Some(teacher) = &self.teacher {
            let tlv = teacher.leaves();
            let tm = &teacher.model;
            let tcb = contrastive_encode_with(tm, &tlv, &images, &caps, vocab, &delta)?;
            let tsims = tcb
                .images
                .matmul(&tcb.texts.transpose()?)?
                .scale_by(&tcb.inv_temp)?;
            let kl = distill_itc(&sims, tsims.data())?.scale(self.cfg.distill_weight);
            out.sub.push(("distill_itc".into(), kl.item()));
            out.loss = out.loss.add(&kl)?;
        }
        Ok(out)
    }

    fn contrastive_encode(
        &self,
        lv: &Leaves,
        images: &[ImageInput],
        caps: &[String],
        vocab: &Vocabulary,
        delta: &[bool],
    ) -> Result<ContrastiveBatch, TrainError> {
        contrastive_encode_with(&self.model, lv, images, caps, vocab, delta)
    }

    fn itm_step(
        &mut self,
        lv: &Leaves,
        corpus: &[SceneRecord],
        vocab: &Vocabulary,
    ) -> Result<LossOutput, TrainError> {
        let batch = self.draw_batch(corpus);
        let n = batch.len();
        let mut total: Option<Tensor> = None;
        let mut sub = Vec::new();
        let mut count = 0;
        for i in 0..n {
            let (img, _) = augment_multiscale(&batch[i].image, &mut self.rng, &self.cfg.clone());
            let pos_cap = self.pick_caption(batch[i]).to_string();
            // mismatched caption drawn from the current batch
            let neg_cap = if n > 1 {
                let mut j = self.rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                Some(self.pick_caption(batch[j]).to_string())
            } else {
                None
            };
            for (cap, matched) in std::iter::once((pos_cap.clone(), true))
                .chain(neg_cap.into_iter().filter(|c| {
                    // a "negative" that the scene also describes is no
                    // negative at all; skip it
                    !batch[i].captions.iter().any(|own| own == c)
                })
                .map(|c| (c, false)))
            {
                let ids = vocab.tokenize(&cap).ids;
                let pair =
                    self.model
                        .encode_pair(lv, &img, &ids, MaskMode::Bidirectional, None)?;
                let out = itm_with_alignment(&self.model, lv, &pair, matched, ALIGN_WEIGHT)?;
                count += out.count;
                total = Some(match total {
                    None => out.loss,
                    Some(t) => t.add(&out.loss)?,
                });
            }
        }
        let loss = total.expect("non-empty batch").scale(1.0 / count.max(1) as f64);
        sub.push(("itm_pairs".into(), count as f64));
        Ok(LossOutput { loss, sub, count })
    }

    fn mlm_step(
        &mut self,
        lv: &Leaves,
        corpus: &[SceneRecord],
        vocab: &Vocabulary,
        mode: MaskMode,
    ) -> Result<LossOutput, TrainError> {
        let batch = self.draw_batch(corpus);
        let mut total: Option<Tensor> = None;
        let mut teacher_kl: Option<Tensor> = None;
        let mut count = 0;
        for r in &batch {
            let (img, _) = augment_multiscale(&r.image, &mut self.rng, &self.cfg.clone());
            let cap = self.pick_caption(r).to_string();
            let toks = vocab.tokenize(&cap);
            let masked = mask_text(
                &toks.ids,
                &toks.word_ids,
                self.cfg.vocab_size,
                &mut self.rng,
                MaskGranularity::Word,
                mode,
            );
            if masked.positions.is_empty() {
                continue;
            }
            let (logits, targets) =
                masked_logits(&self.model, lv, &img, &masked.corrupted, &masked, mode)?;
            let out = mlm_loss(&logits, &targets, LABEL_SMOOTHING)?;
            count += out.count;
            total = Some(match total {
                None => out.loss,
                Some(t) => t.add(&out.loss)?,
            });
            if let Some(teacher) = &self.teacher {
                let tlv = teacher.leaves();
                let (tlogits, _) =
                    masked_logits(&teacher.model, &tlv, &img, &masked.corrupted, &masked, mode)?;
                let kl = distill_mlm(&logits, tlogits.data())?;
                teacher_kl = Some(match teacher_kl {
                    None => kl,
                    Some(t) => t.add(&kl)?,
                });
            }
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = match total {
            Some(t) => t.scale(scale),
            None => Tensor::scalar(0.0),
        };
        let mut sub = vec![("mlm_positions".into(), count as f64)];
        if let Some(kl) = teacher_kl {
            let kl = kl.scale(scale * self.cfg.distill_weight);
            sub.push(("distill_mlm".into(), kl.item()));
            loss = loss.add(&kl)?;
        }
        Ok(LossOutput { loss, sub, count })
    }

    /// Serializes the complete training state.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut entries = Vec::new();
        entries.push(TensorEntry::bytes(
            "meta/config",
            serde_json::to_vec(&self.cfg).expect("config serializes"),
        ));
        entries.push(TensorEntry::bytes(
            "meta/step",
            self.step.to_le_bytes().to_vec(),
        ));
        entries.push(TensorEntry::bytes(
            "meta/opt_t",
            self.opt.t.to_le_bytes().to_vec(),
        ));
        let mut rng_bytes = Vec::with_capacity(56);
        rng_bytes.extend_from_slice(&self.rng.get_seed());
        rng_bytes.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        rng_bytes.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        entries.push(TensorEntry::bytes("meta/rng", rng_bytes));
        pack_param_set(&mut entries, "student", &self.model.params);
        if let Some(teacher) = &self.teacher {
            pack_param_set(&mut entries, "teacher", &teacher.model.params);
        }
        for p in self.model.params.iter() {
            if let Some(m) = self.opt.m.get(&p.name) {
                entries.push(TensorEntry::f64(
                    &format!("opt/m/{}", p.name),
                    vec![m.len() as u64],
                    m.clone(),
                ));
                entries.push(TensorEntry::f64(
                    &format!("opt/v/{}", p.name),
                    vec![self.opt.v[&p.name].len() as u64],
                    self.opt.v[&p.name].clone(),
                ));
            }
        }
        write_checkpoint(path, &entries)?;
        Ok(())
    }

    /// Restores a trainer that continues exactly where `save` left off.
    pub fn load(path: &Path) -> Result<Trainer, TrainError> {
        let entries = read_checkpoint(path)?;
        let cfg: TrainConfig =
            serde_json::from_slice(find(&entries, "meta/config")?.payload.as_bytes().ok_or_else(
                || CkptError::Malformed("meta/config is not a byte tensor".into()),
            )?)
            .map_err(|e| TrainError::Config(format!("config echo: {e}")))?;
        let step = u64::from_le_bytes(
            meta_bytes(&entries, "meta/step")?
                .try_into()
                .map_err(|_| CkptError::Malformed("meta/step length".into()))?,
        );
        let opt_t = u64::from_le_bytes(
            meta_bytes(&entries, "meta/opt_t")?
                .try_into()
                .map_err(|_| CkptError::Malformed("meta/opt_t length".into()))?,
        );
        let rng_bytes = meta_bytes(&entries, "meta/rng")?;
        if rng_bytes.len() != 56 {
            return Err(CkptError::Malformed("meta/rng length".into()).into());
        }
        let mut rng = ChaCha8Rng::from_seed(rng_bytes[..32].try_into().unwrap());
        rng.set_stream(u64::from_le_bytes(rng_bytes[48..56].try_into().unwrap()));
        rng.set_word_pos(u128::from_le_bytes(rng_bytes[32..48].try_into().unwrap()));
        let params = unpack_param_set(&entries, "student")?;
        let model = Model {
            cfg: cfg.model_config(),
            params,
        };
        let teacher = if cfg.distill_weight > 0.0 {
            Some(Teacher {
                model: Model {
                    cfg: cfg.model_config(),
                    params: unpack_param_set(&entries, "teacher")?,
                },
                momentum: cfg.momentum,
            })
        } else {
            None
        };
        let mut opt = AdamW {
            t: opt_t,
            ..AdamW::default()
        };
        for p in model.params.iter() {
            let m_name = format!("opt/m/{}", p.name);
            if entries.iter().any(|e| e.name == m_name) {
                let m = find(&entries, &m_name)?
                    .payload
                    .as_f64()
                    .ok_or_else(|| CkptError::Malformed(format!("{m_name} dtype")))?;
                let v = find(&entries, &format!("opt/v/{}", p.name))?
                    .payload
                    .as_f64()
                    .ok_or_else(|| CkptError::Malformed("opt/v dtype".into()))?;
                opt.m.insert(p.name.clone(), m.to_vec());
                opt.v.insert(p.name.clone(), v.to_vec());
            }
        }
        Ok(Trainer {
            cfg,
            model,
            teacher,
            opt,
            rng,
            step,
        })
    }
}

fn meta_bytes(entries: &[TensorEntry], name: &str) -> Result<Vec<u8>, CkptError> {
    Ok(find(entries, name)?
        .payload
        .as_bytes()
        .ok_or_else(|| CkptError::Malformed(format!("{name} is not a byte tensor")))?
        .to_vec())
}

/// Encodes the batch for ITC through the given model/leaves: normalized
/// image [CLS] and text [EOS] representations plus the scaled-similarity
/// temperature.
fn contrastive_encode_with(
    model: &Model,
    lv: &Leaves,
    images: &[ImageInput],
    caps: &[String],
    vocab: &Vocabulary,
    delta: &[bool],
) -> Result<ContrastiveBatch, TrainError> {
    let mut img_rows = Vec::new();
    let mut txt_rows = Vec::new();
    let d = model.cfg.hidden;
    for img in images {
        let enc = model.encode_image(lv, img, None)?;
        img_rows.push(enc.cls.reshape(vec![1, d])?);
    }
    for cap in caps {
        let ids = vocab.tokenize(cap).ids;
        let enc = model.encode_text(lv, &ids, None)?;
        txt_rows.push(enc.eos.reshape(vec![1, d])?);
    }
    Ok(ContrastiveBatch {
        images: Tensor::concat_rows(&img_rows)?.normalize_rows()?,
        texts: Tensor::concat_rows(&txt_rows)?.normalize_rows()?,
        delta: delta.to_vec(),
        inv_temp: model.inv_temperature(lv),
    })
}

/// Runs a corrupted caption through the fusion encoder and gathers the
/// vocab logits at the prediction positions.
fn masked_logits(
    model: &Model,
    lv: &Leaves,
    img: &ImageInput,
    corrupted: &[usize],
    masked: &crate::losses::MaskedText,
    mode: MaskMode,
) -> Result<(Tensor, Vec<usize>), TrainError> {
    let pair = model.encode_pair(lv, img, corrupted, mode, None)?;
    // caption token i sits at text position i+1 ([CLS] first); positions
    // past truncation are dropped
    let limit = pair.txt_len.saturating_sub(1);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (&p, &t) in masked.positions.iter().zip(&masked.targets) {
        if p + 1 < limit + 1 && p + 1 < pair.txt_len {
            rows.push(pair.text_row(p + 1));
            targets.push(t);
        }
    }
    let hidden = pair.tokens.gather_rows(&rows)?;
    let logits = model.mlm_logits(lv, &hidden)?;
    Ok((logits, targets))
}
