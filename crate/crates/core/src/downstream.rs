//! The five downstream adaptations: image-text retrieval (zero-shot and
//! fine-tuned with split encoders), VQA-style classification, captioning
//! by recursive [MASK] decoding, NLVR2-style paired-image reasoning, and
//! SNLI-VE-style entailment.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, MaskMode, Model, PairEncoding};
use crate::corpus::{
    CaptionExample, Nlvr2Example, SceneRecord, SnliExample, VqaExample, COLORS,
};
use crate::losses::{mask_text, mlm_loss, MaskGranularity, LABEL_SMOOTHING};
use crate::params::Leaves;
use crate::tensor::{Tensor, TensorError};
use crate::tokenize::{ImageInput, TokenKind, Vocabulary, EOS_ID, MASK_ID};
use crate::trainer::{lr_linear, AdamW, TrainError};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("representation row {0} is not L2-normalized (norm {1})")]
    NotNormalized(usize, f64),
    #[error("pair map misses {0} {1}")]
    IncompletePairMap(&'static str, usize),
    #[error("target vector has {got} entries, head expects {want}")]
    TargetLength { got: usize, want: usize },
    #[error("image id {0} not in corpus")]
    UnknownImage(u64),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Which token's hidden state represents the text side: the matching /
/// classification heads read [CLS], the contrastive representation reads
/// [EOS].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepMode {
    Matching,
    Contrastive,
}

/// The single accessor every head goes through: the absolute row of the
/// representative text token in a fused sequence.
pub fn representative_text_row(
    kinds: &[TokenKind],
    img_len: usize,
    mode: RepMode,
) -> Option<usize> {
    match mode {
        RepMode::Matching => {
            (kinds.get(img_len) == Some(&TokenKind::TxtCls)).then_some(img_len)
        }
        RepMode::Contrastive => kinds.iter().rposition(|k| *k == TokenKind::TxtEos),
    }
}

pub fn representative_hidden(
    pair: &PairEncoding,
    mode: RepMode,
) -> Result<Tensor, DownstreamError> {
    let row = representative_text_row(&pair.kinds, pair.img_len, mode)
        .ok_or(DownstreamError::IncompletePairMap("representative token", 0))?;
    Ok(pair.tokens.row(row)?)
}

/// L2-normalized representations plus the ground-truth pairing, both
/// directions total.
pub struct RetrievalIndex {
    /// Row-major n_img x d.
    pub images: Vec<f64>,
    /// Row-major n_txt x d.
    pub texts: Vec<f64>,
    pub dim: usize,
    /// For each image, its positive text indices (non-empty).
    pub img_truth: Vec<Vec<usize>>,
    /// For each text, its positive image indices (non-empty).
    pub txt_truth: Vec<Vec<usize>>,
}

impl RetrievalIndex {
    pub fn n_images(&self) -> usize {
        self.images.len() / self.dim
    }

    pub fn n_texts(&self) -> usize {
        self.texts.len() / self.dim
    }

    pub fn validate(&self) -> Result<(), DownstreamError> {
        for (which, data) in [("images", &self.images), ("texts", &self.texts)] {
            for (i, row) in data.chunks(self.dim).enumerate() {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    let _ = which;
                    return Err(DownstreamError::NotNormalized(i, n));
                }
            }
        }
        for (i, t) in self.img_truth.iter().enumerate() {
            if t.is_empty() {
                return Err(DownstreamError::IncompletePairMap("image", i));
            }
        }
        for (j, t) in self.txt_truth.iter().enumerate() {
            if t.is_empty() {
                return Err(DownstreamError::IncompletePairMap("text", j));
            }
        }
        Ok(())
    }

    /// Inner-product similarity matrix, n_img x n_txt, no temperature.
    pub fn score(&self) -> Vec<f64> {
        let (n, m, d) = (self.n_images(), self.n_texts(), self.dim);
        let mut sims = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                sims[i * m + j] = (0..d)
                    .map(|k| self.images[i * d + k] * self.texts[j * d + k])
                    .sum();
            }
        }
        sims
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Recall {
    pub value: f64,
    /// True when K exceeded the candidate count and was clamped.
    pub clamped: bool,
}

/// Fraction of query rows whose any ground-truth candidate ranks in the
/// top K, ties broken toward the lower index.
pub fn recall_at_k(
    sims: &[f64],
    rows: usize,
    cols: usize,
    truth: &[Vec<usize>],
    k: usize,
) -> Recall {
    assert_eq!(sims.len(), rows * cols);
    assert_eq!(truth.len(), rows);
    let clamped = k > cols;
    let k = k.min(cols);
    let mut hits = 0usize;
    for i in 0..rows {
        let row = &sims[i * cols..(i + 1) * cols];
        let mut order: Vec<usize> = (0..cols).collect();
        // stable by construction: equal scores keep index order
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order[..k].iter().any(|j| truth[i].contains(j)) {
            hits += 1;
        }
    }
    Recall {
        value: hits as f64 / rows.max(1) as f64,
        clamped,
    }
}

fn transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; v.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = v[i * cols + j];
        }
    }
    t
}

/// Both retrieval directions at K.
pub fn recall_both(index: &RetrievalIndex, k: usize) -> (Recall, Recall) {
    let (n, m) = (index.n_images(), index.n_texts());
    let sims = index.score();
    let i2t = recall_at_k(&sims, n, m, &index.img_truth, k);
    let t2i = recall_at_k(&transpose(&sims, n, m), m, n, &index.txt_truth, k);
    (i2t, t2i)
}

/// Encodes a corpus into a retrieval index with the given encoders
/// (unified zero-shot use passes the same model twice). No gradients, no
/// augmentation.
pub fn build_index(
    img_model: &Model,
    txt_model: &Model,
    corpus: &[SceneRecord],
    vocab: &Vocabulary,
) -> Result<RetrievalIndex, DownstreamError> {
    let d = img_model.cfg.hidden;
    let ilv = img_model.params.leaves(false);
    let tlv = txt_model.params.leaves(false);
    let mut images = Vec::new();
    let mut texts = Vec::new();
    let mut img_truth = Vec::new();
    let mut txt_truth = Vec::new();
    let mut caption_owner: Vec<(usize, String)> = Vec::new();
    for (i, r) in corpus.iter().enumerate() {
        let enc = img_model.encode_image(&ilv, &r.image, None)?;
        push_normalized(&mut images, enc.cls.data());
        img_truth.push(Vec::new());
        for c in &r.captions {
            caption_owner.push((i, c.clone()));
        }
    }
    for (j, (owner, cap)) in caption_owner.iter().enumerate() {
        let ids = vocab.tokenize(cap).ids;
        let enc = txt_model.encode_text(&tlv, &ids, None)?;
        push_normalized(&mut texts, enc.eos.data());
        // a text is positive for its own image and any image whose
        // caption set contains the same string
        let mut pos = Vec::new();
        for (i, r) in corpus.iter().enumerate() {
            if i == *owner || r.captions.iter().any(|c| c == cap) {
                pos.push(i);
                img_truth[i].push(j);
            }
        }
        txt_truth.push(pos);
    }
    let index = RetrievalIndex {
        images,
        texts,
        dim: d,
        img_truth,
        txt_truth,
    };
    index.validate()?;
    Ok(index)
}

fn push_normalized(out: &mut Vec<f64>, row: &[f64]) {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    out.extend(row.iter().map(|v| v / n));
}

/// Schedule and optimizer knobs shared by all fine-tuning loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneCfg {
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl FinetuneCfg {
    pub fn toy(steps: u64, seed: u64) -> FinetuneCfg {
        FinetuneCfg {
            steps,
            warmup: steps / 10,
            peak_lr: 5e-4,
            batch_size: 8,
            weight_decay: 0.01,
            seed,
        }
    }
}

/// Separate image and text encoders cloned from one pre-trained model,
/// trained further with the contrastive loss only.
pub struct RetrievalFinetuner {
    pub img_model: Model,
    pub txt_model: Model,
    opt_img: AdamW,
    opt_txt: AdamW,
    rng: ChaCha8Rng,
    cfg: FinetuneCfg,
    step: u64,
}

impl RetrievalFinetuner {
    /// The clone is deep: the two encoders share nothing after this.
    pub fn from_pretrained(model: &Model, cfg: FinetuneCfg) -> RetrievalFinetuner {
        RetrievalFinetuner {
            img_model: model.clone(),
            txt_model: model.clone(),
            opt_img: AdamW::default(),
            opt_txt: AdamW::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            step: 0,
        }
    }

    /// One ITC step over a sampled batch; the temperature is carried
    /// over from pre-training inside each clone.
    pub fn step(
        &mut self,
        corpus: &[SceneRecord],
        vocab: &Vocabulary,
    ) -> Result<f64, DownstreamError> {
        use crate::losses::{itc_loss, ContrastiveBatch};
        let n = self.cfg.batch_size.min(corpus.len());
        let batch: Vec<&SceneRecord> = sample_indices(&mut self.rng, corpus.len(), n)
            .into_iter()
            .map(|i| &corpus[i])
            .collect();
        let ilv = self.img_model.params.leaves(true);
        let tlv = self.txt_model.params.leaves(true);
        let d = self.img_model.cfg.hidden;
        let mut img_rows = Vec::new();
        let mut txt_rows = Vec::new();
        let mut caps = Vec::new();
        for r in &batch {
            let enc = self.img_model.encode_image(&ilv, &r.image, None)?;
            img_rows.push(enc.cls.reshape(vec![1, d])?);
            let ci = if r.captions.len() > 1 {
                self.rng.random_range(0..r.captions.len())
            } else {
                0
            };
            caps.push(r.captions[ci].clone());
        }
        for cap in &caps {
            let ids = vocab.tokenize(cap).ids;
            let enc = self.txt_model.encode_text(&tlv, &ids, None)?;
            txt_rows.push(enc.eos.reshape(vec![1, d])?);
        }
        let mut delta = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                delta[i * n + j] = i == j || batch[i].captions.iter().any(|c| *c == caps[j]);
            }
        }
        let cb = ContrastiveBatch {
            images: Tensor::concat_rows(&img_rows)?.normalize_rows()?,
            texts: Tensor::concat_rows(&txt_rows)?.normalize_rows()?,
            delta,
            inv_temp: self.img_model.inv_temperature(&ilv),
        };
        let (out, _) = itc_loss(&cb).map_err(TrainError::Loss)?;
        let value = out.value();
        if out.loss.requires_grad() {
            out.loss.backward()?;
        }
        let lr = lr_linear(self.step.min(self.cfg.steps), self.cfg.steps, self.cfg.warmup, self.cfg.peak_lr);
        self.opt_img.step(
            &mut self.img_model.params,
            &ilv.grads(),
            lr,
            self.cfg.weight_decay,
        );
        self.opt_txt.step(
            &mut self.txt_model.params,
            &tlv.grads(),
            lr,
            self.cfg.weight_decay,
        );
        self.step += 1;
        Ok(value)
    }
}

fn find_record<'a>(
    corpus: &'a [SceneRecord],
    id: u64,
) -> Result<&'a SceneRecord, DownstreamError> {
    corpus
        .iter()
        .find(|r| r.id == id)
        .ok_or(DownstreamError::UnknownImage(id))
}

/// VQA head logits: fused bidirectional encode, [CLS] hidden state, MLP.
pub fn vqa_forward(
    model: &Model,
    lv: &Leaves,
    img: &ImageInput,
    question_ids: &[usize],
) -> Result<Tensor, DownstreamError> {
    let pair = model.encode_pair(lv, img, question_ids, MaskMode::Bidirectional, None)?;
    let rep = representative_hidden(&pair, RepMode::Matching)?;
    Ok(model.mlp_head(lv, "head.vqa", &rep)?)
}

/// Mean per-answer binary cross-entropy against soft targets.
pub fn vqa_loss(logits: &Tensor, targets: &[f64]) -> Result<Tensor, DownstreamError> {
    let a = logits.numel();
    if targets.len() != a {
        return Err(DownstreamError::TargetLength {
            got: targets.len(),
            want: a,
        });
    }
    // mean_j softplus(x_j) - y_j x_j
    let sp = logits.softplus().mean();
    let neg_yx: Vec<f64> = targets.iter().map(|y| -y / a as f64).collect();
    Ok(sp.add(&logits.weighted_sum(&neg_yx)?)?)
}

/// Fine-tunes the VQA head (and backbone) on templated color questions;
/// answers index into the color list.
pub fn finetune_vqa(
    model: &mut Model,
    corpus: &[SceneRecord],
    examples: &[VqaExample],
    vocab: &Vocabulary,
    cfg: &FinetuneCfg,
) -> Result<(), DownstreamError> {
    if model.params.position("head.vqa.w1").is_none() {
        model.add_head("vqa", COLORS.len(), cfg.seed ^ 0x5151);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::default();
    for step in 0..cfg.steps {
        let lv = model.params.leaves(true);
        let n = cfg.batch_size.min(examples.len());
        let batch = sample_indices(&mut rng, examples.len(), n);
        let mut total: Option<Tensor> = None;
        for ei in batch {
            let ex = &examples[ei];
            let r = find_record(corpus, ex.image_id)?;
            let ids = vocab.tokenize(&ex.question).ids;
            let logits = vqa_forward(model, &lv, &r.image, &ids)?;
            let mut targets = vec![0.0; COLORS.len()];
            targets[ex.answer] = 1.0;
            let loss = vqa_loss(&logits, &targets)?;
            total = Some(match total {
                None => loss,
                Some(t) => t.add(&loss)?,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / n as f64);
        loss.backward()?;
        let lr = lr_linear(step, cfg.steps, cfg.warmup, cfg.peak_lr);
        opt.step(&mut model.params, &lv.grads(), lr, cfg.weight_decay);
    }
    Ok(())
}

/// Argmax-answer accuracy over a VQA example set.
pub fn vqa_accuracy(
    model: &Model,
    corpus: &[SceneRecord],
    examples: &[VqaExample],
    vocab: &Vocabulary,
) -> Result<f64, DownstreamError> {
    let lv = model.params.leaves(false);
    let mut hits = 0usize;
    for ex in examples {
        let r = find_record(corpus, ex.image_id)?;
        let ids = vocab.tokenize(&ex.question).ids;
        let logits = vqa_forward(model, &lv, &r.image, &ids)?;
        let data = logits.data();
        let pred = (0..data.len())
            .max_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap())
            .unwrap();
        if pred == ex.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len().max(1) as f64)
}

/// One captioning training loss: token-level masking under the seq2seq
/// mask, same label-smoothed objective as pre-training.
pub fn caption_step_loss(
    model: &Model,
    lv: &Leaves,
    img: &ImageInput,
    caption_ids: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, DownstreamError> {
    // the closing [EOS] is a prediction target too; otherwise generation
    // would never learn to stop
    let mut ids = caption_ids.to_vec();
    ids.push(EOS_ID);
    let word_ids: Vec<usize> = (0..ids.len()).collect();
    let masked = mask_text(
        &ids,
        &word_ids,
        model.cfg.vocab_size,
        rng,
        MaskGranularity::Token,
        MaskMode::Seq2Seq,
    );
    // the corrupted ids already end with (possibly masked) [EOS], so the
    // sequence is built open instead of appending another one
    let txt_seq = model.text_sequence(lv, &masked.corrupted, false)?;
    let pair = model.encode_pair_seq(lv, img, &txt_seq, MaskMode::Seq2Seq, None)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (&p, &t) in masked.positions.iter().zip(&masked.targets) {
        if p + 1 < pair.txt_len {
            rows.push(pair.text_row(p + 1));
            targets.push(t);
        }
    }
    let logits = model.mlm_logits(lv, &pair.tokens.gather_rows(&rows)?)?;
    let out = mlm_loss(&logits, &targets, LABEL_SMOOTHING).map_err(TrainError::Loss)?;
    Ok(out.loss)
}

/// Fine-tunes captioning on (image, caption) pairs.
pub fn finetune_caption(
    model: &mut Model,
    corpus: &[SceneRecord],
    examples: &[CaptionExample],
    vocab: &Vocabulary,
    cfg: &FinetuneCfg,
) -> Result<(), DownstreamError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::default();
    for step in 0..cfg.steps {
        let lv = model.params.leaves(true);
        let n = cfg.batch_size.min(examples.len());
        let batch = sample_indices(&mut rng, examples.len(), n);
        let mut total: Option<Tensor> = None;
        for ei in batch {
            let ex = &examples[ei];
            let r = find_record(corpus, ex.image_id)?;
            let ids = vocab.tokenize(&ex.caption).ids;
            let loss = caption_step_loss(model, &lv, &r.image, &ids, &mut rng)?;
            total = Some(match total {
                None => loss,
                Some(t) => t.add(&loss)?,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / n as f64);
        if loss.requires_grad() {
            loss.backward()?;
        }
        let lr = lr_linear(step, cfg.steps, cfg.warmup, cfg.peak_lr);
        opt.step(&mut model.params, &lv.grads(), lr, cfg.weight_decay);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCaption {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

/// Greedy recursive decoding: the [MASK] token is appended to the
/// generated prefix, the fused seq2seq encode predicts it, and the argmax
/// becomes the next token; stops at [EOS] or the length budget.
pub fn caption_generate(
    model: &Model,
    img: &ImageInput,
    max_len: usize,
) -> Result<GeneratedCaption, DownstreamError> {
    let lv = model.params.leaves(false);
    let mut generated: Vec<usize> = Vec::new();
    // [CLS] + generated + [MASK] must fit in the text window
    let budget = max_len.min(model.cfg.max_text_len.saturating_sub(2));
    while generated.len() < budget {
        let mut ids = generated.clone();
        ids.push(MASK_ID);
        let txt_seq = model.text_sequence(&lv, &ids, false)?;
        let pair = model.encode_pair_seq(&lv, img, &txt_seq, MaskMode::Seq2Seq, None)?;
        let mask_row = pair.text_row(pair.txt_len - 1);
        let hidden = pair.tokens.row(mask_row)?.reshape(vec![1, model.cfg.hidden])?;
        let logits = model.mlm_logits(&lv, &hidden)?;
        let data = logits.data();
        let next = (0..data.len())
            .max_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap())
            .unwrap();
        if next == EOS_ID {
            return Ok(GeneratedCaption {
                ids: generated,
                truncated: false,
            });
        }
        generated.push(next);
    }
    Ok(GeneratedCaption {
        ids: generated,
        truncated: true,
    })
}

/// Per-position greedy token accuracy against reference captions (scored
/// up to the shorter length, with length mismatch counted as errors).
pub fn caption_token_accuracy(
    model: &Model,
    corpus: &[SceneRecord],
    examples: &[CaptionExample],
    vocab: &Vocabulary,
) -> Result<f64, DownstreamError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let r = find_record(corpus, ex.image_id)?;
        let want = vocab.tokenize(&ex.caption).ids;
        let got = caption_generate(model, &r.image, want.len() + 4)?.ids;
        total += want.len().max(got.len());
        correct += want
            .iter()
            .zip(&got)
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// NLVR2: two fused encodes share the text, their [CLS] states are
/// concatenated, and a wide head scores the joint representation.
pub fn nlvr2_forward(
    model: &Model,
    lv: &Leaves,
    img1: &ImageInput,
    img2: &ImageInput,
    sentence_ids: &[usize],
) -> Result<Tensor, DownstreamError> {
    let p1 = model.encode_pair(lv, img1, sentence_ids, MaskMode::Bidirectional, None)?;
    let p2 = model.encode_pair(lv, img2, sentence_ids, MaskMode::Bidirectional, None)?;
    let d = model.cfg.hidden;
    let c1 = representative_hidden(&p1, RepMode::Matching)?.reshape(vec![1, d])?;
    let c2 = representative_hidden(&p2, RepMode::Matching)?.reshape(vec![1, d])?;
    let joint = Tensor::concat_cols(&[c1, c2])?.reshape(vec![2 * d])?;
    Ok(model.mlp_head(lv, "head.nlvr2", &joint)?)
}

/// Binary cross-entropy on the single NLVR2 logit.
pub fn nlvr2_loss(logit: &Tensor, label: bool) -> Tensor {
    if label {
        logit.neg().softplus()
    } else {
        logit.softplus()
    }
}

pub fn finetune_nlvr2(
    model: &mut Model,
    corpus: &[SceneRecord],
    examples: &[Nlvr2Example],
    vocab: &Vocabulary,
    cfg: &FinetuneCfg,
) -> Result<(), DownstreamError> {
    if model.params.position("head.nlvr2.w1").is_none() {
        model.add_wide_head("nlvr2", 1, cfg.seed ^ 0x2211);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::default();
    for step in 0..cfg.steps {
        let lv = model.params.leaves(true);
        let n = cfg.batch_size.min(examples.len());
        let batch = sample_indices(&mut rng, examples.len(), n);
        let mut total: Option<Tensor> = None;
        for ei in batch {
            let ex = &examples[ei];
            let r1 = find_record(corpus, ex.image_ids[0])?;
            let r2 = find_record(corpus, ex.image_ids[1])?;
            let ids = vocab.tokenize(&ex.statement).ids;
            let logit = nlvr2_forward(model, &lv, &r1.image, &r2.image, &ids)?;
            let loss = nlvr2_loss(&logit, ex.label);
            total = Some(match total {
                None => loss,
                Some(t) => t.add(&loss)?,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / n as f64);
        loss.backward()?;
        let lr = lr_linear(step, cfg.steps, cfg.warmup, cfg.peak_lr);
        opt.step(&mut model.params, &lv.grads(), lr, cfg.weight_decay);
    }
    Ok(())
}

pub fn nlvr2_accuracy(
    model: &Model,
    corpus: &[SceneRecord],
    examples: &[Nlvr2Example],
    vocab: &Vocabulary,
) -> Result<f64, DownstreamError> {
    let lv = model.params.leaves(false);
    let mut hits = 0usize;
    for ex in examples {
        let r1 = find_record(corpus, ex.image_ids[0])?;
        let r2 = find_record(corpus, ex.image_ids[1])?;
        let ids = vocab.tokenize(&ex.statement).ids;
        let logit = nlvr2_forward(model, &lv, &r1.image, &r2.image, &ids)?;
        if (logit.item() > 0.0) == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len().max(1) as f64)
}

/// SNLI-VE: fused encode, [CLS], three-way head.
pub fn snli_forward(
    model: &Model,
    lv: &Leaves,
    img: &ImageInput,
    hypothesis_ids: &[usize],
) -> Result<Tensor, DownstreamError> {
    let pair = model.encode_pair(lv, img, hypothesis_ids, MaskMode::Bidirectional, None)?;
    let rep = representative_hidden(&pair, RepMode::Matching)?;
    Ok(model.mlp_head(lv, "head.snli", &rep)?)
}

/// Softmax cross-entropy on the 3-way logits.
pub fn snli_loss(logits: &Tensor, label: usize) -> Result<Tensor, DownstreamError> {
    let k = logits.numel();
    let lp = logits.reshape(vec![1, k])?.log_softmax_rows()?;
    let mut w = vec![0.0; k];
    w[label] = -1.0;
    Ok(lp.weighted_sum(&w)?)
}

pub fn finetune_snli(
    model: &mut Model,
    corpus: &[SceneRecord],
    examples: &[SnliExample],
    vocab: &Vocabulary,
    cfg: &FinetuneCfg,
) -> Result<(), DownstreamError> {
    if model.params.position("head.snli.w1").is_none() {
        model.add_head("snli", 3, cfg.seed ^ 0x33);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::default();
    for step in 0..cfg.steps {
        let lv = model.params.leaves(true);
        let n = cfg.batch_size.min(examples.len());
        let batch = sample_indices(&mut rng, examples.len(), n);
        let mut total: Option<Tensor> = None;
        for ei in batch {
            let ex = &examples[ei];
            let r = find_record(corpus, ex.image_id)?;
            let ids = vocab.tokenize(&ex.hypothesis).ids;
            let logits = snli_forward(model, &lv, &r.image, &ids)?;
            let loss = snli_loss(&logits, ex.label as usize)?;
            total = Some(match total {
                None => loss,
                Some(t) => t.add(&loss)?,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / n as f64);
        loss.backward()?;
        let lr = lr_linear(step, cfg.steps, cfg.warmup, cfg.peak_lr);
        opt.step(&mut model.params, &lv.grads(), lr, cfg.weight_decay);
    }
    Ok(())
}

pub fn snli_accuracy(
    model: &Model,
    corpus: &[SceneRecord],
    examples: &[SnliExample],
    vocab: &Vocabulary,
) -> Result<f64, DownstreamError> {
    let lv = model.params.leaves(false);
    let mut hits = 0usize;
    for ex in examples {
        let r = find_record(corpus, ex.image_id)?;
        let ids = vocab.tokenize(&ex.hypothesis).ids;
        let logits = snli_forward(model, &lv, &r.image, &ids)?;
        let data = logits.data();
        let pred = (0..3)
            .max_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap())
            .unwrap();
        if pred == ex.label as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len().max(1) as f64)
}

/// A stable hash of every parameter's bits, for no-mutation assertions.
pub fn param_fingerprint(model: &Model) -> u64 {
    let mut h = 0xcbf29ce484222325_u64;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for p in model.params.iter() {
        for b in p.name.as_bytes() {
            feed(*b);
        }
        for v in &p.data {
            for b in v.to_le_bytes() {
                feed(b);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::corpus::{corpus_vocabulary, generate_corpus, make_task_sets, EntailLabel};
    use approx::assert_abs_diff_eq;

    fn toy_model(seed: u64) -> Model {
        Model::init(ModelConfig::toy(512), seed)
    }

    #[test]
    fn diagonal_sims_give_perfect_recall() {
        let idx = RetrievalIndex {
            images: vec![1.0, 0.0, 0.0, 1.0],
            texts: vec![1.0, 0.0, 0.0, 1.0],
            dim: 2,
            img_truth: vec![vec![0], vec![1]],
            txt_truth: vec![vec![0], vec![1]],
        };
        idx.validate().unwrap();
        let (i2t, t2i) = recall_both(&idx, 1);
        assert_eq!(i2t.value, 1.0);
        assert_eq!(t2i.value, 1.0);
        assert!(!i2t.clamped);
    }

    #[test]
    fn uniform_ties_break_to_lower_index() {
        let n = 10;
        let sims = vec![0.5; n * n];
        let truth: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let r = recall_at_k(&sims, n, n, &truth, 1);
        // only query 0's truth (index 0) wins the tie-break
        assert_abs_diff_eq!(r.value, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn recall_matches_brute_force_ranks() {
        let mut state = 77u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64) / (u32::MAX as f64)
        };
        let (n, m) = (5, 5);
        let sims: Vec<f64> = (0..n * m).map(|_| next()).collect();
        let truth: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for k in 1..=m {
            let fast = recall_at_k(&sims, n, m, &truth, k).value;
            // brute force: rank of the truth column per row
            let mut hits = 0;
            for i in 0..n {
                let row = &sims[i * m..(i + 1) * m];
                let better = (0..m)
                    .filter(|&j| {
                        row[j] > row[i] || (row[j] == row[i] && j < i)
                    })
                    .count();
                if better < k {
                    hits += 1;
                }
            }
            assert_abs_diff_eq!(fast, hits as f64 / n as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn recall_is_monotone_in_k_and_clamps() {
        let sims = vec![0.3, 0.1, 0.9, 0.2, 0.8, 0.4];
        let truth = vec![vec![1], vec![0]];
        let mut last = 0.0;
        for k in 1..=3 {
            let r = recall_at_k(&sims, 2, 3, &truth, k);
            assert!(r.value >= last);
            last = r.value;
        }
        let r = recall_at_k(&sims, 2, 3, &truth, 10);
        assert!(r.clamped);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn unnormalized_index_is_rejected() {
        let idx = RetrievalIndex {
            images: vec![2.0, 0.0],
            texts: vec![1.0, 0.0],
            dim: 2,
            img_truth: vec![vec![0]],
            txt_truth: vec![vec![0]],
        };
        assert!(matches!(
            idx.validate(),
            Err(DownstreamError::NotNormalized(0, _))
        ));
    }

    #[test]
    fn representative_accessor_points_at_the_right_rows() {
        let model = toy_model(3);
        let lv = model.params.leaves(false);
        let vocab = corpus_vocabulary();
        let ids = vocab.tokenize("a red square").ids;
        let img = generate_corpus(1, 1, 0.0)[0].image.clone();
        let pair = model
            .encode_pair(&lv, &img, &ids, MaskMode::Bidirectional, None)
            .unwrap();
        let cls = representative_text_row(&pair.kinds, pair.img_len, RepMode::Matching).unwrap();
        assert_eq!(cls, pair.img_len);
        assert_eq!(pair.kinds[cls], TokenKind::TxtCls);
        let eos =
            representative_text_row(&pair.kinds, pair.img_len, RepMode::Contrastive).unwrap();
        assert_eq!(pair.kinds[eos], TokenKind::TxtEos);
        assert_eq!(eos, pair.img_len + pair.txt_len - 1);
    }

    #[test]
    fn zero_shot_eval_leaves_parameters_untouched() {
        let model = toy_model(5);
        let corpus = generate_corpus(6, 2, 0.0);
        let vocab = corpus_vocabulary();
        let before = param_fingerprint(&model);
        let idx = build_index(&model, &model, &corpus, &vocab).unwrap();
        let _ = recall_both(&idx, 1);
        assert_eq!(param_fingerprint(&model), before);
    }

    #[test]
    fn split_encoders_are_deep_copies() {
        let model = toy_model(7);
        let mut ft = RetrievalFinetuner::from_pretrained(&model, FinetuneCfg::toy(10, 1));
        ft.img_model.params.get_mut("patch.cls").unwrap().data[0] += 1.0;
        assert_eq!(
            ft.txt_model.params.get("patch.cls").unwrap().data,
            model.params.get("patch.cls").unwrap().data
        );
    }

    #[test]
    fn zero_step_finetune_equals_pretrained_encodes() {
        let model = toy_model(9);
        let corpus = generate_corpus(4, 3, 0.0);
        let vocab = corpus_vocabulary();
        let ft = RetrievalFinetuner::from_pretrained(&model, FinetuneCfg::toy(100, 1));
        let unified = build_index(&model, &model, &corpus, &vocab).unwrap();
        let split = build_index(&ft.img_model, &ft.txt_model, &corpus, &vocab).unwrap();
        assert_eq!(unified.images, split.images);
        assert_eq!(unified.texts, split.texts);
    }

    #[test]
    fn vqa_loss_hand_values() {
        let ln2 = 2.0_f64.ln();
        let logits = Tensor::constant(vec![0.0; 4], vec![4]);
        let one_hot = vec![1.0, 0.0, 0.0, 0.0];
        let loss = vqa_loss(&logits, &one_hot).unwrap();
        assert_abs_diff_eq!(loss.item(), ln2, epsilon = 1e-12);
        let all_zero = vec![0.0; 4];
        let loss0 = vqa_loss(&logits, &all_zero).unwrap();
        assert_abs_diff_eq!(loss0.item(), ln2, epsilon = 1e-12);
        assert!(matches!(
            vqa_loss(&logits, &[1.0; 5]),
            Err(DownstreamError::TargetLength { got: 5, want: 4 })
        ));
    }

    #[test]
    fn snli_uniform_logits_cost_ln3() {
        let logits = Tensor::constant(vec![0.0; 3], vec![3]);
        let loss = snli_loss(&logits, 1).unwrap();
        assert_abs_diff_eq!(loss.item(), 3.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn snli_inference_is_deterministic() {
        let mut model = toy_model(11);
        model.add_head("snli", 3, 1);
        let lv = model.params.leaves(false);
        let corpus = generate_corpus(1, 4, 0.0);
        let vocab = corpus_vocabulary();
        let ids = vocab.tokenize("a red square").ids;
        let a = snli_forward(&model, &lv, &corpus[0].image, &ids).unwrap();
        let b = snli_forward(&model, &lv, &corpus[0].image, &ids).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn nlvr2_identical_images_duplicate_the_halves() {
        let mut model = toy_model(13);
        model.add_wide_head("nlvr2", 1, 2);
        let lv = model.params.leaves(false);
        let corpus = generate_corpus(2, 5, 0.0);
        let vocab = corpus_vocabulary();
        let ids = vocab.tokenize("both images contain a square").ids;
        let img = &corpus[0].image;
        let p = model
            .encode_pair(&lv, img, &ids, MaskMode::Bidirectional, None)
            .unwrap();
        let cls = representative_hidden(&p, RepMode::Matching).unwrap();
        let d = model.cfg.hidden;
        let joint = Tensor::concat_cols(&[
            cls.reshape(vec![1, d]).unwrap(),
            cls.reshape(vec![1, d]).unwrap(),
        ])
        .unwrap();
        let jd = joint.data();
        assert_eq!(&jd[..d], &jd[d..]);
        // and the full forward agrees with the head on that vector
        let direct = nlvr2_forward(&model, &lv, img, img, &ids).unwrap();
        let via_head = model
            .mlp_head(&lv, "head.nlvr2", &joint.reshape(vec![2 * d]).unwrap())
            .unwrap();
        assert_eq!(direct.data(), via_head.data());
    }

    #[test]
    fn caption_generation_is_deterministic_and_prefix_stable() {
        let model = toy_model(17);
        let corpus = generate_corpus(1, 6, 0.0);
        let a = caption_generate(&model, &corpus[0].image, 6).unwrap();
        let b = caption_generate(&model, &corpus[0].image, 6).unwrap();
        assert_eq!(a, b);
        // shorter budget yields a prefix of the longer run
        let short = caption_generate(&model, &corpus[0].image, 3).unwrap();
        assert!(a.ids.starts_with(&short.ids) || short.ids == a.ids);
        if a.truncated {
            assert_eq!(a.ids.len(), 6);
        }
    }

    #[test]
    fn caption_budget_respects_text_window() {
        let model = toy_model(19);
        let corpus = generate_corpus(1, 7, 0.0);
        let g = caption_generate(&model, &corpus[0].image, 1000).unwrap();
        assert!(g.ids.len() <= model.cfg.max_text_len - 2);
    }

    #[test]
    fn caption_memorizes_one_pair() {
        let mut model = toy_model(23);
        let corpus = generate_corpus(1, 8, 0.0);
        let vocab = corpus_vocabulary();
        let sets = make_task_sets(&corpus).unwrap();
        let mut cfg = FinetuneCfg::toy(300, 3);
        cfg.batch_size = 1;
        cfg.peak_lr = 1e-3;
        finetune_caption(&mut model, &corpus, &sets.caption, &vocab, &cfg).unwrap();
        let want = vocab.tokenize(&corpus[0].captions[0]).ids;
        let got = caption_generate(&model, &corpus[0].image, want.len() + 4).unwrap();
        assert_eq!(
            got.ids,
            want,
            "generated {:?} vs caption {:?}",
            vocab.detokenize(&got.ids),
            corpus[0].captions[0]
        );
        assert!(!got.truncated);
    }

    #[test]
    fn snli_labels_round_trip_as_indices() {
        assert_eq!(EntailLabel::Entail as usize, 0);
        assert_eq!(EntailLabel::Neutral as usize, 1);
        assert_eq!(EntailLabel::Contradict as usize, 2);
    }
}
