//! The unified transformer. One parameter set serves as image encoder,
//! text encoder, and fusion network; the role is selected purely by the
//! input sequence and the attention mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::params::{init_normal, Leaves, ParamKind, ParamSet};
use crate::tensor::{Tensor, TensorError, TensorResult};
use crate::tokenize::{
    concat_pair, embed_text_open, patchify, ImageInput, PatchParams, TokenKind, TokenSequence,
    TokenizeError,
};

/// Additive mask value for disallowed attention positions; exp() of the
/// shifted score underflows to exactly 0 in f64, so masked inputs cannot
/// leak into outputs even at the bit level.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("mask length {mask} does not match sequence length {seq}")]
    LengthMismatch { mask: usize, seq: usize },
    #[error("interleaved modality blocks: image tokens must precede all text tokens")]
    InterleavedBlocks,
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type BackboneResult<T> = Result<T, BackboneError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    /// Side length of the learnable 2-D positional grid (max grid).
    pub grid_max: usize,
    /// Bilinearly interpolate positions for grids other than grid_max.
    pub interpolate_pos: bool,
}

impl ModelConfig {
    /// Desk-scale default: small enough for finite-difference checks,
    /// large enough to overfit toy corpora.
    pub fn toy(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 8,
            max_text_len: 16,
            vocab_size,
            dropout: 0.0,
            grid_max: 4,
            interpolate_pos: true,
        }
    }

    pub fn validate(&self) {
        assert!(self.hidden % self.heads == 0, "hidden must divide by heads");
        assert!(
            self.layers > 0
                && self.hidden > 0
                && self.heads > 0
                && self.mlp_ratio > 0
                && self.patch_size > 0
                && self.max_text_len > 2
                && self.vocab_size > 0
                && self.grid_max > 0,
            "all model extents must be positive"
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Bidirectional,
    Seq2Seq,
}

/// Boolean L x L attention matrix: entry (i, j) allows output i to read
/// input j.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub allow: Vec<bool>,
    pub len: usize,
}

impl AttentionMask {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    /// Additive form consumed by softmax.
    pub fn additive(&self) -> Vec<f64> {
        self.allow
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_NEG })
            .collect()
    }
}

/// Builds the attention mask from token kinds per the mask mode.
///
/// Bidirectional: all non-PAD pairs. Seq2seq: image tokens see only image
/// tokens; the text token at text position k sees every image token and
/// text positions <= k. PAD attends (and is attended by) nothing but
/// itself.
pub fn build_mask(kinds: &[TokenKind], mode: MaskMode) -> BackboneResult<AttentionMask> {
    let n = kinds.len();
    let mut seen_text = false;
    for k in kinds {
        if k.is_text() {
            seen_text = true;
        } else if k.is_image() && seen_text {
            return Err(BackboneError::InterleavedBlocks);
        }
    }
    // text position index per token (0 at TXT_CLS)
    let mut text_pos = vec![0usize; n];
    let mut tp = 0;
    for (i, k) in kinds.iter().enumerate() {
        if k.is_text() {
            text_pos[i] = tp;
            tp += 1;
        }
    }
    let mut allow = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = if i == j {
                true
            } else if kinds[i] == TokenKind::Pad || kinds[j] == TokenKind::Pad {
                false
            } else {
                match mode {
                    MaskMode::Bidirectional => true,
                    MaskMode::Seq2Seq => {
                        if kinds[i].is_image() {
                            kinds[j].is_image()
                        } else {
                            kinds[j].is_image() || text_pos[j] <= text_pos[i]
                        }
                    }
                }
            };
            allow[i * n + j] = a;
        }
    }
    Ok(AttentionMask { allow, len: n })
}

/// Dropout state threaded through a training forward pass.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

fn apply_dropout(x: Tensor, drop: Option<&mut Dropout>) -> TensorResult {
    match drop {
        Some(d) if d.p > 0.0 => {
            let keep = 1.0 - d.p;
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| {
                    if d.rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            x.mul_const(&mask)
        }
        _ => Ok(x),
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// Hidden state at IMG_CLS, shape [d].
    pub cls: Tensor,
    /// All hidden states, [L, d].
    pub tokens: Tensor,
    pub kinds: Vec<TokenKind>,
}

#[derive(Debug, Clone)]
pub struct TextEncoding {
    /// Hidden state at TXT_EOS (the contrastive text representation).
    pub eos: Tensor,
    /// Hidden state at TXT_CLS (the matching / classification token).
    pub cls: Tensor,
    pub tokens: Tensor,
    pub kinds: Vec<TokenKind>,
}

#[derive(Debug, Clone)]
pub struct PairEncoding {
    pub tokens: Tensor,
    pub kinds: Vec<TokenKind>,
    pub img_len: usize,
    pub txt_len: usize,
}

impl PairEncoding {
    pub fn txt_cls_index(&self) -> usize {
        self.img_len
    }

    pub fn txt_cls(&self) -> TensorResult {
        self.tokens.row(self.img_len)
    }

    /// Row indices of image patch tokens (no [CLS]).
    pub fn patch_rows(&self) -> Vec<usize> {
        (0..self.img_len)
            .filter(|&i| self.kinds[i] == TokenKind::ImgPatch)
            .collect()
    }

    /// Row indices of content text tokens (no [CLS]/[EOS]/PAD).
    pub fn content_text_rows(&self) -> Vec<usize> {
        (self.img_len..self.img_len + self.txt_len)
            .filter(|&i| matches!(self.kinds[i], TokenKind::TxtToken | TokenKind::TxtMask))
            .collect()
    }

    /// Absolute row of text position k (0 = TXT_CLS).
    pub fn text_row(&self, k: usize) -> usize {
        self.img_len + k
    }
}

/// The unified model: config plus one named parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Model {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        let k = cfg.patch_size * cfg.patch_size * 3;
        let std = 0.02;
        let mut ps = ParamSet::new();
        let mut w = |ps: &mut ParamSet, name: &str, kind: ParamKind, shape: Vec<usize>| {
            let n = shape.iter().product();
            let data = match kind {
                ParamKind::LayerNorm if name.ends_with(".g") => vec![1.0; n],
                ParamKind::LayerNorm | ParamKind::Bias | ParamKind::Temperature => vec![0.0; n],
                _ => init_normal(&mut rng, n, std),
            };
            ps.add(name, kind, shape, data);
        };
        w(&mut ps, "patch.proj.w", ParamKind::Weight, vec![k, d]);
        w(&mut ps, "patch.proj.b", ParamKind::Bias, vec![d]);
        w(&mut ps, "patch.cls", ParamKind::Embedding, vec![d]);
        w(
            &mut ps,
            "patch.pos",
            ParamKind::Embedding,
            vec![cfg.grid_max * cfg.grid_max, d],
        );
        w(&mut ps, "text.emb", ParamKind::Embedding, vec![cfg.vocab_size, d]);
        w(&mut ps, "text.pos", ParamKind::Embedding, vec![cfg.max_text_len, d]);
        w(&mut ps, "modal.img", ParamKind::Embedding, vec![d]);
        w(&mut ps, "modal.txt", ParamKind::Embedding, vec![d]);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            w(&mut ps, &p("ln1.g"), ParamKind::LayerNorm, vec![d]);
            w(&mut ps, &p("ln1.b"), ParamKind::LayerNorm, vec![d]);
            for nm in ["wq", "wk", "wv", "wo"] {
                w(&mut ps, &p(&format!("attn.{nm}")), ParamKind::Weight, vec![d, d]);
            }
            for nm in ["bq", "bk", "bv", "bo"] {
                w(&mut ps, &p(&format!("attn.{nm}")), ParamKind::Bias, vec![d]);
            }
            w(&mut ps, &p("ln2.g"), ParamKind::LayerNorm, vec![d]);
            w(&mut ps, &p("ln2.b"), ParamKind::LayerNorm, vec![d]);
            w(&mut ps, &p("mlp.w1"), ParamKind::Weight, vec![d, d * cfg.mlp_ratio]);
            w(&mut ps, &p("mlp.b1"), ParamKind::Bias, vec![d * cfg.mlp_ratio]);
            w(&mut ps, &p("mlp.w2"), ParamKind::Weight, vec![d * cfg.mlp_ratio, d]);
            w(&mut ps, &p("mlp.b2"), ParamKind::Bias, vec![d]);
        }
        w(&mut ps, "final_ln.g", ParamKind::LayerNorm, vec![d]);
        w(&mut ps, "final_ln.b", ParamKind::LayerNorm, vec![d]);
        // learnable contrastive temperature, stored as log t so t stays
        // positive; initialized at log 1 = 0
        w(&mut ps, "itc.log_t", ParamKind::Temperature, vec![1]);
        w(&mut ps, "itm.w1", ParamKind::Weight, vec![d, 2 * d]);
        w(&mut ps, "itm.b1", ParamKind::Bias, vec![2 * d]);
        w(&mut ps, "itm.w2", ParamKind::Weight, vec![2 * d, 1]);
        w(&mut ps, "itm.b2", ParamKind::Bias, vec![1]);
        w(&mut ps, "mlm.w", ParamKind::Weight, vec![d, cfg.vocab_size]);
        w(&mut ps, "mlm.b", ParamKind::Bias, vec![cfg.vocab_size]);
        Model { cfg, params: ps }
    }

    /// Adds a fresh 2-layer MLP head (in -> hidden -> out) for a
    /// downstream task, named `head.<task>.*`.
    pub fn add_head(&mut self, task: &str, out_dim: usize, seed: u64) {
        let d = self.cfg.hidden;
        let hid = 2 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = format!("head.{task}");
        self.params.add(
            &format!("{p}.w1"),
            ParamKind::Weight,
            vec![d, hid],
            init_normal(&mut rng, d * hid, 0.02),
        );
        self.params
            .add(&format!("{p}.b1"), ParamKind::Bias, vec![hid], vec![0.0; hid]);
        self.params.add(
            &format!("{p}.w2"),
            ParamKind::Weight,
            vec![hid, out_dim],
            init_normal(&mut rng, hid * out_dim, 0.02),
        );
        self.params.add(
            &format!("{p}.b2"),
            ParamKind::Bias,
            vec![out_dim],
            vec![0.0; out_dim],
        );
    }

    /// Concatenated 2-layer head used by NLVR2-style dual-sequence input
    /// (2d -> 2d -> out), named `head.<task>.*`.
    pub fn add_wide_head(&mut self, task: &str, out_dim: usize, seed: u64) {
        let d = self.cfg.hidden;
        let hid = 2 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = format!("head.{task}");
        self.params.add(
            &format!("{p}.w1"),
            ParamKind::Weight,
            vec![2 * d, hid],
            init_normal(&mut rng, 2 * d * hid, 0.02),
        );
        self.params
            .add(&format!("{p}.b1"), ParamKind::Bias, vec![hid], vec![0.0; hid]);
        self.params.add(
            &format!("{p}.w2"),
            ParamKind::Weight,
            vec![hid, out_dim],
            init_normal(&mut rng, hid * out_dim, 0.02),
        );
        self.params.add(
            &format!("{p}.b2"),
            ParamKind::Bias,
            vec![out_dim],
            vec![0.0; out_dim],
        );
    }

    pub fn leaves(&self, trainable: bool) -> Leaves {
        self.params.leaves(trainable)
    }

    fn patch_params<'a>(&self, lv: &'a Leaves) -> PatchParams<'a> {
        PatchParams {
            proj_w: lv.get("patch.proj.w"),
            proj_b: lv.get("patch.proj.b"),
            cls: lv.get("patch.cls"),
            pos_grid: lv.get("patch.pos"),
            grid_max: self.cfg.grid_max,
            interpolate: self.cfg.interpolate_pos,
        }
    }

    pub fn image_sequence(&self, lv: &Leaves, img: &ImageInput) -> BackboneResult<TokenSequence> {
        let seq = patchify(img, self.cfg.patch_size, &self.patch_params(lv))?;
        Ok(seq)
    }

    pub fn text_sequence(
        &self,
        lv: &Leaves,
        ids: &[usize],
        close_with_eos: bool,
    ) -> BackboneResult<TokenSequence> {
        Ok(embed_text_open(
            ids,
            self.cfg.vocab_size,
            lv.get("text.emb"),
            lv.get("text.pos"),
            self.cfg.max_text_len,
            close_with_eos,
        )?)
    }

    /// The transformer stack: pre-norm multi-head self-attention + MLP
    /// with residual connections, closed by a final layer norm.
    pub fn forward(
        &self,
        lv: &Leaves,
        seq: &TokenSequence,
        mask: &AttentionMask,
        mut drop: Option<&mut Dropout>,
    ) -> BackboneResult<Tensor> {
        if mask.len != seq.len() {
            return Err(BackboneError::LengthMismatch {
                mask: mask.len,
                seq: seq.len(),
            });
        }
        let d = self.cfg.hidden;
        let heads = self.cfg.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let additive = mask.additive();
        let mut x = seq.embeddings.clone();
        for l in 0..self.cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let h = x.layernorm_rows(lv.get(&p("ln1.g")), lv.get(&p("ln1.b")), 1e-5)?;
            let q = h.matmul(lv.get(&p("attn.wq")))?.add_broadcast_row(lv.get(&p("attn.bq")))?;
            let k = h.matmul(lv.get(&p("attn.wk")))?.add_broadcast_row(lv.get(&p("attn.bk")))?;
            let v = h.matmul(lv.get(&p("attn.wv")))?.add_broadcast_row(lv.get(&p("attn.bv")))?;
            let mut head_outs = Vec::with_capacity(heads);
            for hi in 0..heads {
                let qh = q.slice_cols(hi * hd, hd)?;
                let kh = k.slice_cols(hi * hd, hd)?;
                let vh = v.slice_cols(hi * hd, hd)?;
                let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
                let probs = scores.softmax_rows(Some(&additive))?;
                head_outs.push(probs.matmul(&vh)?);
            }
            let ctx = Tensor::concat_cols(&head_outs)?;
            let attn_out = ctx
                .matmul(lv.get(&p("attn.wo")))?
                .add_broadcast_row(lv.get(&p("attn.bo")))?;
            let attn_out = apply_dropout(attn_out, drop.as_deref_mut())?;
            x = x.add(&attn_out)?;
            let h2 = x.layernorm_rows(lv.get(&p("ln2.g")), lv.get(&p("ln2.b")), 1e-5)?;
            let m = h2
                .matmul(lv.get(&p("mlp.w1")))?
                .add_broadcast_row(lv.get(&p("mlp.b1")))?
                .gelu()
                .matmul(lv.get(&p("mlp.w2")))?
                .add_broadcast_row(lv.get(&p("mlp.b2")))?;
            let m = apply_dropout(m, drop.as_deref_mut())?;
            x = x.add(&m)?;
        }
        Ok(x.layernorm_rows(lv.get("final_ln.g"), lv.get("final_ln.b"), 1e-5)?)
    }

    /// Image-encoder role: bidirectional attention over patch tokens.
    pub fn encode_image(
        &self,
        lv: &Leaves,
        img: &ImageInput,
        drop: Option<&mut Dropout>,
    ) -> BackboneResult<ImageEncoding> {
        let seq = self.image_sequence(lv, img)?.add_modality(lv.get("modal.img"))?;
        let mask = build_mask(&seq.kinds, MaskMode::Bidirectional)?;
        let tokens = self.forward(lv, &seq, &mask, drop)?;
        Ok(ImageEncoding {
            cls: tokens.row(0)?,
            kinds: seq.kinds,
            tokens,
        })
    }

    /// Text-encoder role. The [EOS] output is the contrastive
    /// representation; the text [CLS] output serves the matching and
    /// classification heads.
    pub fn encode_text(
        &self,
        lv: &Leaves,
        ids: &[usize],
        drop: Option<&mut Dropout>,
    ) -> BackboneResult<TextEncoding> {
        let seq = self
            .text_sequence(lv, ids, true)?
            .add_modality(lv.get("modal.txt"))?;
        let mask = build_mask(&seq.kinds, MaskMode::Bidirectional)?;
        let tokens = self.forward(lv, &seq, &mask, drop)?;
        let eos_row = seq
            .kinds
            .iter()
            .rposition(|k| *k == TokenKind::TxtEos)
            .expect("closed text sequence has an EOS");
        Ok(TextEncoding {
            eos: tokens.row(eos_row)?,
            cls: tokens.row(0)?,
            kinds: seq.kinds,
            tokens,
        })
    }

    /// Fusion role over a prebuilt text sequence (possibly corrupted by
    /// masking, possibly open-ended for generation).
    pub fn encode_pair_seq(
        &self,
        lv: &Leaves,
        img: &ImageInput,
        txt_seq: &TokenSequence,
        mode: MaskMode,
        drop: Option<&mut Dropout>,
    ) -> BackboneResult<PairEncoding> {
        let img_seq = self.image_sequence(lv, img)?;
        let pair = concat_pair(&img_seq, txt_seq, lv.get("modal.img"), lv.get("modal.txt"))?;
        let mask = build_mask(&pair.kinds, mode)?;
        let tokens = self.forward(lv, &pair, &mask, drop)?;
        Ok(PairEncoding {
            tokens,
            img_len: img_seq.len(),
            txt_len: txt_seq.len(),
            kinds: pair.kinds,
        })
    }

    pub fn encode_pair(
        &self,
        lv: &Leaves,
        img: &ImageInput,
        text_ids: &[usize],
        mode: MaskMode,
        drop: Option<&mut Dropout>,
    ) -> BackboneResult<PairEncoding> {
        let txt_seq = self.text_sequence(lv, text_ids, true)?;
        self.encode_pair_seq(lv, img, &txt_seq, mode, drop)
    }

    /// 2-layer GELU MLP head over a [d] vector; `prefix` selects the
    /// parameter group (e.g. "itm", "head.vqa").
    pub fn mlp_head(&self, lv: &Leaves, prefix: &str, x: &Tensor) -> TensorResult<Tensor> {
        let x = x.reshape(vec![1, x.numel()])?;
        let h = x
            .matmul(lv.get(&format!("{prefix}.w1")))?
            .add_broadcast_row(lv.get(&format!("{prefix}.b1")))?
            .gelu();
        let out = h
            .matmul(lv.get(&format!("{prefix}.w2")))?
            .add_broadcast_row(lv.get(&format!("{prefix}.b2")))?;
        let n = out.numel();
        out.reshape(vec![n])
    }

    /// MLM head logits over the vocab for each given hidden row.
    pub fn mlm_logits(&self, lv: &Leaves, hidden_rows: &Tensor) -> TensorResult<Tensor> {
        hidden_rows
            .matmul(lv.get("mlm.w"))?
            .add_broadcast_row(lv.get("mlm.b"))
    }

    /// Contrastive temperature t = exp(log_t), always positive.
    pub fn temperature(&self, lv: &Leaves) -> Tensor {
        lv.get("itc.log_t").exp()
    }

    /// 1/t as a tape-connected scalar, for scaling similarity matrices.
    pub fn inv_temperature(&self, lv: &Leaves) -> Tensor {
        lv.get("itc.log_t").neg().exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::PAD_ID;

    fn kinds(img: usize, txt: usize) -> Vec<TokenKind> {
        let mut k = Vec::new();
        if img > 0 {
            k.push(TokenKind::ImgCls);
            k.extend(std::iter::repeat(TokenKind::ImgPatch).take(img - 1));
        }
        if txt > 0 {
            k.push(TokenKind::TxtCls);
            k.extend(std::iter::repeat(TokenKind::TxtToken).take(txt.saturating_sub(2)));
            k.push(TokenKind::TxtEos);
        }
        k
    }

    #[test]
    fn bidirectional_mask_is_all_ones() {
        let m = build_mask(&kinds(2, 3), MaskMode::Bidirectional).unwrap();
        assert!(m.allow.iter().all(|&a| a));
    }

    #[test]
    fn seq2seq_mask_matches_stated_rows() {
        let m = build_mask(&kinds(2, 3), MaskMode::Seq2Seq).unwrap();
        let rows: Vec<Vec<bool>> = (0..5)
            .map(|i| (0..5).map(|j| m.allows(i, j)).collect())
            .collect();
        assert_eq!(rows[0], vec![true, true, false, false, false]);
        assert_eq!(rows[1], vec![true, true, false, false, false]);
        assert_eq!(rows[2], vec![true, true, true, false, false]);
        assert_eq!(rows[3], vec![true, true, true, true, false]);
        assert_eq!(rows[4], vec![true, true, true, true, true]);
    }

    #[test]
    fn text_only_seq2seq_is_lower_triangular() {
        let m = build_mask(&kinds(0, 4), MaskMode::Seq2Seq).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allows(i, j), j <= i);
            }
        }
    }

    #[test]
    fn pad_attends_only_itself() {
        let mut k = kinds(2, 3);
        k.push(TokenKind::Pad);
        let m = build_mask(&k, MaskMode::Bidirectional).unwrap();
        for j in 0..5 {
            assert!(!m.allows(5, j));
            assert!(!m.allows(j, 5));
        }
        assert!(m.allows(5, 5));
    }

    #[test]
    fn interleaved_blocks_rejected() {
        let k = vec![TokenKind::TxtCls, TokenKind::ImgCls];
        assert!(matches!(
            build_mask(&k, MaskMode::Bidirectional),
            Err(BackboneError::InterleavedBlocks)
        ));
    }

    fn toy_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::toy(32);
        cfg.layers = 1;
        cfg.hidden = 16;
        cfg.heads = 2;
        Model::init(cfg, seed)
    }

    fn toy_img(v: f64) -> ImageInput {
        ImageInput::new(vec![v; 16 * 16 * 3], 16, 16)
    }

    #[test]
    fn masked_position_cannot_influence_output() {
        let model = toy_model(3);
        let lv = model.leaves(false);
        let base = model
            .encode_pair(&lv, &toy_img(0.4), &[7, 9], MaskMode::Seq2Seq, None)
            .unwrap();
        // perturb the last text token (EOS precursor position): earlier
        // positions must be bit-identical under seq2seq
        let perturbed = model
            .encode_pair(&lv, &toy_img(0.4), &[7, 23], MaskMode::Seq2Seq, None)
            .unwrap();
        let d = model.cfg.hidden;
        let changed_from = base.text_row(2); // text position 2 is the first changed token
        for row in 0..changed_from {
            assert_eq!(
                &base.tokens.data()[row * d..(row + 1) * d],
                &perturbed.tokens.data()[row * d..(row + 1) * d],
                "row {row} leaked future information"
            );
        }
    }

    #[test]
    fn zeroed_value_and_proj_reduce_to_mlp_path() {
        let mut model = toy_model(5);
        for name in ["layer0.attn.wv", "layer0.attn.bv", "layer0.attn.wo", "layer0.attn.bo"] {
            let p = model.params.get_mut(name).unwrap();
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let lv = model.leaves(false);
        let seq = model
            .text_sequence(&lv, &[7, 9], true)
            .unwrap()
            .add_modality(lv.get("modal.txt"))
            .unwrap();
        let mask = build_mask(&seq.kinds, MaskMode::Bidirectional).unwrap();
        let out = model.forward(&lv, &seq, &mask, None).unwrap();
        // hand-computed MLP-only path
        let x = seq.embeddings.clone();
        let h2 = x
            .layernorm_rows(lv.get("layer0.ln2.g"), lv.get("layer0.ln2.b"), 1e-5)
            .unwrap();
        let m = h2
            .matmul(lv.get("layer0.mlp.w1"))
            .unwrap()
            .add_broadcast_row(lv.get("layer0.mlp.b1"))
            .unwrap()
            .gelu()
            .matmul(lv.get("layer0.mlp.w2"))
            .unwrap()
            .add_broadcast_row(lv.get("layer0.mlp.b2"))
            .unwrap();
        let expect = x
            .add(&m)
            .unwrap()
            .layernorm_rows(lv.get("final_ln.g"), lv.get("final_ln.b"), 1e-5)
            .unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn permutation_equivariance_of_mutually_visible_tokens() {
        let model = toy_model(11);
        let lv = model.leaves(false);
        let seq = model
            .text_sequence(&lv, &[7, 9, 12], true)
            .unwrap()
            .add_modality(lv.get("modal.txt"))
            .unwrap();
        let mask = build_mask(&seq.kinds, MaskMode::Bidirectional).unwrap();
        let out = model.forward(&lv, &seq, &mask, None).unwrap();
        // swap rows 1 and 2 of the embedded input (positions included)
        let perm = [0usize, 2, 1, 3, 4];
        let permuted = TokenSequence {
            embeddings: seq.embeddings.gather_rows(&perm).unwrap(),
            kinds: perm.iter().map(|&i| seq.kinds[i]).collect(),
            positions: perm.iter().map(|&i| seq.positions[i]).collect(),
            truncated: false,
        };
        let out_p = model.forward(&lv, &permuted, &mask, None).unwrap();
        let d = model.cfg.hidden;
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..d {
                let a = out.data()[from * d + j];
                let b = out_p.data()[to * d + j];
                assert!((a - b).abs() < 1e-9, "row {from}->{to} differs: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        // check via softmax on a masked score matrix directly
        let kindvec = kinds(3, 4);
        let m = build_mask(&kindvec, MaskMode::Seq2Seq).unwrap();
        let n = kindvec.len();
        let scores: Vec<f64> = (0..n * n).map(|i| ((i * 13 + 5) % 17) as f64 * 0.3).collect();
        let t = Tensor::constant(scores, vec![n, n]);
        let p = t.softmax_rows(Some(&m.additive())).unwrap();
        for i in 0..n {
            let row = &p.data()[i * n..(i + 1) * n];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for j in 0..n {
                if !m.allows(i, j) {
                    assert_eq!(row[j], 0.0, "mass on masked position ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn empty_text_pair_equals_unimodal_image_encode() {
        let model = toy_model(17);
        let lv = model.leaves(false);
        let img = toy_img(0.3);
        let solo = model.encode_image(&lv, &img, None).unwrap();
        let empty_txt = TokenSequence {
            embeddings: Tensor::zeros(vec![0, model.cfg.hidden]),
            kinds: vec![],
            positions: vec![],
            truncated: false,
        };
        let pair = model
            .encode_pair_seq(&lv, &img, &empty_txt, MaskMode::Bidirectional, None)
            .unwrap();
        assert_eq!(solo.tokens.data(), pair.tokens.data());
    }

    #[test]
    fn empty_text_cls_and_eos_differ() {
        let model = toy_model(19);
        let lv = model.leaves(false);
        let enc = model.encode_text(&lv, &[], None).unwrap();
        assert_ne!(enc.cls.data(), enc.eos.data());
    }

    #[test]
    fn batched_encode_equals_singles() {
        let model = toy_model(23);
        let lv = model.leaves(false);
        let imgs: Vec<ImageInput> = (0..4).map(|i| toy_img(0.1 + 0.2 * i as f64)).collect();
        let singles: Vec<Vec<f64>> = imgs
            .iter()
            .map(|im| model.encode_image(&lv, im, None).unwrap().cls.data().to_vec())
            .collect();
        // batch loop shares the same leaves; results must agree elementwise
        for (im, want) in imgs.iter().zip(&singles) {
            let got = model.encode_image(&lv, im, None).unwrap();
            for (a, b) in got.cls.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn role_unification_single_parameter_set() {
        let model = toy_model(29);
        let lv = model.leaves(true);
        let img = toy_img(0.2);
        let ie = model.encode_image(&lv, &img, None).unwrap();
        let te = model.encode_text(&lv, &[7], None).unwrap();
        let pe = model
            .encode_pair(&lv, &img, &[7], MaskMode::Bidirectional, None)
            .unwrap();
        let loss = ie
            .cls
            .sum()
            .add(&te.eos.sum())
            .unwrap()
            .add(&pe.tokens.sum())
            .unwrap();
        loss.backward().unwrap();
        // every backbone parameter got gradient contributions through one
        // shared leaf per parameter
        let g = lv.grads();
        let idx = model.params.position("layer0.attn.wq").unwrap();
        assert!(g[idx].is_some());
        // PAD id never used, but the shared text embedding still exists once
        let emb_idx = model.params.position("text.emb").unwrap();
        assert!(g[emb_idx].is_some());
        let _ = PAD_ID;
    }
}
