//! Image and text tokenization: patch embedding with a learnable 2-D
//! positional grid, a toy word-level text tokenizer with character-bigram
//! fallback, and modality-tagged sequence concatenation.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("image {h}x{w} not divisible by patch size {patch}")]
    Indivisible { h: usize, w: usize, patch: usize },
    #[error("grid {got}x{got} exceeds positional table {max}x{max} and interpolation is disabled")]
    GridTooLarge { got: usize, max: usize },
    #[error("token id {id} out of range for vocab of size {vocab}")]
    VocabId { id: usize, vocab: usize },
    #[error("embedding dim mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("vocab file line {line}: {msg}")]
    VocabFile { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const CLS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const PAD_ID: usize = 3;
pub const UNK_ID: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[CLS]", "[EOS]", "[MASK]", "[PAD]", "<unk>"];

/// Closed token vocabulary with word-boundary tracking. Whole words map to
/// single tokens; out-of-vocabulary words fall back to character-bigram
/// pieces (prefixed `##`), keeping the word-boundary map intact.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// Word index (within the sentence) of each token.
    pub word_ids: Vec<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from a word list. Bigram fallback pieces for
    /// every listed word are included so near-miss words still tokenize.
    pub fn build<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Vocabulary {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for s in SPECIAL_TOKENS {
            v.intern(s);
        }
        let words: Vec<String> = words.into_iter().map(|w| w.as_ref().to_string()).collect();
        for w in &words {
            v.intern(w);
        }
        for w in &words {
            for piece in bigram_pieces(w) {
                v.intern(&piece);
            }
        }
        v
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.to_string(), id);
        self.id_to_token.push(token.to_string());
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// Whitespace word split with bigram fallback; returns token ids plus
    /// the word index of every token.
    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let mut ids = Vec::new();
        let mut word_ids = Vec::new();
        for (wi, word) in text.split_whitespace().enumerate() {
            if let Some(id) = self.id(word) {
                ids.push(id);
                word_ids.push(wi);
            } else {
                for piece in bigram_pieces(word) {
                    ids.push(self.id(&piece).unwrap_or(UNK_ID));
                    word_ids.push(wi);
                }
            }
        }
        TokenizedText { ids, word_ids }
    }

    /// Inverse of tokenize for display: joins tokens with spaces, gluing
    /// `##` continuation pieces to the preceding token.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or("<unk>");
            if let Some(rest) = tok.strip_prefix("##") {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    /// Line-oriented `token<TAB>id` file, specials first.
    pub fn save(&self, path: &Path) -> Result<(), TokenizeError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, tok) in self.id_to_token.iter().enumerate() {
            writeln!(f, "{tok}\t{id}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary, TokenizeError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut id_to_token = Vec::new();
        for (ln, line) in f.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| TokenizeError::VocabFile {
                line: ln + 1,
                msg: "missing tab separator".into(),
            })?;
            let id: usize = id.parse().map_err(|_| TokenizeError::VocabFile {
                line: ln + 1,
                msg: format!("bad id {id:?}"),
            })?;
            if id != id_to_token.len() {
                return Err(TokenizeError::VocabFile {
                    line: ln + 1,
                    msg: format!("non-contiguous id {id}"),
                });
            }
            id_to_token.push(tok.to_string());
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizeError::VocabFile {
                    line: i + 1,
                    msg: format!("expected special {s} at id {i}"),
                });
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}

fn bigram_pieces(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .chunks(2)
        .map(|c| format!("##{}", c.iter().collect::<String>()))
        .collect()
}

/// Raw image in [0,1], channels-last row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub pixels: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

impl ImageInput {
    pub fn new(pixels: Vec<f64>, h: usize, w: usize) -> ImageInput {
        assert_eq!(pixels.len(), h * w * 3, "pixel buffer does not match {h}x{w}x3");
        ImageInput { pixels, h, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    ImgCls,
    ImgPatch,
    TxtCls,
    TxtToken,
    TxtEos,
    TxtMask,
    Pad,
}

impl TokenKind {
    pub fn is_image(self) -> bool {
        matches!(self, TokenKind::ImgCls | TokenKind::ImgPatch)
    }

    pub fn is_text(self) -> bool {
        matches!(
            self,
            TokenKind::TxtCls | TokenKind::TxtToken | TokenKind::TxtEos | TokenKind::TxtMask
        )
    }
}

/// Embedded token sequence: an L x d matrix plus per-token metadata.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub embeddings: Tensor,
    pub kinds: Vec<TokenKind>,
    pub positions: Vec<usize>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Adds a modality embedding to every row.
    pub fn add_modality(&self, modal: &Tensor) -> Result<TokenSequence, TokenizeError> {
        if modal.shape() != [self.dim()] {
            return Err(TokenizeError::DimMismatch(self.dim(), modal.numel()));
        }
        Ok(TokenSequence {
            embeddings: self.embeddings.add_broadcast_row(modal)?,
            kinds: self.kinds.clone(),
            positions: self.positions.clone(),
            truncated: self.truncated,
        })
    }
}

/// Learnable pieces of the patch embedder.
pub struct PatchParams<'a> {
    /// [patch*patch*3, d] projection.
    pub proj_w: &'a Tensor,
    /// [d] projection bias.
    pub proj_b: &'a Tensor,
    /// [d] learnable image [CLS] embedding.
    pub cls: &'a Tensor,
    /// [grid_max * grid_max, d] positional table.
    pub pos_grid: &'a Tensor,
    pub grid_max: usize,
    /// Bilinearly interpolate the table for grids other than grid_max.
    pub interpolate: bool,
}

/// Splits the image into disjoint patches, linearly projects each into d
/// dimensions, adds the 2-D positional embedding, and pre-appends [CLS].
pub fn patchify(
    img: &ImageInput,
    patch: usize,
    p: &PatchParams,
) -> Result<TokenSequence, TokenizeError> {
    if img.h % patch != 0 || img.w % patch != 0 {
        return Err(TokenizeError::Indivisible {
            h: img.h,
            w: img.w,
            patch,
        });
    }
    let (gh, gw) = (img.h / patch, img.w / patch);
    if (gh > p.grid_max || gw > p.grid_max) && !p.interpolate {
        return Err(TokenizeError::GridTooLarge {
            got: gh.max(gw),
            max: p.grid_max,
        });
    }
    let d = p.proj_b.numel();
    let k = patch * patch * 3;
    // flatten patches row-major over (row, col, channel)
    let mut flat = Vec::with_capacity(gh * gw * k);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                for c in 0..patch {
                    let base = ((pr * patch + r) * img.w + pc * patch + c) * 3;
                    flat.extend_from_slice(&img.pixels[base..base + 3]);
                }
            }
        }
    }
    let patches = Tensor::constant(flat, vec![gh * gw, k]);
    let projected = patches.matmul(p.proj_w)?.add_broadcast_row(p.proj_b)?;
    let taps = grid_taps(gh, gw, p.grid_max);
    let pos = p.pos_grid.gather_rows_weighted(&taps)?;
    let body = projected.add(&pos)?;
    let cls_row = p.cls.reshape(vec![1, d])?;
    let embeddings = Tensor::concat_rows(&[cls_row, body])?;
    let mut kinds = vec![TokenKind::ImgCls];
    kinds.extend(std::iter::repeat(TokenKind::ImgPatch).take(gh * gw));
    Ok(TokenSequence {
        embeddings,
        positions: (0..=gh * gw).collect(),
        kinds,
        truncated: false,
    })
}

/// Bilinear taps mapping a gh x gw grid onto the gmax x gmax table.
fn grid_taps(gh: usize, gw: usize, gmax: usize) -> Vec<Vec<(usize, f64)>> {
    let coord = |i: usize, n: usize| -> f64 {
        if n <= 1 {
            (gmax as f64 - 1.0) / 2.0
        } else {
            i as f64 * (gmax as f64 - 1.0) / (n as f64 - 1.0)
        }
    };
    let mut taps = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        for c in 0..gw {
            let (y, x) = (coord(r, gh), coord(c, gw));
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let y1 = (y0 + 1).min(gmax - 1);
            let x1 = (x0 + 1).min(gmax - 1);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let mut tap = Vec::new();
            for (gy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (gx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        tap.push((gy * gmax + gx, w));
                    }
                }
            }
            taps.push(tap);
        }
    }
    taps
}

/// Wraps token ids in [CLS] .. [EOS], embeds them, and adds the 1-D
/// positional embedding. Overlong input is truncated, keeping [EOS].
pub fn embed_text(
    ids: &[usize],
    vocab_size: usize,
    emb: &Tensor,
    pos1d: &Tensor,
    max_text_len: usize,
) -> Result<TokenSequence, TokenizeError> {
    embed_text_open(ids, vocab_size, emb, pos1d, max_text_len, true)
}

/// As `embed_text` but optionally without the closing [EOS]; the open form
/// is the decoding prefix used by recursive caption generation.
pub fn embed_text_open(
    ids: &[usize],
    vocab_size: usize,
    emb: &Tensor,
    pos1d: &Tensor,
    max_text_len: usize,
    close_with_eos: bool,
) -> Result<TokenSequence, TokenizeError> {
    for &id in ids {
        if id >= vocab_size {
            return Err(TokenizeError::VocabId {
                id,
                vocab: vocab_size,
            });
        }
    }
    let budget = max_text_len - if close_with_eos { 2 } else { 1 };
    let truncated = ids.len() > budget;
    let body = &ids[..ids.len().min(budget)];
    let mut full = Vec::with_capacity(body.len() + 2);
    full.push(CLS_ID);
    full.extend_from_slice(body);
    if close_with_eos {
        full.push(EOS_ID);
    }
    let rows = emb.gather_rows(&full)?;
    let pos = pos1d.gather_rows(&(0..full.len()).collect::<Vec<_>>())?;
    let embeddings = rows.add(&pos)?;
    let mut kinds = vec![TokenKind::TxtCls];
    for &id in body {
        kinds.push(if id == MASK_ID {
            TokenKind::TxtMask
        } else {
            TokenKind::TxtToken
        });
    }
    if close_with_eos {
        kinds.push(TokenKind::TxtEos);
    }
    Ok(TokenSequence {
        embeddings,
        positions: (0..full.len()).collect(),
        kinds,
        truncated,
    })
}

/// Concatenates an image sequence and a text sequence (image block first),
/// adding the matching modality embedding to each block.
pub fn concat_pair(
    img_seq: &TokenSequence,
    txt_seq: &TokenSequence,
    modal_img: &Tensor,
    modal_txt: &Tensor,
) -> Result<TokenSequence, TokenizeError> {
    if img_seq.dim() != txt_seq.dim() {
        return Err(TokenizeError::DimMismatch(img_seq.dim(), txt_seq.dim()));
    }
    let img = img_seq.add_modality(modal_img)?;
    let txt = txt_seq.add_modality(modal_txt)?;
    let embeddings = Tensor::concat_rows(&[img.embeddings, txt.embeddings])?;
    let mut kinds = img_seq.kinds.clone();
    kinds.extend_from_slice(&txt_seq.kinds);
    let mut positions = img_seq.positions.clone();
    positions.extend_from_slice(&txt_seq.positions);
    Ok(TokenSequence {
        embeddings,
        kinds,
        positions,
        truncated: img_seq.truncated || txt_seq.truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch_params(d: usize, patch: usize, gmax: usize) -> (Tensor, Tensor, Tensor, Tensor) {
        let k = patch * patch * 3;
        let proj_w = Tensor::constant(
            (0..k * d).map(|i| (i % 7) as f64 * 0.01).collect(),
            vec![k, d],
        );
        let proj_b = Tensor::constant(vec![0.0; d], vec![d]);
        let cls = Tensor::constant((0..d).map(|i| i as f64 * 0.1).collect(), vec![d]);
        let pos = Tensor::constant(
            (0..gmax * gmax * d).map(|i| (i % 5) as f64 * 0.02).collect(),
            vec![gmax * gmax, d],
        );
        (proj_w, proj_b, cls, pos)
    }

    #[test]
    fn single_patch_image() {
        let (w, b, cls, pos) = patch_params(4, 8, 4);
        let p = PatchParams {
            proj_w: &w,
            proj_b: &b,
            cls: &cls,
            pos_grid: &pos,
            grid_max: 4,
            interpolate: true,
        };
        let img = ImageInput::new(vec![0.5; 8 * 8 * 3], 8, 8);
        let seq = patchify(&img, 8, &p).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.kinds[0], TokenKind::ImgCls);
        assert_eq!(seq.kinds[1], TokenKind::ImgPatch);
    }

    #[test]
    fn patch_count_32x32() {
        let (w, b, cls, pos) = patch_params(4, 8, 4);
        let p = PatchParams {
            proj_w: &w,
            proj_b: &b,
            cls: &cls,
            pos_grid: &pos,
            grid_max: 4,
            interpolate: true,
        };
        let img = ImageInput::new(vec![0.1; 32 * 32 * 3], 32, 32);
        let seq = patchify(&img, 8, &p).unwrap();
        assert_eq!(seq.len(), 17);
        // lossless in count: patches x p^2 == pixels
        let n_patches = seq.kinds.iter().filter(|k| **k == TokenKind::ImgPatch).count();
        assert_eq!(n_patches * 8 * 8, 32 * 32);
    }

    #[test]
    fn zero_image_rows_equal_positional_embeddings() {
        let (w, b, cls, pos) = patch_params(4, 8, 2);
        let p = PatchParams {
            proj_w: &w,
            proj_b: &b,
            cls: &cls,
            pos_grid: &pos,
            grid_max: 2,
            interpolate: true,
        };
        let img = ImageInput::new(vec![0.0; 16 * 16 * 3], 16, 16);
        let seq = patchify(&img, 8, &p).unwrap();
        // grid is exactly 2x2 so taps are exact table rows
        for r in 0..4 {
            let got = &seq.embeddings.data()[(r + 1) * 4..(r + 2) * 4];
            let want = &pos.data()[r * 4..(r + 1) * 4];
            assert_eq!(got, want);
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let (w, b, cls, pos) = patch_params(4, 8, 4);
        let p = PatchParams {
            proj_w: &w,
            proj_b: &b,
            cls: &cls,
            pos_grid: &pos,
            grid_max: 4,
            interpolate: true,
        };
        let img = ImageInput::new(vec![0.0; 12 * 12 * 3], 12, 12);
        assert!(matches!(
            patchify(&img, 8, &p),
            Err(TokenizeError::Indivisible { .. })
        ));
    }

    #[test]
    fn oversize_grid_without_interpolation_is_config_error() {
        let (w, b, cls, pos) = patch_params(4, 8, 2);
        let p = PatchParams {
            proj_w: &w,
            proj_b: &b,
            cls: &cls,
            pos_grid: &pos,
            grid_max: 2,
            interpolate: false,
        };
        let img = ImageInput::new(vec![0.0; 32 * 32 * 3], 32, 32);
        assert!(matches!(
            patchify(&img, 8, &p),
            Err(TokenizeError::GridTooLarge { .. })
        ));
    }

    fn text_params(v: usize, d: usize, maxlen: usize) -> (Tensor, Tensor) {
        let emb = Tensor::constant(
            (0..v * d).map(|i| (i % 11) as f64 * 0.1).collect(),
            vec![v, d],
        );
        let pos = Tensor::constant(
            (0..maxlen * d).map(|i| (i % 3) as f64 * 0.01).collect(),
            vec![maxlen, d],
        );
        (emb, pos)
    }

    #[test]
    fn empty_text_is_cls_eos() {
        let (emb, pos) = text_params(16, 4, 8);
        let seq = embed_text(&[], 16, &emb, &pos, 8).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.kinds, vec![TokenKind::TxtCls, TokenKind::TxtEos]);
    }

    #[test]
    fn three_tokens_make_length_five() {
        let (emb, pos) = text_params(16, 4, 8);
        let seq = embed_text(&[7, 8, 9], 16, &emb, &pos, 8).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(
            seq.kinds,
            vec![
                TokenKind::TxtCls,
                TokenKind::TxtToken,
                TokenKind::TxtToken,
                TokenKind::TxtToken,
                TokenKind::TxtEos
            ]
        );
        assert!(!seq.truncated);
    }

    #[test]
    fn positional_embedding_breaks_repeated_token_tie() {
        let (emb, pos) = text_params(16, 4, 8);
        let seq = embed_text(&[7, 7], 16, &emb, &pos, 8).unwrap();
        let row1 = &seq.embeddings.data()[4..8];
        let row2 = &seq.embeddings.data()[8..12];
        assert_ne!(row1, row2);
    }

    #[test]
    fn overlong_text_truncates_keeping_eos() {
        let (emb, pos) = text_params(16, 4, 6);
        let seq = embed_text(&[5, 6, 7, 8, 9, 10, 11], 16, &emb, &pos, 6).unwrap();
        assert_eq!(seq.len(), 6);
        assert!(seq.truncated);
        assert_eq!(*seq.kinds.last().unwrap(), TokenKind::TxtEos);
    }

    #[test]
    fn out_of_range_id_is_vocab_error() {
        let (emb, pos) = text_params(16, 4, 8);
        assert!(matches!(
            embed_text(&[99], 16, &emb, &pos, 8),
            Err(TokenizeError::VocabId { id: 99, .. })
        ));
    }

    #[test]
    fn concat_lengths_add() {
        let (w, b, cls, posg) = patch_params(4, 8, 4);
        let p = PatchParams {
            proj_w: &w,
            proj_b: &b,
            cls: &cls,
            pos_grid: &posg,
            grid_max: 4,
            interpolate: true,
        };
        let img = ImageInput::new(vec![0.2; 32 * 32 * 3], 32, 32);
        let iseq = patchify(&img, 8, &p).unwrap();
        let (emb, pos) = text_params(16, 4, 8);
        let tseq = embed_text(&[7, 8, 9], 16, &emb, &pos, 8).unwrap();
        let mi = Tensor::constant(vec![0.3; 4], vec![4]);
        let mt = Tensor::constant(vec![0.7; 4], vec![4]);
        let pair = concat_pair(&iseq, &tseq, &mi, &mt).unwrap();
        assert_eq!(pair.len(), 22);
    }

    #[test]
    fn zero_modality_embedding_is_plain_concat() {
        let (emb, pos) = text_params(16, 4, 8);
        let a = embed_text(&[7], 16, &emb, &pos, 8).unwrap();
        let b = embed_text(&[9, 10], 16, &emb, &pos, 8).unwrap();
        let zero = Tensor::constant(vec![0.0; 4], vec![4]);
        let pair = concat_pair(&a, &b, &zero, &zero).unwrap();
        let plain = Tensor::concat_rows(&[a.embeddings.clone(), b.embeddings.clone()]).unwrap();
        assert_eq!(pair.embeddings.data(), plain.data());
    }

    #[test]
    fn modality_add_commutes_with_concat() {
        let (emb, pos) = text_params(16, 4, 8);
        let a = embed_text(&[7], 16, &emb, &pos, 8).unwrap();
        let b = embed_text(&[9], 16, &emb, &pos, 8).unwrap();
        let mi = Tensor::constant(vec![0.3, -0.1, 0.2, 0.5], vec![4]);
        let mt = Tensor::constant(vec![0.7, 0.4, -0.2, 0.1], vec![4]);
        let before = concat_pair(&a, &b, &mi, &mt).unwrap();
        let am = a.add_modality(&mi).unwrap();
        let bm = b.add_modality(&mt).unwrap();
        let zero = Tensor::constant(vec![0.0; 4], vec![4]);
        let after = concat_pair(&am, &bm, &zero, &zero).unwrap();
        assert_eq!(before.embeddings.data(), after.embeddings.data());
    }

    #[test]
    fn vocab_roundtrip_and_word_map() {
        let v = Vocabulary::build(["red", "square", "a"]);
        let t = v.tokenize("a red square");
        assert_eq!(t.ids.len(), 3);
        assert_eq!(t.word_ids, vec![0, 1, 2]);
        assert_eq!(v.detokenize(&t.ids), "a red square");
        // OOV falls back to bigram pieces of known words
        let t2 = v.tokenize("ared");
        assert!(t2.ids.len() > 1);
        assert!(t2.word_ids.iter().all(|&w| w == 0));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocabulary::build(["red", "blue", "circle"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        let v2 = Vocabulary::load(&path).unwrap();
        assert_eq!(v.len(), v2.len());
        for id in 0..v.len() {
            assert_eq!(v.token(id), v2.token(id));
        }
    }
}
