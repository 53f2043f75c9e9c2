//! Deterministic synthetic image-text corpus: colored shapes on a grid
//! with templated captions, plus generators for the downstream task sets
//! (VQA, captioning, NLVR2-style pairs, SNLI-VE-style entailment).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::{ImageInput, Vocabulary};

/// Canvas edge; scenes render at the largest augmentation scale so the
/// trainer can always crop down.
pub const SCENE_SIZE: usize = 32;
/// Scene layout: 2 x 2 cells.
pub const GRID: usize = 2;

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 0.8, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("purple", [0.5, 0.0, 0.5]),
    ("orange", [1.0, 0.5, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("pink", [1.0, 0.5, 0.75]),
];

pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];

/// Every word any caption, question, or statement can use. Closed by
/// construction so nothing tokenizes through the OOV fallback.
pub const WORDS: [&str; 22] = [
    "a", "and", "what", "color", "is", "the", "both", "images", "contain",
    "there", "square", "circle", "triangle", "red", "green", "blue",
    "yellow", "purple", "orange", "cyan", "pink", "it",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("record {id}: pixel payload holds {got} floats, expected {expected}")]
    PixelLength { id: u64, expected: usize, got: usize },
    #[error("corpus has no object metadata; task sets require a generated corpus")]
    MissingMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        SHAPES[self as usize]
    }

    fn from_index(i: usize) -> Shape {
        [Shape::Square, Shape::Circle, Shape::Triangle][i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Index into COLORS.
    pub color: usize,
    /// Cell index in row-major GRID x GRID order.
    pub cell: usize,
}

impl SceneObject {
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn phrase(&self) -> String {
        format!("a {} {}", self.color_name(), self.shape.name())
    }
}

/// One corpus record: an image, its caption(s), and (when generated
/// rather than loaded) the object list the labels derive from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: u64,
    pub image: ImageInput,
    pub captions: Vec<String>,
    pub objects: Option<Vec<SceneObject>>,
}

/// Deterministic caption for an object list.
pub fn caption_for(objects: &[SceneObject]) -> String {
    let mut s = String::new();
    for (i, o) in objects.iter().enumerate() {
        if i > 0 {
            s.push_str(" and ");
        }
        let _ = write!(s, "{}", o.phrase());
    }
    s
}

/// Word-order permutation used as the paraphrase caption: two-object
/// scenes swap the object phrases; single-object scenes reverse the
/// word order.
pub fn paraphrase_for(objects: &[SceneObject]) -> String {
    if objects.len() >= 2 {
        let mut rev: Vec<SceneObject> = objects.to_vec();
        rev.reverse();
        caption_for(&rev)
    } else {
        let base = caption_for(objects);
        let mut words: Vec<&str> = base.split(' ').collect();
        words.reverse();
        words.join(" ")
    }
}

/// Rasterizes the object list onto an s x s x 3 canvas in [0,1]. All
/// values pass through f32 so file round trips are exact.
pub fn render_scene(objects: &[SceneObject], s: usize) -> ImageInput {
    let bg = 0.1_f32 as f64;
    let mut pixels = vec![bg; s * s * 3];
    let cell = s / GRID;
    for o in objects {
        let (cy, cx) = (o.cell / GRID, o.cell % GRID);
        let (y0, x0) = (cy * cell, cx * cell);
        let rgb = COLORS[o.color].1;
        let margin = cell / 8;
        let r = (cell / 2 - margin) as f64;
        let (mid_y, mid_x) = (y0 as f64 + cell as f64 / 2.0, x0 as f64 + cell as f64 / 2.0);
        for y in y0..y0 + cell {
            for x in x0..x0 + cell {
                let inside = match o.shape {
                    Shape::Square => {
                        y >= y0 + margin
                            && y < y0 + cell - margin
                            && x >= x0 + margin
                            && x < x0 + cell - margin
                    }
                    Shape::Circle => {
                        let dy = y as f64 + 0.5 - mid_y;
                        let dx = x as f64 + 0.5 - mid_x;
                        dy * dy + dx * dx <= r * r
                    }
                    Shape::Triangle => {
                        // apex at the cell's top center, base at the bottom
                        let fy = (y - y0) as f64 / cell as f64;
                        let fx = ((x as f64 + 0.5 - mid_x) / cell as f64).abs();
                        fy >= 0.15 && fy <= 0.85 && fx <= fy * 0.5
                    }
                };
                if inside {
                    for c in 0..3 {
                        pixels[(y * s + x) * 3 + c] = rgb[c] as f64;
                    }
                }
            }
        }
    }
    ImageInput { pixels, h: s, w: s }
}

/// Deterministic corpus of `n` scenes. With probability
/// `multi_caption_prob` a scene carries a second, paraphrased caption.
pub fn generate_corpus(n: usize, seed: u64, multi_caption_prob: f64) -> Vec<SceneRecord> {
    assert!(n >= 1, "need at least one scene");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let n_obj = if rng.random::<f64>() < 0.5 { 1 } else { 2 };
        let mut objects = Vec::with_capacity(n_obj);
        let first_shape = rng.random_range(0..SHAPES.len());
        let first_cell = rng.random_range(0..GRID * GRID);
        objects.push(SceneObject {
            shape: Shape::from_index(first_shape),
            color: rng.random_range(0..COLORS.len()),
            cell: first_cell,
        });
        if n_obj == 2 {
            // distinct shapes keep color questions unambiguous; distinct
            // cells keep the rendering overlap-free
            let mut shape = rng.random_range(0..SHAPES.len() - 1);
            if shape >= first_shape {
                shape += 1;
            }
            let mut cell = rng.random_range(0..GRID * GRID - 1);
            if cell >= first_cell {
                cell += 1;
            }
            objects.push(SceneObject {
                shape: Shape::from_index(shape),
                color: rng.random_range(0..COLORS.len()),
                cell,
            });
        }
        let mut captions = vec![caption_for(&objects)];
        if rng.random::<f64>() < multi_caption_prob {
            captions.push(paraphrase_for(&objects));
        }
        records.push(SceneRecord {
            id,
            image: render_scene(&objects, SCENE_SIZE),
            captions,
            objects: Some(objects),
        });
    }
    records
}

/// The corpus vocabulary: specials, the closed word list, and the
/// sub-word pieces the builder derives from it.
pub fn corpus_vocabulary() -> Vocabulary {
    Vocabulary::build(&WORDS)
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    id: u64,
    pixels: String,
    h: usize,
    w: usize,
    captions: Vec<String>,
}

/// One JSON object per line; pixels as base-64 of raw little-endian f32
/// in row-major H x W x 3 order.
pub fn save_corpus(records: &[SceneRecord], path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in records {
        let mut bytes = Vec::with_capacity(r.image.pixels.len() * 4);
        for &v in &r.image.pixels {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let wire = WireRecord {
            id: r.id,
            pixels: B64.encode(&bytes),
            h: r.image.h,
            w: r.image.w,
            captions: r.captions.clone(),
        };
        out.push_str(&serde_json::to_string(&wire).expect("serializable record"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a saved corpus. Loaded records carry no object metadata.
pub fn load_corpus(path: &Path) -> Result<Vec<SceneRecord>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let bytes = B64
            .decode(&wire.pixels)
            .map_err(|e| CorpusError::MalformedLine {
                line: i + 1,
                msg: format!("bad base64 pixels: {e}"),
            })?;
        let expected = wire.h * wire.w * 3;
        if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
            return Err(CorpusError::PixelLength {
                id: wire.id,
                expected,
                got: bytes.len() / 4,
            });
        }
        let pixels: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        records.push(SceneRecord {
            id: wire.id,
            image: ImageInput {
                pixels,
                h: wire.h,
                w: wire.w,
            },
            captions: wire.captions,
            objects: None,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic 80/10/10 split by a hash of the record id.
pub fn split_of(id: u64) -> Split {
    // FNV-1a over the id bytes
    let mut h = 0xcbf29ce484222325_u64;
    for b in id.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    match h % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqaExample {
    pub image_id: u64,
    pub question: String,
    /// Index into COLORS: the answer vocabulary is the color list.
    pub answer: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionExample {
    pub image_id: u64,
    pub caption: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Nlvr2Example {
    pub image_ids: [u64; 2],
    pub statement: String,
    pub label: bool,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntailLabel {
    Entail,
    Neutral,
    Contradict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnliExample {
    pub image_id: u64,
    pub hypothesis: String,
    pub label: EntailLabel,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct TaskSets {
    pub vqa: Vec<VqaExample>,
    pub caption: Vec<CaptionExample>,
    pub nlvr2: Vec<Nlvr2Example>,
    pub snli: Vec<SnliExample>,
}

fn shape_in(objects: &[SceneObject], shape: Shape) -> bool {
    objects.iter().any(|o| o.shape == shape)
}

/// Ground-truth label for an NLVR2 statement "both images contain a
/// <shape>"; re-derivable by `verify_labels`.
fn nlvr2_truth(a: &[SceneObject], b: &[SceneObject], shape: Shape) -> bool {
    shape_in(a, shape) && shape_in(b, shape)
}

/// Entailment rule for hypothesis "a <color> <shape>": the shape present
/// in that color entails; the shape present only in other colors
/// contradicts; the shape absent is neutral (the image says nothing
/// about it).
fn snli_truth(objects: &[SceneObject], color: usize, shape: Shape) -> EntailLabel {
    let with_shape: Vec<&SceneObject> = objects.iter().filter(|o| o.shape == shape).collect();
    if with_shape.is_empty() {
        EntailLabel::Neutral
    } else if with_shape.iter().any(|o| o.color == color) {
        EntailLabel::Entail
    } else {
        EntailLabel::Contradict
    }
}

/// Builds all four downstream task sets from a generated corpus.
pub fn make_task_sets(corpus: &[SceneRecord]) -> Result<TaskSets, CorpusError> {
    let mut sets = TaskSets::default();
    let metadata: Vec<&Vec<SceneObject>> = corpus
        .iter()
        .map(|r| r.objects.as_ref().ok_or(CorpusError::MissingMetadata))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.len() as u64 ^ 0x7a53);
    for (r, objects) in corpus.iter().zip(&metadata) {
        let split = split_of(r.id);
        // VQA: one color question per shape that appears exactly once
        for o in objects.iter() {
            if objects.iter().filter(|p| p.shape == o.shape).count() == 1 {
                sets.vqa.push(VqaExample {
                    image_id: r.id,
                    question: format!("what color is the {}", o.shape.name()),
                    answer: o.color,
                    split,
                });
            }
        }
        sets.caption.push(CaptionExample {
            image_id: r.id,
            caption: r.captions[0].clone(),
            split,
        });
        // SNLI-VE: one hypothesis per scene, label rotating by id so all
        // three classes appear
        let (color, shape) = match r.id % 3 {
            0 => {
                let o = objects[0];
                (o.color, o.shape)
            }
            1 => {
                // wrong color for a present shape when possible
                let o = objects[0];
                ((o.color + 1 + rng.random_range(0..COLORS.len() - 1)) % COLORS.len(), o.shape)
            }
            _ => {
                // an absent shape
                let absent = (0..SHAPES.len())
                    .map(Shape::from_index)
                    .find(|s| !shape_in(objects, *s));
                match absent {
                    Some(s) => (rng.random_range(0..COLORS.len()), s),
                    None => (objects[0].color, objects[0].shape),
                }
            }
        };
        sets.snli.push(SnliExample {
            image_id: r.id,
            hypothesis: format!("a {} {}", COLORS[color].0, shape.name()),
            label: snli_truth(objects, color, shape),
            split,
        });
    }
    // NLVR2: consecutive pairs; pick the statement shape steering the
    // label toward a 50/50 balance
    let mut trues = 0usize;
    for k in 0..corpus.len() / 2 {
        let (ra, rb) = (&corpus[2 * k], &corpus[2 * k + 1]);
        let (oa, ob) = (metadata[2 * k], metadata[2 * k + 1]);
        // steer toward whichever label is currently rarer; fall back to
        // any shape when the wanted label is unreachable for this pair
        let want = 2 * trues <= k;
        let shape = (0..SHAPES.len())
            .map(Shape::from_index)
            .find(|s| nlvr2_truth(oa, ob, *s) == want)
            .unwrap_or(Shape::Square);
        if nlvr2_truth(oa, ob, shape) {
            trues += 1;
        }
        sets.nlvr2.push(Nlvr2Example {
            image_ids: [ra.id, rb.id],
            statement: format!("both images contain a {}", shape.name()),
            label: nlvr2_truth(oa, ob, shape),
            split: split_of(ra.id),
        });
    }
    Ok(sets)
}

/// Re-derives every task label from the object lists; returns the number
/// of disagreements (zero for a well-formed generator).
pub fn verify_labels(corpus: &[SceneRecord], sets: &TaskSets) -> Result<usize, CorpusError> {
    let lookup = |id: u64| -> Result<&Vec<SceneObject>, CorpusError> {
        corpus
            .iter()
            .find(|r| r.id == id)
            .and_then(|r| r.objects.as_ref())
            .ok_or(CorpusError::MissingMetadata)
    };
    let color_index = |name: &str| COLORS.iter().position(|(n, _)| *n == name);
    let shape_index = |name: &str| SHAPES.iter().position(|n| *n == name);
    let mut bad = 0;
    for ex in &sets.vqa {
        let objects = lookup(ex.image_id)?;
        let shape_name = ex.question.rsplit(' ').next().unwrap();
        let shape = Shape::from_index(shape_index(shape_name).unwrap());
        let truth = objects.iter().find(|o| o.shape == shape).map(|o| o.color);
        if truth != Some(ex.answer) {
            bad += 1;
        }
    }
    for ex in &sets.caption {
        if caption_for(lookup(ex.image_id)?) != ex.caption {
            bad += 1;
        }
    }
    for ex in &sets.nlvr2 {
        let shape_name = ex.statement.rsplit(' ').next().unwrap();
        let shape = Shape::from_index(shape_index(shape_name).unwrap());
        let truth = nlvr2_truth(lookup(ex.image_ids[0])?, lookup(ex.image_ids[1])?, shape);
        if truth != ex.label {
            bad += 1;
        }
    }
    for ex in &sets.snli {
        let words: Vec<&str> = ex.hypothesis.split(' ').collect();
        let color = color_index(words[1]).unwrap();
        let shape = Shape::from_index(shape_index(words[2]).unwrap());
        if snli_truth(lookup(ex.image_id)?, color, shape) != ex.label {
            bad += 1;
        }
    }
    Ok(bad)
}
