//! Finite-difference verification of the four pre-training losses on a
//! small model: autodiff gradients against central differences over a
//! representative subset of parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{MaskMode, Model, ModelConfig};
use crate::corpus::{corpus_vocabulary, generate_corpus, SceneRecord};
use crate::losses::{
    ipa_distance, itc_loss, itm_loss, mask_text, mlm_loss, ContrastiveBatch, MaskGranularity,
    MaskedText, ALIGN_WEIGHT, IPOT_BETA, IPOT_OUTER, LABEL_SMOOTHING,
};
use crate::tensor::{grad_check, GradCheckReport, Tensor, TensorResult};
use crate::tokenize::Vocabulary;
use crate::trainer::Task;

/// Parameters every loss exercises: temperature, embeddings, layer norm,
/// attention bias, MLP bias, final norm.
const BASE_NAMES: [&str; 7] = [
    "itc.log_t",
    "patch.cls",
    "modal.txt",
    "layer0.ln1.g",
    "layer0.attn.bq",
    "layer1.mlp.b2",
    "final_ln.b",
];

fn check_names(task: Task) -> Vec<&'static str> {
    let mut names = BASE_NAMES.to_vec();
    match task {
        Task::Itc => {}
        Task::Itm => names.extend(["itm.b1", "itm.b2"]),
        Task::Mlm | Task::Smlm => names.push("mlm.b"),
    }
    names
}

struct CheckSetup {
    model: Model,
    corpus: Vec<SceneRecord>,
    vocab: Vocabulary,
    masked: Vec<MaskedText>,
    /// Transport plans solved once at the base point; the alignment term
    /// treats the plan as a constant, so the checked function must too.
    plans: Vec<Vec<f64>>,
}

fn setup(task: Task) -> CheckSetup {
    let model = Model::init(ModelConfig::toy(512), 42);
    let corpus = generate_corpus(2, 0, 0.0);
    let vocab = corpus_vocabulary();
    let mode = if task == Task::Smlm {
        MaskMode::Seq2Seq
    } else {
        MaskMode::Bidirectional
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let masked = corpus
        .iter()
        .map(|r| {
            let toks = vocab.tokenize(&r.captions[0]);
            mask_text(
                &toks.ids,
                &toks.word_ids,
                model.cfg.vocab_size,
                &mut rng,
                MaskGranularity::Word,
                mode,
            )
        })
        .collect();
    let mut plans = Vec::new();
    if task == Task::Itm {
        let lv = model.params.leaves(false);
        let d = model.cfg.hidden;
        for ci in [0usize, 1] {
            let ids = vocab.tokenize(&corpus[ci].captions[0]).ids;
            let pair = model
                .encode_pair(&lv, &corpus[0].image, &ids, MaskMode::Bidirectional, None)
                .expect("diagnostic setup is valid");
            let img_h = pair
                .tokens
                .gather_rows(&pair.patch_rows())
                .expect("diagnostic setup is valid");
            let txt_h = pair
                .tokens
                .gather_rows(&pair.content_text_rows())
                .expect("diagnostic setup is valid");
            plans.push(
                ipa_distance(img_h.data(), txt_h.data(), d, IPOT_OUTER, IPOT_BETA).plan,
            );
        }
    }
    CheckSetup {
        model,
        corpus,
        vocab,
        masked,
        plans,
    }
}

fn overridden_leaves(
    model: &Model,
    names: &[&str],
    inputs: &[Tensor],
) -> crate::params::Leaves {
    let mut lv = model.params.leaves(false);
    for (name, t) in names.iter().zip(inputs) {
        lv.replace(name, t.clone());
    }
    lv
}

fn loss_for(s: &CheckSetup, task: Task, names: &[&str], inputs: &[Tensor]) -> TensorResult<Tensor> {
    let lv = overridden_leaves(&s.model, names, inputs);
    let model = &s.model;
    let d = model.cfg.hidden;
    match task {
        Task::Itc => {
            let mut img_rows = Vec::new();
            let mut txt_rows = Vec::new();
            for r in &s.corpus {
                let enc = model
                    .encode_image(&lv, &r.image, None)
                    .expect("diagnostic setup is valid");
                img_rows.push(enc.cls.reshape(vec![1, d])?);
                let ids = s.vocab.tokenize(&r.captions[0]).ids;
                let enc = model
                    .encode_text(&lv, &ids, None)
                    .expect("diagnostic setup is valid");
                txt_rows.push(enc.eos.reshape(vec![1, d])?);
            }
            let cb = ContrastiveBatch {
                images: Tensor::concat_rows(&img_rows)?.normalize_rows()?,
                texts: Tensor::concat_rows(&txt_rows)?.normalize_rows()?,
                delta: vec![true, false, false, true],
                inv_temp: model.inv_temperature(&lv),
            };
            let (out, _) = itc_loss(&cb).expect("diagnostic setup is valid");
            Ok(out.loss)
        }
        Task::Itm => {
            // matched pair 0 plus pair 0's image with pair 1's caption;
            // the transport plans are captured constants so the checked
            // function is exactly the implemented objective
            let mut total = Tensor::scalar(0.0);
            for (ci, matched) in [(0usize, true), (1usize, false)] {
                let ids = s.vocab.tokenize(&s.corpus[ci].captions[0]).ids;
                let pair = model
                    .encode_pair(&lv, &s.corpus[0].image, &ids, MaskMode::Bidirectional, None)
                    .expect("diagnostic setup is valid");
                let logit = model.mlp_head(&lv, "itm", &pair.txt_cls()?)?;
                let bce = itm_loss(&logit, matched).expect("diagnostic setup is valid");
                let img_h = pair.tokens.gather_rows(&pair.patch_rows())?;
                let txt_h = pair.tokens.gather_rows(&pair.content_text_rows())?;
                let cost = {
                    let an = img_h.normalize_rows()?;
                    let bn = txt_h.normalize_rows()?;
                    let sims = an.matmul(&bn.transpose()?)?;
                    let ones = vec![1.0; sims.numel()];
                    sims.neg().add_const(&ones)?
                };
                let dist = cost.weighted_sum(&s.plans[if matched { 0 } else { 1 }])?;
                let signed = if matched {
                    dist.scale(ALIGN_WEIGHT)
                } else {
                    dist.scale(-ALIGN_WEIGHT)
                };
                total = total.add(&bce.loss.add(&signed)?)?;
            }
            Ok(total.scale(0.5))
        }
        Task::Mlm | Task::Smlm => {
            let mode = if task == Task::Smlm {
                MaskMode::Seq2Seq
            } else {
                MaskMode::Bidirectional
            };
            let mut total = Tensor::scalar(0.0);
            for (r, m) in s.corpus.iter().zip(&s.masked) {
                let pair = model
                    .encode_pair(&lv, &r.image, &m.corrupted, mode, None)
                    .expect("diagnostic setup is valid");
                let rows: Vec<usize> = m.positions.iter().map(|&p| pair.text_row(p + 1)).collect();
                let logits = model.mlm_logits(&lv, &pair.tokens.gather_rows(&rows)?)?;
                let out = mlm_loss(&logits, &m.targets, LABEL_SMOOTHING)
                    .expect("diagnostic setup is valid");
                total = total.add(&out.loss)?;
            }
            Ok(total.scale(0.5))
        }
    }
}

/// Autodiff vs central finite differences for one pre-training loss.
pub fn check_loss_gradients(task: Task, step: f64, tolerance: f64) -> TensorResult<GradCheckReport> {
    let s = setup(task);
    let names = check_names(task);
    let points: Vec<(Vec<f64>, Vec<usize>)> = names
        .iter()
        .map(|n| {
            let p = s.model.params.get(n).expect("known name");
            (p.data.clone(), p.shape.clone())
        })
        .collect();
    grad_check(
        |inputs| loss_for(&s, task, &names, inputs),
        &points,
        step,
        tolerance,
    )
}
