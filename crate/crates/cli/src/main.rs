//! `uvl`: corpus generation, pre-training, gradient checking, resuming,
//! fine-tuning, evaluation, and caption decoding for the unified
//! vision-language model.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use uvl_core::backbone::{Model, ModelConfig};
use uvl_core::checkpoint::{
    find, pack_param_set, read_checkpoint, unpack_param_set, write_checkpoint, TensorEntry,
};
use uvl_core::corpus::{
    corpus_vocabulary, generate_corpus, load_corpus, make_task_sets, save_corpus, SceneRecord,
    Split, TaskSets,
};
use uvl_core::diagnostics::check_loss_gradients;
use uvl_core::downstream::{
    build_index, caption_generate, caption_token_accuracy, finetune_caption, finetune_nlvr2,
    finetune_snli, finetune_vqa, nlvr2_accuracy, recall_both, snli_accuracy, vqa_accuracy,
    FinetuneCfg, RetrievalFinetuner,
};
use uvl_core::trainer::{TrainConfig, Trainer, ALL_TASKS};

#[derive(Parser)]
#[command(name = "uvl", about = "Unified vision-language transformer toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Retrieval,
    Vqa,
    Caption,
    Nlvr2,
    Snli,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic corpus (and optional task sets).
    Datagen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write <out>.vqa/.caption/.nlvr2/.snli task-set files.
        #[arg(long)]
        tasks: bool,
        #[arg(long, default_value_t = 0.3)]
        multi_caption_prob: f64,
    },
    /// Pre-train from scratch under a JSON config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (one line per step); default <out>.log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Finite-difference gradient check of all four pre-training losses.
    Gradcheck,
    /// Continue an interrupted pre-training run to completion.
    Resume {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt a pre-trained checkpoint to a downstream task.
    Finetune {
        #[arg(long)]
        task: TaskArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint; default <ckpt>.<task>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints a JSON metrics object.
    Eval {
        #[arg(long)]
        task: TaskArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        corpus_n: usize,
        #[arg(long, default_value_t = 1)]
        corpus_seed: u64,
        /// Restrict task examples to the test split.
        #[arg(long)]
        test_only: bool,
    },
    /// Decode a caption for one image (first record of a corpus file).
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 14)]
        max_len: usize,
    },
}

/// Fine-tuning file config: optimizer/schedule knobs plus the corpus the
/// examples are generated from.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FinetuneFileCfg {
    steps: u64,
    #[serde(default)]
    warmup: u64,
    peak_lr: f64,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default = "default_wd")]
    weight_decay: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_corpus_n")]
    corpus_n: usize,
    #[serde(default)]
    corpus_seed: u64,
    #[serde(default = "default_mcp")]
    multi_caption_prob: f64,
}

fn default_batch() -> usize {
    8
}
fn default_wd() -> f64 {
    0.01
}
fn default_corpus_n() -> usize {
    256
}
fn default_mcp() -> f64 {
    0.3
}

impl FinetuneFileCfg {
    fn core(&self) -> FinetuneCfg {
        FinetuneCfg {
            steps: self.steps,
            warmup: self.warmup,
            peak_lr: self.peak_lr,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Datagen {
            n,
            seed,
            out,
            tasks,
            multi_caption_prob,
        } => datagen(n, seed, &out, tasks, multi_caption_prob),
        Cmd::Pretrain { config, out, log } => pretrain(&config, &out, log.as_deref()),
        Cmd::Gradcheck => gradcheck(),
        Cmd::Resume { ckpt, log } => resume(&ckpt, log.as_deref()),
        Cmd::Finetune {
            task,
            ckpt,
            config,
            out,
        } => finetune(task, &ckpt, &config, out.as_deref()),
        Cmd::Eval {
            task,
            ckpt,
            corpus_n,
            corpus_seed,
            test_only,
        } => eval(task, &ckpt, corpus_n, corpus_seed, test_only),
        Cmd::Caption {
            ckpt,
            image,
            index,
            max_len,
        } => caption(&ckpt, &image, index, max_len),
    }
}

fn datagen(n: usize, seed: u64, out: &Path, tasks: bool, multi_caption_prob: f64) -> Result<()> {
    let corpus = generate_corpus(n, seed, multi_caption_prob);
    save_corpus(&corpus, out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} scenes to {}", corpus.len(), out.display());
    if tasks {
        let sets = make_task_sets(&corpus)?;
        write_jsonl(&with_ext(out, "vqa"), &sets.vqa)?;
        write_jsonl(&with_ext(out, "caption"), &sets.caption)?;
        write_jsonl(&with_ext(out, "nlvr2"), &sets.nlvr2)?;
        write_jsonl(&with_ext(out, "snli"), &sets.snli)?;
        eprintln!(
            "wrote task sets: {} vqa, {} caption, {} nlvr2, {} snli",
            sets.vqa.len(),
            sets.caption.len(),
            sets.nlvr2.len(),
            sets.snli.len()
        );
    }
    Ok(())
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(format!(".{ext}"));
    PathBuf::from(p)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn pretrain(config: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let trainer = Trainer::init(cfg)?;
    run_training(trainer, out, log)
}

fn resume(ckpt: &Path, log: Option<&Path>) -> Result<()> {
    let trainer = Trainer::load(ckpt)?;
    eprintln!(
        "resuming at step {} of {}",
        trainer.step, trainer.cfg.total_steps
    );
    run_training(trainer, ckpt, log)
}

fn run_training(mut trainer: Trainer, out: &Path, log: Option<&Path>) -> Result<()> {
    let corpus = generate_corpus(
        trainer.cfg.corpus_n,
        trainer.cfg.corpus_seed,
        trainer.cfg.multi_caption_prob,
    );
    let vocab = corpus_vocabulary();
    let log_path = log.map(PathBuf::from).unwrap_or_else(|| with_ext(out, "log"));
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    while trainer.step < trainer.cfg.total_steps {
        let m = trainer.train_step(&corpus, &vocab)?;
        writeln!(log_file, "{}", m.line())?;
        if (m.step + 1) % 100 == 0 || m.step + 1 == trainer.cfg.total_steps {
            eprintln!("step {}/{} {} loss {:.4}", m.step + 1, trainer.cfg.total_steps, m.task, m.loss);
        }
    }
    trainer.save(out)?;
    eprintln!("saved checkpoint to {}", out.display());
    Ok(())
}

fn gradcheck() -> Result<()> {
    let mut ok = true;
    for task in ALL_TASKS {
        let report = check_loss_gradients(task, 1e-5, 1e-4)?;
        println!(
            "{task}: max relative error {:.3e} (tolerance {:.0e}) -> {}",
            report.max_rel_err,
            report.tolerance,
            if report.pass { "ok" } else { "FAIL" }
        );
        ok &= report.pass;
    }
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

/// Loads a model from either a full trainer checkpoint or a fine-tuned
/// model-only checkpoint (under the given parameter prefix).
fn load_model(ckpt: &Path, prefix: &str) -> Result<Model> {
    let entries = read_checkpoint(ckpt)?;
    let cfg: ModelConfig = if let Ok(e) = find(&entries, "meta/model_cfg") {
        serde_json::from_slice(e.payload.as_bytes().context("meta/model_cfg dtype")?)?
    } else {
        let e = find(&entries, "meta/config")?;
        let tc: TrainConfig =
            serde_json::from_slice(e.payload.as_bytes().context("meta/config dtype")?)?;
        tc.model_config()
    };
    let params = unpack_param_set(&entries, prefix)?;
    Ok(Model { cfg, params })
}

fn save_model(path: &Path, models: &[(&str, &Model)]) -> Result<()> {
    let mut entries = vec![TensorEntry::bytes(
        "meta/model_cfg",
        serde_json::to_vec(&models[0].1.cfg)?,
    )];
    for (prefix, model) in models {
        pack_param_set(&mut entries, prefix, &model.params);
    }
    write_checkpoint(path, &entries)?;
    Ok(())
}

/// Fine-tuning sees only the train split; val/test stay held out for eval.
fn load_tasks(cfg: &FinetuneFileCfg) -> Result<(Vec<SceneRecord>, TaskSets)> {
    let corpus = generate_corpus(cfg.corpus_n, cfg.corpus_seed, cfg.multi_caption_prob);
    let mut sets = make_task_sets(&corpus)?;
    sets.vqa.retain(|e| e.split == Split::Train);
    sets.caption.retain(|e| e.split == Split::Train);
    sets.nlvr2.retain(|e| e.split == Split::Train);
    sets.snli.retain(|e| e.split == Split::Train);
    Ok((corpus, sets))
}

fn finetune(task: TaskArg, ckpt: &Path, config: &Path, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let file_cfg: FinetuneFileCfg = serde_json::from_str(&text)?;
    let core_cfg = file_cfg.core();
    let (corpus, sets) = load_tasks(&file_cfg)?;
    let vocab = corpus_vocabulary();
    let out = out
        .map(PathBuf::from)
        .unwrap_or_else(|| with_ext(ckpt, &format!("{task:?}").to_lowercase()));
    match task {
        TaskArg::Retrieval => {
            let model = load_model(ckpt, "student")?;
            let mut ft = RetrievalFinetuner::from_pretrained(&model, core_cfg.clone());
            for step in 0..core_cfg.steps {
                let loss = ft.step(&corpus, &vocab)?;
                if (step + 1) % 100 == 0 {
                    eprintln!("retrieval step {}/{} loss {loss:.4}", step + 1, core_cfg.steps);
                }
            }
            save_model(&out, &[("img", &ft.img_model), ("txt", &ft.txt_model)])?;
        }
        TaskArg::Vqa => {
            let mut model = load_model(ckpt, "student")?;
            finetune_vqa(&mut model, &corpus, &sets.vqa, &vocab, &core_cfg)?;
            save_model(&out, &[("student", &model)])?;
        }
        TaskArg::Caption => {
            let mut model = load_model(ckpt, "student")?;
            finetune_caption(&mut model, &corpus, &sets.caption, &vocab, &core_cfg)?;
            save_model(&out, &[("student", &model)])?;
        }
        TaskArg::Nlvr2 => {
            let mut model = load_model(ckpt, "student")?;
            finetune_nlvr2(&mut model, &corpus, &sets.nlvr2, &vocab, &core_cfg)?;
            save_model(&out, &[("student", &model)])?;
        }
        TaskArg::Snli => {
            let mut model = load_model(ckpt, "student")?;
            finetune_snli(&mut model, &corpus, &sets.snli, &vocab, &core_cfg)?;
            save_model(&out, &[("student", &model)])?;
        }
    }
    eprintln!("saved fine-tuned checkpoint to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    task: String,
    metric: String,
    value: f64,
    n_examples: usize,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    extra: serde_json::Map<String, serde_json::Value>,
}

fn eval(task: TaskArg, ckpt: &Path, corpus_n: usize, corpus_seed: u64, test_only: bool) -> Result<()> {
    let corpus = generate_corpus(corpus_n, corpus_seed, 0.0);
    let sets = make_task_sets(&corpus)?;
    let vocab = corpus_vocabulary();
    let keep = |s: Split| !test_only || s == Split::Test;
    let mut extra = serde_json::Map::new();
    let metrics = match task {
        TaskArg::Retrieval => {
            // a fine-tuned retrieval checkpoint carries split encoders
            let entries = read_checkpoint(ckpt)?;
            let split_encoders = entries.iter().any(|e| e.name == "img#kinds");
            let (img_model, txt_model) = if split_encoders {
                (load_model(ckpt, "img")?, load_model(ckpt, "txt")?)
            } else {
                let m = load_model(ckpt, "student")?;
                (m.clone(), m)
            };
            let index = build_index(&img_model, &txt_model, &corpus, &vocab)?;
            let (i2t, t2i) = recall_both(&index, 1);
            extra.insert("recall@1_image_to_text".into(), i2t.value.into());
            extra.insert("recall@1_text_to_image".into(), t2i.value.into());
            Metrics {
                task: "retrieval".into(),
                metric: "recall@1".into(),
                value: 0.5 * (i2t.value + t2i.value),
                n_examples: corpus.len(),
                extra,
            }
        }
        TaskArg::Vqa => {
            let model = load_model(ckpt, "student")?;
            let examples: Vec<_> = sets.vqa.into_iter().filter(|e| keep(e.split)).collect();
            let acc = vqa_accuracy(&model, &corpus, &examples, &vocab)?;
            Metrics {
                task: "vqa".into(),
                metric: "accuracy".into(),
                value: acc,
                n_examples: examples.len(),
                extra,
            }
        }
        TaskArg::Caption => {
            let model = load_model(ckpt, "student")?;
            let examples: Vec<_> = sets.caption.into_iter().filter(|e| keep(e.split)).collect();
            let acc = caption_token_accuracy(&model, &corpus, &examples, &vocab)?;
            Metrics {
                task: "caption".into(),
                metric: "token_accuracy".into(),
                value: acc,
                n_examples: examples.len(),
                extra,
            }
        }
        TaskArg::Nlvr2 => {
            let model = load_model(ckpt, "student")?;
            let examples: Vec<_> = sets.nlvr2.into_iter().filter(|e| keep(e.split)).collect();
            let acc = nlvr2_accuracy(&model, &corpus, &examples, &vocab)?;
            Metrics {
                task: "nlvr2".into(),
                metric: "accuracy".into(),
                value: acc,
                n_examples: examples.len(),
                extra,
            }
        }
        TaskArg::Snli => {
            let model = load_model(ckpt, "student")?;
            let examples: Vec<_> = sets.snli.into_iter().filter(|e| keep(e.split)).collect();
            let acc = snli_accuracy(&model, &corpus, &examples, &vocab)?;
            Metrics {
                task: "snli".into(),
                metric: "accuracy".into(),
                value: acc,
                n_examples: examples.len(),
                extra,
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn caption(ckpt: &Path, image: &Path, index: usize, max_len: usize) -> Result<()> {
    let model = load_model(ckpt, "student")?;
    let corpus = load_corpus(image).with_context(|| format!("reading {}", image.display()))?;
    let record = corpus
        .get(index)
        .with_context(|| format!("{} has {} records, wanted index {index}", image.display(), corpus.len()))?;
    let vocab = corpus_vocabulary();
    let generated = caption_generate(&model, &record.image, max_len)?;
    let text = vocab.detokenize(&generated.ids);
    if generated.truncated {
        eprintln!("(length budget reached before [EOS])");
    }
    println!("{text}");
    Ok(())
}
