use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use uvl_core::backbone::{MaskMode, Model, ModelConfig};
use uvl_core::corpus::{corpus_vocabulary, generate_corpus};
use uvl_core::ot::ipot;
use uvl_core::trainer::{TrainConfig, Trainer};

fn bench_encode_pair(c: &mut Criterion) {
    let model = Model::init(ModelConfig::toy(512), 42);
    let corpus = generate_corpus(1, 0, 0.0);
    let vocab = corpus_vocabulary();
    let ids = vocab.tokenize(&corpus[0].captions[0]).ids;
    c.bench_function("encode_pair_fusion", |b| {
        b.iter(|| {
            let lv = model.params.leaves(false);
            model
                .encode_pair(
                    &lv,
                    black_box(&corpus[0].image),
                    black_box(&ids),
                    MaskMode::Bidirectional,
                    None,
                )
                .unwrap()
        })
    });
}

fn bench_ipot(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (p, q) = (16, 8);
    let cost: Vec<f64> = (0..p * q).map(|_| rng.random::<f64>() * 2.0).collect();
    c.bench_function("ipot_16x8_outer50", |b| {
        b.iter(|| ipot(black_box(&cost), p, q, 0.5, 50, 1))
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = TrainConfig::toy(3);
    let corpus = generate_corpus(cfg.corpus_n, cfg.corpus_seed, cfg.multi_caption_prob);
    let vocab = corpus_vocabulary();
    c.bench_function("train_step_mixed_tasks", |b| {
        let mut trainer = Trainer::init(cfg.clone()).unwrap();
        b.iter(|| trainer.train_step(&corpus, &vocab).unwrap())
    });
}

criterion_group!(benches, bench_encode_pair, bench_ipot, bench_train_step);
criterion_main!(benches);
