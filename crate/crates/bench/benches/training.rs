use afa_core::corpus::{gen_planted, Batch, PlantedSpec};
use afa_core::masking::select;
use afa_core::nn::Mode;
use afa_core::trainer::Trainer;
use afa_core::TrainConfig;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn planted_batch() -> (Batch, usize) {
    let spec = PlantedSpec {
        num_examples: 32,
        seq_len: 12,
        num_classes: 2,
        signal_per_class: 1,
        distractor_vocab_size: PlantedSpec::distractors_for_total(200, 2, 1).unwrap(),
        seed: 0,
    };
    let data = gen_planted(&spec).unwrap();
    (Batch::from_examples(&data.examples).unwrap(), spec.vocab_size())
}

fn forward(c: &mut Criterion) {
    let (batch, vocab) = planted_batch();
    let trainer = Trainer::new(TrainConfig::planted(), vocab).unwrap();
    c.bench_function("target_forward_b32_n12", |b| {
        b.iter(|| trainer.target.forward(&batch, Mode::Infer).unwrap())
    });
    c.bench_function("disc_predict_b32_n12", |b| {
        b.iter(|| trainer.disc.predict(&batch).unwrap())
    });
}

fn steps(c: &mut Criterion) {
    let (batch, vocab) = planted_batch();
    let trainer = Trainer::new(TrainConfig::planted(), vocab).unwrap();
    c.bench_function("train_step_b32_m4", |b| {
        b.iter_batched(
            || trainer.cfg.clone(),
            |cfg| {
                let mut t = Trainer::from_models(cfg, trainer.target.clone(), trainer.disc.clone());
                t.train_step(&batch).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("supervised_step_b32", |b| {
        b.iter_batched(
            || trainer.cfg.clone(),
            |cfg| {
                let mut t = Trainer::from_models(cfg, trainer.target.clone(), trainer.disc.clone());
                t.supervised_step(&batch).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn selection(c: &mut Criterion) {
    let a: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 2016.0).collect();
    let mut branch = ChaCha8Rng::seed_from_u64(1);
    let mut sampling = ChaCha8Rng::seed_from_u64(2);
    c.bench_function("select_n64_k4", |b| {
        b.iter(|| select(&a, 4, 0.1, &mut branch, &mut sampling).unwrap())
    });
}

criterion_group!(benches, forward, steps, selection);
criterion_main!(benches);
