use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gcdlab_core::data::{balanced_batches, generate, make_split, materialize};
use gcdlab_core::eval::{hungarian, kmeans};
use gcdlab_core::experiment::{adapted_model, ExperimentConfig};
use gcdlab_core::losses::{total_loss, Alignment, LossContext};
use gcdlab_core::model::Model;
use gcdlab_core::rng::{stream_rng, streams};
use gcdlab_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Shapes of the qkv projection over one default batch: 64 samples x 9 tokens.
    let x = random(&mut rng, 576, 32);
    let w = random(&mut rng, 32, 96);
    c.bench_function("matmul 576x32x96", |b| {
        b.iter(|| black_box(&x).matmul(black_box(&w)).unwrap())
    });
    c.bench_function("tape matmul + backward 576x32x96", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.leaf(x.clone(), true), tape.leaf(w.clone(), true));
            let y = tape.matmul(xv, wv).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(wv).is_some())
        })
    });
}

fn assignment(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [10, 100] {
        let score: Vec<f64> = (0..k * k).map(|_| rng.gen_range(0.0..50.0)).collect();
        c.bench_function(&format!("hungarian {k}x{k}"), |b| {
            b.iter(|| hungarian(black_box(&score), k, k).unwrap())
        });
    }
}

fn clustering(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats = random(&mut rng, 750, 32);
    c.bench_function("kmeans 750x32 k=10", |b| {
        b.iter(|| kmeans(black_box(&feats), 10, 0).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let data = generate(&cfg.data).unwrap();
    let split = make_split(&data, cfg.data.num_seen, cfg.labeled_fraction, 0).unwrap();
    let mut backbone = Model::new_backbone(&cfg.backbone, 0).unwrap();
    backbone.freeze_backbone();
    let model = adapted_model(&backbone, &cfg, 0).unwrap();
    let plans = balanced_batches(
        &split,
        cfg.train.batch_size,
        &mut stream_rng(0, streams::SAMPLER),
    )
    .unwrap();
    let batch = materialize(
        &data,
        &plans[0],
        &cfg.train.augment,
        &mut stream_rng(0, streams::AUGMENT),
    )
    .unwrap();
    let align = Alignment::Off;
    c.bench_function("train step forward+backward B=32", |b| {
        b.iter_batched(
            || stream_rng(0, streams::DROPOUT),
            |mut drop| {
                let mut tape = Tape::new();
                let bind = model.params.bind(&mut tape);
                let f = model
                    .forward(&mut tape, &bind, &batch.tokens, Some(&mut drop))
                    .unwrap();
                let ctx = LossContext {
                    weights: &cfg.train.weights,
                    tau_t: 0.07,
                    align: &align,
                    teacher: None,
                };
                let obj = total_loss(&mut tape, &model, &bind, f.h, &batch.labels, ctx).unwrap();
                tape.backward(obj.total).unwrap();
                black_box(bind.grads(&tape, &model.params).len())
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, matmul, assignment, clustering, train_step);
criterion_main!(benches);
