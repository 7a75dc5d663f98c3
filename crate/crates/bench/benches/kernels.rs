use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

use moscard_core::deconfound::{stage1_step, BatchLabels, Stage1Config, Stage1Model, Stage1Optim};
use moscard_core::encoder::{Encoder, EncoderConfig};
use moscard_core::evalkit::{auc, bootstrap_ci, Metric};
use moscard_core::fusion::CoAttention;
use moscard_core::rng::stream_rng;

fn images(n: usize, side: usize) -> Vec<Vec<f32>> {
    let mut rng = stream_rng(1, 0, 0);
    (0..n).map(|_| (0..side * side).map(|_| rng.gen::<f32>()).collect()).collect()
}

fn encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let enc = Encoder::<f32>::init(&cfg).unwrap();
    let imgs = images(32, cfg.image_side);
    let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
    let mut g = c.benchmark_group("encoder");
    g.sample_size(10);
    g.bench_function("encode_batch_32", |b| b.iter(|| enc.encode_batch(black_box(&refs)).unwrap()));
    g.finish();
}

fn stage1(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let s1 = Stage1Config::default();
    let imgs = images(32, cfg.image_side);
    let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
    let labels = BatchLabels {
        y: (0..32).map(|i| [0, (i % 2) as u8, (i % 2) as u8, 1]).collect(),
        sex: (0..32).map(|i| i % 2).collect(),
        age: (0..32).map(|i| i % 4).collect(),
    };
    let model = Stage1Model::<f32>::init(&cfg).unwrap();
    let mut g = c.benchmark_group("stage1");
    g.sample_size(10);
    g.bench_function("dual_graph_step_32", |b| {
        b.iter_batched(
            || (model.clone(), Stage1Optim::new(&s1)),
            |(mut m, mut o)| stage1_step(&mut m, &mut o, &refs, &labels, s1.alpha, s1.tap_mode).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = stream_rng(2, 0, 0);
    let scores: Vec<f64> = (0..2000).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = scores.iter().map(|&s| u8::from(rng.gen::<f64>() < s)).collect();
    c.bench_function("auc_2000", |b| b.iter(|| auc(black_box(&scores), black_box(&labels)).unwrap()));
    let mut g = c.benchmark_group("bootstrap");
    g.sample_size(10);
    g.bench_function("auc_ci_b1000_n2000", |b| {
        b.iter(|| bootstrap_ci(&scores, &labels, Metric::Auc, 1000, 3).unwrap())
    });
    g.finish();
}

fn coattention(c: &mut Criterion) {
    let mut rng = stream_rng(3, 0, 0);
    let ca = CoAttention::<f32>::new(64, 64, &mut rng);
    let ecg: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cxr: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("coattention_64x64", |b| b.iter(|| ca.forward(black_box(&ecg), black_box(&cxr)).unwrap()));
}

criterion_group!(benches, encoder, stage1, metrics, coattention);
criterion_main!(benches);
