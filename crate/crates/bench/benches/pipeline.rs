use std::hint::black_box;

use candle_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use headgaze::dataset::EyeStrategy;
use headgaze::geometry;
use headgaze::nets::{HgdConfig, HgdModel, Stem};
use headgaze::preprocess::{self, HogConfig};
use headgaze::synth::{self, SceneRanges};
use headgaze::{AnglePair, Device, Side};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pair = || AnglePair::new(rng.random_range(-60.0..60.0), rng.random_range(-40.0..40.0));
    let preds: Vec<AnglePair> = (0..10_000).map(|_| pair()).collect();
    let refs: Vec<AnglePair> = (0..10_000).map(|_| pair()).collect();
    c.bench_function("mean_vem_10k", |b| b.iter(|| geometry::mean_vem(black_box(&preds), black_box(&refs)).unwrap()));
    c.bench_function("aem_10k", |b| b.iter(|| geometry::aem(black_box(&preds), black_box(&refs)).unwrap()));
}

fn features(c: &mut Criterion) {
    let img = Array2::from_shape_fn((64, 96), |(y, x)| ((x * 7 + y * 13) % 255) as f64);
    let cfg = HogConfig::default();
    c.bench_function("mhog_64x96", |b| b.iter(|| preprocess::mhog(black_box(&img), &cfg).unwrap()));
}

fn render(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = synth::sample_scene(&mut rng, &SceneRanges::default()).unwrap();
    c.bench_function("render_eye_64x96", |b| b.iter(|| synth::render_eye(black_box(&scene), Side::Left, (64, 96)).unwrap()));
}

fn forward(c: &mut Criterion) {
    let cfg = HgdConfig {
        depth: 18,
        stem: Stem::Compact,
        face_size: (64, 64),
        eye_size: (32, 48),
        strategy: EyeStrategy::Bec,
        ..HgdConfig::default()
    };
    let model = HgdModel::new(&cfg, 1, &Device::Cpu).unwrap();
    let (fc, fh, fw) = cfg.face_input();
    let (ec, eh, ew) = cfg.eye_input();
    let face = Tensor::zeros((16, fc, fh, fw), candle_core::DType::F32, &Device::Cpu).unwrap();
    let eye = Tensor::zeros((16, ec, eh, ew), candle_core::DType::F32, &Device::Cpu).unwrap();
    c.bench_function("hgd_forward_batch16", |b| b.iter(|| model.forward(Some(&face), &eye, None, false).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = metrics, features, render, forward
}
criterion_main!(benches);
