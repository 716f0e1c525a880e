use criterion::{black_box, criterion_group, criterion_main, Criterion};

use dpse_bench::{narrow_config, noisy_clip, pair};
use dpse_core::audio::{istft, stft};
use dpse_core::metrics::stoi;
use dpse_core::model::{forward, EnhancerModel, ModelConfig};
use dpse_core::nn::{AdamConfig, AdamState};
use dpse_core::train::{train_step, DEFAULT_LOSS_CAP_DB};

fn dsp(c: &mut Criterion) {
    let (_, noisy) = noisy_clip(1.0);
    c.bench_function("stft_istft_1s", |b| {
        b.iter(|| istft(&stft(black_box(&noisy), 512, 128).unwrap()).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let (clean, noisy) = noisy_clip(2.0);
    c.bench_function("stoi_2s", |b| {
        b.iter(|| stoi(black_box(&clean), black_box(&noisy)).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    let (_, noisy) = noisy_clip(1.0);
    let full = EnhancerModel::new(ModelConfig::default(), 0).unwrap();
    group.bench_function("forward_default_1s", |b| {
        b.iter(|| forward(&full, black_box(&noisy)).unwrap())
    });

    let batch = [pair(0.5)];
    let adam_cfg = AdamConfig::default();
    let mut narrow = EnhancerModel::new(narrow_config(), 0).unwrap();
    let mut adam = AdamState::new();
    group.bench_function("train_step_narrow_0.5s", |b| {
        b.iter(|| {
            train_step(
                &mut narrow,
                &mut adam,
                &batch,
                &adam_cfg,
                DEFAULT_LOSS_CAP_DB,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, dsp, metrics, model);
criterion_main!(benches);
