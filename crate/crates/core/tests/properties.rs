use dpse_core::audio::{self, AudioBuffer};
use dpse_core::metrics::{snr_metric, stoi};
use dpse_core::mixgen::{measured_snr, mix};
use dpse_core::model::{forward, EnhancerModel, ModelConfig, SAMPLE_RATE};
use dpse_core::nn::{grad_check, Graph, ParamSet, Tensor, Var};
use dpse_core::signals::{noise, speech_like, NoiseKind};
use dpse_core::train::snr_loss_value;
use ndarray::{Axis, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-scale..scale))
}

fn buffer(seed: u64, len: usize) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioBuffer::new(
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        SAMPLE_RATE,
    )
    .unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        win_len: 64,
        hop: 16,
        hidden: 4,
        d_model: 4,
        heads: 2,
        repeats: 1,
        d_ff: 4,
    }
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_slices_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(random(seed, &[rows, cols], scale));
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).axis_iter(Axis(0)) {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_centres_each_slice(seed in any::<u64>(), rows in 1usize..6, cols in 2usize..9) {
        let mut g = Graph::new();
        let x = g.constant(random(seed, &[rows, cols], 5.0));
        let gamma = g.constant(Tensor::from_elem(IxDyn(&[cols]), 1.0 + (seed % 7) as f64));
        let beta = g.constant(Tensor::zeros(IxDyn(&[cols])));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for row in g.value(y).axis_iter(Axis(0)) {
            prop_assert!(row.mean().unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn primitive_gradients_on_random_shapes(seed in any::<u64>(), rows in 1usize..4, inner in 1usize..5, out in 3usize..6) {
        let mut ps = ParamSet::new();
        ps.insert("x", random(seed, &[rows, inner], 1.0));
        ps.insert("w", random(seed ^ 2, &[inner, out], 1.0));
        ps.insert("b", random(seed ^ 3, &[out], 1.0));
        ps.insert("h", random(seed ^ 4, &[rows, out], 2.0));
        ps.insert("gamma", random(seed ^ 5, &[out], 1.0));
        ps.insert("beta", random(seed ^ 6, &[out], 1.0));
        let r_in = random(seed ^ 7, &[rows, out], 1.0);
        #[allow(clippy::type_complexity)]
        let ops: [(&str, fn(&mut Graph, &ParamSet) -> dpse_core::nn::Result<Var>); 6] = [
            ("linear", |g, ps| {
                let (x, w, b) = (g.param(ps, "x")?, g.param(ps, "w")?, g.param(ps, "b")?);
                g.linear(x, w, Some(b))
            }),
            ("tanh", |g, ps| { let h = g.param(ps, "h")?; Ok(g.tanh(h)) }),
            ("sigmoid", |g, ps| { let h = g.param(ps, "h")?; Ok(g.sigmoid(h)) }),
            ("softmax", |g, ps| { let h = g.param(ps, "h")?; g.softmax(h, 1) }),
            ("layer_norm", |g, ps| {
                let (h, gamma, beta) = (g.param(ps, "h")?, g.param(ps, "gamma")?, g.param(ps, "beta")?);
                g.layer_norm(h, gamma, beta, 1e-5)
            }),
            ("mul", |g, ps| { let h = g.param(ps, "h")?; g.mul(h, h) }),
        ];
        for (name, op) in ops {
            let mut used = ParamSet::new();
            let probe = {
                let mut g = Graph::new();
                op(&mut g, &ps).unwrap();
                g.bindings().iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()
            };
            for n in &probe {
                used.insert(n.clone(), ps.value(n).unwrap().clone());
            }
            let report = grad_check(&used, |g, ps| {
                let y = op(g, ps)?;
                let r = g.constant(r_in.clone());
                let y = g.mul(y, r)?;
                Ok(g.sum(y))
            }, 1e-5).unwrap();
            prop_assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
        }
    }

    #[test]
    fn attention_gradients_on_random_shapes(seed in any::<u64>(), n in 1usize..5, heads in 1usize..3) {
        let d = 2 * heads;
        let mut ps = ParamSet::new();
        for (i, name) in ["q", "k", "v"].into_iter().enumerate() {
            ps.insert(name, random(seed ^ i as u64, &[2, n, d], 1.0));
        }
        let report = grad_check(&ps, |g, ps| {
            let q = g.param(ps, "q")?;
            let k = g.param(ps, "k")?;
            let v = g.param(ps, "v")?;
            let a = g.attention(q, k, v, heads)?;
            let a = g.mul(a, a)?;
            Ok(g.mean(a))
        }, 1e-5).unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn mixer_hits_every_target(seed in any::<u64>(), target in -10.0f64..10.0, offset in 0usize..4000) {
        let clean = speech_like(seed, 0.25, SAMPLE_RATE);
        let n = noise(NoiseKind::Babble, seed ^ 9, 0.3, SAMPLE_RATE);
        let m = mix(&clean, &n, target, offset).unwrap();
        let tol = if m.rescale_gain == 1.0 { 1e-6 } else { 1e-2 };
        prop_assert!((measured_snr(&m.clean, &m.noise).unwrap() - target).abs() < tol);
        for ((y, c), v) in m.mixture.samples.iter().zip(&m.clean.samples).zip(&m.noise.samples) {
            prop_assert_eq!(*y, c + v);
        }
    }

    #[test]
    fn loss_agrees_with_negated_metric(seed in any::<u64>(), target in -10.0f64..10.0) {
        let clean = speech_like(seed, 0.2, SAMPLE_RATE);
        let n = noise(NoiseKind::White, seed ^ 4, 0.2, SAMPLE_RATE);
        let m = mix(&clean, &n, target, 0).unwrap();
        let loss = snr_loss_value(&m.clean.samples, &m.mixture.samples, 60.0).unwrap();
        let metric = snr_metric(&m.clean.samples, &m.mixture.samples).unwrap();
        prop_assert!((loss + metric).abs() < 1e-9, "{loss} vs {metric}");
    }

    #[test]
    fn reconstruction_is_exact_for_random_buffers(seed in any::<u64>(), len in 1usize..5000) {
        let x = buffer(seed, len);
        let y = audio::istft(&audio::stft(&x, 512, 128).unwrap()).unwrap();
        prop_assert_eq!(y.len(), len);
        if x.energy() > 0.0 {
            prop_assert!(rel_l2(&y.samples, &x.samples) < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn saturated_mask_is_the_identity(seed in any::<u64>(), len in 64usize..3000) {
        let mut model = EnhancerModel::new(small(), seed).unwrap();
        model.params.insert_zeros("mask.W", &[4, 1]);
        model.params.value_mut("mask.b").unwrap().fill(40.0);
        let x = buffer(seed ^ 7, len);
        let (y, _) = forward(&model, &x).unwrap();
        prop_assert!(rel_l2(&y.samples, &x.samples) < 1e-6);
    }

    #[test]
    fn masked_magnitude_stays_below_noisy(seed in any::<u64>(), len in 64usize..3000) {
        let model = EnhancerModel::new(small(), seed).unwrap();
        let x = buffer(seed ^ 8, len);
        let (_, mask) = forward(&model, &x).unwrap();
        let mag = audio::mag_phase(&audio::stft(&x, 64, 16).unwrap()).magnitude;
        prop_assert!(mask.values.iter().all(|&m| m > 0.0 && m < 1.0));
        let masked: f64 = mask.values.iter().zip(mag.iter()).map(|(m, v)| (m * v).powi(2)).sum();
        let full: f64 = mag.iter().map(|v| v * v).sum();
        prop_assert!(masked < full);
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>(), len in 64usize..3000) {
        let model = EnhancerModel::new(small(), seed).unwrap();
        let x = buffer(seed ^ 9, len);
        let (a, ma) = forward(&model, &x).unwrap();
        let (b, mb) = forward(&model.clone(), &x).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ma, mb);
    }

    #[test]
    fn stoi_ignores_estimate_gain(seed in any::<u64>(), gain in 0.01f64..100.0) {
        let clean = speech_like(seed, 1.0, SAMPLE_RATE);
        let n = noise(NoiseKind::Wind, seed ^ 3, 1.0, SAMPLE_RATE);
        let m = mix(&clean, &n, 0.0, 0).unwrap();
        let base = stoi(&m.clean, &m.mixture).unwrap();
        let scaled = stoi(&m.clean, &m.mixture.scaled(gain)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
        prop_assert!((stoi(&m.clean, &m.clean).unwrap() - 1.0).abs() < 1e-6);
    }
}
