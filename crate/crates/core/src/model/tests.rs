use super::*;
use crate::nn::{grad_check, Tensor};
use ndarray::{s, Axis, IxDyn};
use rand::Rng;

fn noise_buffer(seed: u64, len: usize) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
    AudioBuffer::new(samples, SAMPLE_RATE).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        d_model: 4,
        heads: 2,
        repeats: 1,
        d_ff: 4,
        ..ModelConfig::default()
    }
}

fn set_mask_bias(model: &mut EnhancerModel, bias: f64) {
    let d = model.config.d_model;
    model.params.insert_zeros("mask.W", &[d, 1]);
    model.params.value_mut("mask.b").unwrap().fill(bias);
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn config_text_round_trip_and_validation() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.num_bins(), 257);
    assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    let bad = ModelConfig { heads: 3, ..cfg };
    assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    let zero = ModelConfig { repeats: 0, ..cfg };
    assert!(zero.validate().is_err());
    assert!(ModelConfig::from_text("win_len=512\n").is_err());
    assert!(ModelConfig::from_text(&format!("{}extra=1\n", cfg.to_text())).is_err());
}

#[test]
fn initialization_is_seeded_and_complete() {
    let cfg = ModelConfig::default();
    let a = EnhancerModel::new(cfg, 7).unwrap();
    let b = EnhancerModel::new(cfg, 7).unwrap();
    let c = EnhancerModel::new(cfg, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.params.len(), cfg.param_specs().len());
    assert!(a.params.value("embed.b").unwrap().iter().all(|&v| v == 0.0));
    assert!(a
        .params
        .value("block1.inter.ln2.gamma")
        .unwrap()
        .iter()
        .all(|&v| v == 1.0));
    let k = 1.0 / (257f64).sqrt();
    assert!(a
        .params
        .value("bgru.fwd.W_z")
        .unwrap()
        .iter()
        .all(|v| v.abs() <= k));
    EnhancerModel::from_params(cfg, a.params.clone()).unwrap();
    let wrong = ModelConfig { hidden: 32, ..cfg };
    match EnhancerModel::from_params(wrong, a.params.clone()) {
        Err(ModelError::ParamShape { name, .. }) => assert!(name.starts_with("bgru.")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn embed_zero_inputs_and_shape() {
    let cfg = ModelConfig::tiny();
    let mut ps = EnhancerModel::new(cfg, 1).unwrap().params;
    ps.insert_zeros("embed.b", &[cfg.d_model]);
    let mut g = Graph::new();
    let frames = g.constant(Tensor::zeros(IxDyn(&[6, 2 * cfg.hidden])));
    let e = embed(&mut g, &ps, &Array2::zeros((6, 9)), frames).unwrap();
    assert_eq!(g.value(e).shape(), &[6, 9, cfg.d_model]);
    assert!(g.value(e).iter().all(|&v| v == 0.0));
}

#[test]
fn embed_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    ps.insert_uniform("embed.W", &[5, 3], &mut rng);
    ps.insert_uniform("embed.b", &[3], &mut rng);
    ps.insert_uniform("frames", &[4, 4], &mut rng);
    let mag = Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.0..3.0));
    let weights = Tensor::from_shape_fn(IxDyn(&[4, 5, 3]), |_| rng.gen_range(-1.0..1.0));
    let r = grad_check(
        &ps,
        |g, ps| {
            let frames = g.param(ps, "frames")?;
            let e = embed(g, ps, &mag, frames).map_err(|e| match e {
                ModelError::Nn(n) => n,
                other => panic!("{other}"),
            })?;
            let w = g.constant(weights.clone());
            let ew = g.mul(e, w)?;
            Ok(g.sum(ew))
        },
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

fn zero_projection(ps: &mut ParamSet, prefix: &str) {
    for n in ["attn.w_o", "ffn.w2", "ffn.b2"] {
        let name = format!("{prefix}.{n}");
        let shape = ps.value(&name).unwrap().shape().to_vec();
        ps.insert_zeros(name, &shape);
    }
}

#[test]
fn block_with_zero_projections_is_identity() {
    let cfg = small_config();
    let mut ps = EnhancerModel::new(cfg, 3).unwrap().params;
    zero_projection(&mut ps, "block0.intra");
    zero_projection(&mut ps, "block0.inter");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e0 = Tensor::from_shape_fn(IxDyn(&[5, 7, 4]), |_| rng.gen_range(-2.0..2.0));
    let mut g = Graph::new();
    let e = g.constant(e0.clone());
    let out = blockformer_block(&mut g, &ps, &cfg, "block0", e).unwrap();
    assert_eq!(g.value(out), &e0);
}

#[test]
fn intra_step_treats_frames_independently() {
    let cfg = small_config();
    let mut ps = EnhancerModel::new(cfg, 5).unwrap().params;
    zero_projection(&mut ps, "block0.inter");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let e0 = Tensor::from_shape_fn(IxDyn(&[2, 6, 4]), |_| rng.gen_range(-1.0..1.0));
    let mut swapped = e0.clone();
    swapped.invert_axis(Axis(0));
    let mut g = Graph::new();
    let a = g.constant(e0);
    let b = g.constant(swapped);
    let ya = blockformer_block(&mut g, &ps, &cfg, "block0", a).unwrap();
    let yb = blockformer_block(&mut g, &ps, &cfg, "block0", b).unwrap();
    let (ya, yb) = (g.value(ya), g.value(yb));
    assert_eq!(ya.shape(), &[2, 6, 4]);
    for t in 0..2 {
        let d = (&ya.slice(s![t, .., ..]) - &yb.slice(s![1 - t, .., ..]))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1e-12);
    }
}

#[test]
fn mask_head_range() {
    let cfg = small_config();
    let mut model = EnhancerModel::new(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e0 = Tensor::from_shape_fn(IxDyn(&[3, 5, 4]), |_| rng.gen_range(-3.0..3.0));
    let mut g = Graph::new();
    let e = g.constant(e0.clone());
    let m = mask_head(&mut g, &model.params, e).unwrap();
    assert_eq!(g.value(m).shape(), &[3, 5]);
    assert!(g.value(m).iter().all(|&v| v > 0.0 && v < 1.0));

    set_mask_bias(&mut model, 0.0);
    let mut g = Graph::new();
    let e = g.constant(e0.clone());
    let m = mask_head(&mut g, &model.params, e).unwrap();
    assert!(g.value(m).iter().all(|&v| v == 0.5));

    model.params.value_mut("mask.b").unwrap().fill(20.0);
    let mut g = Graph::new();
    let e = g.constant(e0);
    let m = mask_head(&mut g, &model.params, e).unwrap();
    assert!(g.value(m).iter().all(|&v| v > 0.9999));
}

#[test]
fn identity_and_zero_masks() {
    let mut model = EnhancerModel::new(small_config(), 9).unwrap();
    let noisy = noise_buffer(10, 8000);
    set_mask_bias(&mut model, 20.0);
    let (est, mask) = forward(&model, &noisy).unwrap();
    assert!(mask.values.iter().all(|&v| v > 0.9999));
    assert!(rel_l2(&est.samples, &noisy.samples) < 1e-6);

    set_mask_bias(&mut model, -1000.0);
    let (est, _) = forward(&model, &noisy).unwrap();
    assert!(est.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn output_length_matches_input() {
    let model = EnhancerModel::new(small_config(), 11).unwrap();
    for len in [16_000, 27_200, 48_000] {
        let noisy = noise_buffer(len as u64, len);
        let (est, mask) = forward(&model, &noisy).unwrap();
        assert_eq!(est.len(), len);
        assert_eq!(est.sample_rate, SAMPLE_RATE);
        assert_eq!(mask.values.dim(), (len / 128 + 1, 257));
    }
}

#[test]
fn masked_energy_is_below_noisy_energy() {
    let model = EnhancerModel::new(small_config(), 12).unwrap();
    let noisy = noise_buffer(13, 4000);
    let (_, mask) = forward(&model, &noisy).unwrap();
    let mag = audio::mag_phase(&audio::stft(&noisy, 512, 128).unwrap()).magnitude;
    let masked: f64 = (&mag * &mask.values).iter().map(|v| v * v).sum();
    let full: f64 = mag.iter().map(|v| v * v).sum();
    assert!(masked < full);
}

#[test]
fn forward_is_deterministic() {
    let model = EnhancerModel::new(small_config(), 14).unwrap();
    let noisy = noise_buffer(15, 6000);
    let (a, ma) = forward(&model, &noisy).unwrap();
    let (b, mb) = forward(&model, &noisy).unwrap();
    assert!(a
        .samples
        .iter()
        .zip(&b.samples)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(ma, mb);
}

#[test]
fn rejects_wrong_sample_rate() {
    let model = EnhancerModel::new(small_config(), 16).unwrap();
    let buf = AudioBuffer::new(vec![0.1; 800], 8000).unwrap();
    assert!(matches!(
        forward(&model, &buf),
        Err(ModelError::SampleRate {
            expected: 16_000,
            got: 8000
        })
    ));
}

#[test]
fn end_to_end_gradients_on_tiny_config() {
    let cfg = ModelConfig::tiny();
    let model = EnhancerModel::new(cfg, 17).unwrap();
    let clean = noise_buffer(18, 1600);
    let noise = noise_buffer(19, 1600);
    let noisy: Vec<f64> = clean
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(c, n)| c + 0.5 * n)
        .collect();
    let noisy = AudioBuffer::new(noisy, SAMPLE_RATE).unwrap();
    let spec = audio::stft(&noisy, cfg.win_len, cfg.hop).unwrap();
    let r = grad_check(
        &model.params,
        |g, ps| {
            let vars = forward_graph(g, ps, &cfg, &spec).map_err(|e| match e {
                ModelError::Nn(n) => n,
                other => panic!("{other}"),
            })?;
            g.snr_loss(&clean.samples, vars.estimate, 60.0, 1e-8)
        },
        1e-4,
    )
    .unwrap();
    eprintln!("{r:?}");
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
