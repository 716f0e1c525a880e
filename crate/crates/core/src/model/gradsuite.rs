//! Named central-difference checks over every differentiable primitive and
//! the end-to-end enhancer loss.

use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_graph, EnhancerModel, ModelConfig, ModelError, Result, SAMPLE_RATE};
use crate::audio::{self, AudioBuffer, Spectrogram};
use crate::nn::{
    grad_check_limited, gru_cell, multi_head_attention, transformer_layer, AttentionParams,
    GradCheckReport, Graph, GruParams, NnError, ParamSet, ParamSpec, Tensor, TransformerParams,
    Var,
};
use crate::train::LOSS_EPS;

/// Pass threshold on the max relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Finite-difference step for primitive checks.
pub const PRIMITIVE_EPS: f64 = 1e-5;
/// Finite-difference step for the end-to-end check.
pub const END_TO_END_EPS: f64 = 1e-4;
/// Name of the end-to-end component.
pub const END_TO_END: &str = "enhancer_end_to_end";

/// Component names in report order.
pub const COMPONENTS: [&str; 16] = [
    "add_sub_mul_scale",
    "add_broadcast",
    "linear",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "layer_norm",
    "attention",
    "reshape_concat_stack",
    "sum_mean",
    "embed",
    "masked_istft",
    "snr_loss",
    "gru_cell",
    "transformer_layer",
];

/// One component's outcome.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOLERANCE
    }
}

/// Suite options.
#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Probe at most this many coordinates per parameter.
    pub per_param: Option<usize>,
    /// Component whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
    /// Seconds of input audio for the end-to-end check.
    pub input_secs: f64,
}

type LossFn = Box<dyn Fn(&mut Graph, &ParamSet) -> crate::nn::Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn rand_params(seed: u64, shapes: &[(&str, &[usize])]) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (n, s) in shapes {
        ps.insert(*n, rand_tensor(&mut rng, s));
    }
    ps
}

fn spec_params(seed: u64, specs: Vec<ParamSpec>) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::from_specs(specs, &mut rng);
    // Layer-norm and bias defaults sit at symmetric points; move every coordinate off them.
    for (_, p) in ps.iter_mut() {
        p.value.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
    }
    ps
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> crate::nn::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.value(y).shape());
    let w = g.constant(w);
    let yw = g.mul(y, w)?;
    Ok(g.sum(yw))
}

fn model_err(e: ModelError) -> NnError {
    match e {
        ModelError::Nn(n) => n,
        other => NnError::Shape {
            op: "forward",
            detail: other.to_string(),
        },
    }
}

fn primitive_cases(cfg: &ModelConfig) -> Result<Vec<(&'static str, ParamSet, LossFn)>> {
    let d = cfg.d_model;
    let heads = cfg.heads;
    let mut cases: Vec<(&'static str, ParamSet, LossFn)> = Vec::new();

    cases.push((
        "add_sub_mul_scale",
        rand_params(1, &[("a", &[3, 4]), ("b", &[3, 4])]),
        Box::new(|g, ps| {
            let (a, b) = (g.param(ps, "a")?, g.param(ps, "b")?);
            let s = g.add(a, b)?;
            let t = g.sub(a, b)?;
            let m = g.mul(s, t)?;
            let y = g.scale(m, 0.7);
            weighted_sum(g, y, 2)
        }),
    ));
    cases.push((
        "add_broadcast",
        rand_params(3, &[("a", &[2, 3, 4]), ("b", &[4])]),
        Box::new(|g, ps| {
            let (a, b) = (g.param(ps, "a")?, g.param(ps, "b")?);
            let y = g.add_broadcast(a, b)?;
            weighted_sum(g, y, 4)
        }),
    ));
    cases.push((
        "linear",
        rand_params(5, &[("x", &[2, 3, d]), ("w", &[d, 5]), ("b", &[5])]),
        Box::new(|g, ps| {
            let (x, w, b) = (g.param(ps, "x")?, g.param(ps, "w")?, g.param(ps, "b")?);
            let y = g.linear(x, w, Some(b))?;
            weighted_sum(g, y, 6)
        }),
    ));
    cases.push((
        "sigmoid",
        rand_params(7, &[("x", &[3, 4])]),
        Box::new(|g, ps| {
            let x = g.param(ps, "x")?;
            let y = g.sigmoid(x);
            weighted_sum(g, y, 8)
        }),
    ));
    cases.push((
        "tanh",
        rand_params(9, &[("x", &[3, 4])]),
        Box::new(|g, ps| {
            let x = g.param(ps, "x")?;
            let y = g.tanh(x);
            weighted_sum(g, y, 10)
        }),
    ));
    cases.push((
        "relu",
        rand_params(11, &[("x", &[3, 4])]),
        Box::new(|g, ps| {
            let x = g.param(ps, "x")?;
            let y = g.relu(x);
            weighted_sum(g, y, 12)
        }),
    ));
    cases.push((
        "softmax",
        rand_params(13, &[("x", &[3, 5])]),
        Box::new(|g, ps| {
            let x = g.param(ps, "x")?;
            let a = g.softmax(x, 0)?;
            let b = g.softmax(x, 1)?;
            let y = g.add(a, b)?;
            weighted_sum(g, y, 14)
        }),
    ));
    cases.push((
        "layer_norm",
        rand_params(15, &[("x", &[3, d]), ("gamma", &[d]), ("beta", &[d])]),
        Box::new(|g, ps| {
            let (x, ga, b) = (
                g.param(ps, "x")?,
                g.param(ps, "gamma")?,
                g.param(ps, "beta")?,
            );
            let y = g.layer_norm(x, ga, b, 1e-5)?;
            weighted_sum(g, y, 16)
        }),
    ));
    cases.push((
        "attention",
        rand_params(
            17,
            &[("q", &[2, 4, d]), ("k", &[2, 4, d]), ("v", &[2, 4, d])],
        ),
        Box::new(move |g, ps| {
            let (q, k, v) = (g.param(ps, "q")?, g.param(ps, "k")?, g.param(ps, "v")?);
            let y = g.attention(q, k, v, heads)?;
            weighted_sum(g, y, 18)
        }),
    ));
    cases.push((
        "reshape_concat_stack",
        rand_params(19, &[("a", &[4, 3]), ("b", &[4, 2]), ("r", &[1, 5])]),
        Box::new(|g, ps| {
            let (a, b, r) = (g.param(ps, "a")?, g.param(ps, "b")?, g.param(ps, "r")?);
            let cat = g.concat_last(&[a, b])?;
            let sw = g.swap_axes01(cat)?;
            let rs = g.reshape(sw, &[4, 5])?;
            let r1 = g.row(rs, 1)?;
            let r3 = g.row(rs, 3)?;
            let st = g.stack_rows(&[r3, r, r1])?;
            let y = g.mul(st, st)?;
            weighted_sum(g, y, 20)
        }),
    ));
    cases.push((
        "sum_mean",
        rand_params(21, &[("x", &[3, 4])]),
        Box::new(|g, ps| {
            let x = g.param(ps, "x")?;
            let sq = g.mul(x, x)?;
            let m = g.mean(sq);
            let s = g.sum(x);
            let ms = g.mul(m, s)?;
            g.add(ms, m)
        }),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let feat = Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.0..2.0));
    cases.push((
        "embed",
        rand_params(24, &[("g", &[4, 2]), ("w", &[3, d]), ("b", &[d])]),
        Box::new(move |g, ps| {
            let (gv, w, b) = (g.param(ps, "g")?, g.param(ps, "w")?, g.param(ps, "b")?);
            let e = g.embed(feat.clone(), gv, w, b)?;
            weighted_sum(g, e, 25)
        }),
    ));

    let samples: Vec<f64> = (0..(2 * cfg.win_len))
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let spec: Spectrogram = audio::stft(
        &AudioBuffer::new(samples, SAMPLE_RATE)?,
        cfg.win_len,
        cfg.hop,
    )?;
    let mut mask_ps = ParamSet::new();
    mask_ps.insert(
        "m",
        Tensor::from_shape_fn(IxDyn(&[spec.num_frames(), spec.num_bins()]), |_| {
            rng.gen_range(0.0..1.0)
        }),
    );
    cases.push((
        "masked_istft",
        mask_ps,
        Box::new(move |g, ps| {
            let m = g.param(ps, "m")?;
            let y = g.masked_istft(m, &spec)?;
            weighted_sum(g, y, 26)
        }),
    ));

    let clean: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    cases.push((
        "snr_loss",
        rand_params(27, &[("e", &[16])]),
        Box::new(move |g, ps| {
            let e = g.param(ps, "e")?;
            g.snr_loss(&clean, e, 60.0, LOSS_EPS)
        }),
    ));

    let hidden = cfg.hidden;
    let mut gru_specs = GruParams::specs("gru", 5, hidden);
    gru_specs.push(ParamSpec::new("x", &[1, 5], crate::nn::Init::Uniform));
    gru_specs.push(ParamSpec::new("h", &[1, hidden], crate::nn::Init::Uniform));
    cases.push((
        "gru_cell",
        spec_params(28, gru_specs),
        Box::new(|g, ps| {
            let p = GruParams::bind(g, ps, "gru")?;
            let (x, h) = (g.param(ps, "x")?, g.param(ps, "h")?);
            let h1 = gru_cell(g, x, h, &p)?;
            weighted_sum(g, h1, 29)
        }),
    ));

    let d_ff = cfg.d_ff;
    let mut tf_specs = TransformerParams::specs("tf", d, d_ff);
    tf_specs.extend(AttentionParams::specs("mha", d));
    tf_specs.push(ParamSpec::new("x", &[2, 3, d], crate::nn::Init::Uniform));
    cases.push((
        "transformer_layer",
        spec_params(30, tf_specs),
        Box::new(move |g, ps| {
            let p = TransformerParams::bind(g, ps, "tf")?;
            let a = AttentionParams::bind(g, ps, "mha")?;
            let x = g.param(ps, "x")?;
            let y = transformer_layer(g, x, &p, heads, None)?;
            let z = multi_head_attention(g, y, &a, heads)?;
            weighted_sum(g, z, 31)
        }),
    ));
    Ok(cases)
}

fn check(
    name: &str,
    ps: &ParamSet,
    f: LossFn,
    eps: f64,
    opts: &SuiteOptions,
) -> Result<SuiteEntry> {
    let corrupt = opts.corrupt.as_deref() == Some(name);
    let report = grad_check_limited(ps, f, eps, opts.per_param, |_, t| {
        if corrupt {
            t.mapv_inplace(|v| 1.1 * v + 1e-3);
        }
    })?;
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
    })
}

/// Runs every primitive check at `cfg`'s widths, then the end-to-end loss of
/// a seeded model built from `cfg` on seeded noise.
pub fn run_grad_suite(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (name, ps, f) in primitive_cases(cfg)? {
        out.push(check(name, &ps, f, PRIMITIVE_EPS, opts)?);
    }

    let model = EnhancerModel::new(*cfg, 17)?;
    let len = ((opts.input_secs * SAMPLE_RATE as f64).round() as usize).max(cfg.win_len);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let clean: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let noisy: Vec<f64> = clean
        .iter()
        .map(|c| c + 0.25 * rng.gen_range(-1.0..1.0))
        .collect();
    let spec = audio::stft(&AudioBuffer::new(noisy, SAMPLE_RATE)?, cfg.win_len, cfg.hop)?;
    let cfg = *cfg;
    let f: LossFn = Box::new(move |g, ps| {
        let vars = forward_graph(g, ps, &cfg, &spec).map_err(model_err)?;
        g.snr_loss(&clean, vars.estimate, 60.0, LOSS_EPS)
    });
    out.push(check(END_TO_END, &model.params, f, END_TO_END_EPS, opts)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_opts() -> SuiteOptions {
        SuiteOptions {
            per_param: Some(3),
            corrupt: None,
            input_secs: 0.02,
        }
    }

    #[test]
    fn suite_lists_every_component_and_passes() {
        let entries = run_grad_suite(&ModelConfig::tiny(), &fast_opts()).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        let mut expected: Vec<&str> = COMPONENTS.to_vec();
        expected.push(END_TO_END);
        assert_eq!(names, expected);
        for e in &entries {
            assert!(e.passed(), "{}: {:?}", e.name, e.report);
            assert!(e.report.coordinates > 0);
        }
    }

    #[test]
    fn corrupted_component_fails() {
        let mut opts = fast_opts();
        opts.corrupt = Some("layer_norm".into());
        let entries = run_grad_suite(&ModelConfig::tiny(), &opts).unwrap();
        for e in &entries {
            assert_eq!(e.passed(), e.name != "layer_norm", "{}", e.name);
        }
    }
}
