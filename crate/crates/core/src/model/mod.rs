//! The masking enhancer: BGRU over log-magnitude frames, a per-bin embedding,
//! `R` dual-path blocks (intra-frame attention across frequency, then
//! inter-frame attention across time) and a sigmoid mask head.

use std::fmt::Write as _;

use ndarray::{Array2, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

mod gradsuite;

pub use gradsuite::{
    run_grad_suite, SuiteEntry, SuiteOptions, COMPONENTS, END_TO_END, END_TO_END_EPS,
    GRAD_TOLERANCE, PRIMITIVE_EPS,
};

use crate::audio::{self, AudioBuffer, Spectrogram};
use crate::nn::{
    bgru, positional_encoding, transformer_layer, Graph, GruParams, Init, NnError, ParamSet,
    ParamSpec, TransformerParams, Var,
};

/// Sample rate the model operates at.
pub const SAMPLE_RATE: u32 = 16_000;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {expected} Hz input, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing")]
    MissingParam(String),
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub win_len: usize,
    pub hop: usize,
    /// BGRU hidden size per direction.
    pub hidden: usize,
    /// Per-bin embedding width.
    pub d_model: usize,
    pub heads: usize,
    /// Number of dual-path blocks.
    pub repeats: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            win_len: 512,
            hop: 128,
            hidden: 64,
            d_model: 32,
            heads: 4,
            repeats: 2,
            d_ff: 64,
        }
    }
}

const CONFIG_KEYS: [&str; 7] = [
    "win_len", "hop", "hidden", "d_model", "heads", "repeats", "d_ff",
];

impl ModelConfig {
    /// Small geometry used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            win_len: 16,
            hop: 4,
            hidden: 3,
            d_model: 4,
            heads: 2,
            repeats: 1,
            d_ff: 8,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.win_len,
            self.hop,
            self.hidden,
            self.d_model,
            self.heads,
            self.repeats,
            self.d_ff,
        ];
        if let Some(i) = fields.iter().position(|&v| v == 0) {
            return Err(ModelError::Config(format!(
                "{} must be positive",
                CONFIG_KEYS[i]
            )));
        }
        if !self.win_len.is_multiple_of(2) || self.win_len < 2 {
            return Err(ModelError::Config(format!(
                "win_len {} must be even",
                self.win_len
            )));
        }
        if self.hop > self.win_len / 2 {
            return Err(ModelError::Config(format!(
                "hop {} exceeds half the window {}",
                self.hop, self.win_len
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "d_model {} must be even",
                self.d_model
            )));
        }
        Ok(())
    }

    /// `key=value` lines in a fixed key order.
    pub fn to_text(&self) -> String {
        let vals = [
            self.win_len,
            self.hop,
            self.hidden,
            self.d_model,
            self.heads,
            self.repeats,
            self.d_ff,
        ];
        let mut s = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vals: [Option<usize>; 7] = [None; 7];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("malformed line {line:?}")))?;
            let i = CONFIG_KEYS
                .iter()
                .position(|c| *c == k.trim())
                .ok_or_else(|| ModelError::Config(format!("unknown key {k:?}")))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| ModelError::Config(format!("bad value for {k}: {v:?}")))?;
            vals[i] = Some(v);
        }
        let get = |i: usize| {
            vals[i].ok_or_else(|| ModelError::Config(format!("missing {}", CONFIG_KEYS[i])))
        };
        let cfg = Self {
            win_len: get(0)?,
            hop: get(1)?,
            hidden: get(2)?,
            d_model: get(3)?,
            heads: get(4)?,
            repeats: get(5)?,
            d_ff: get(6)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every parameter of the model with its shape and initializer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (f, h, d) = (self.num_bins(), self.hidden, self.d_model);
        let mut specs = GruParams::specs("bgru.fwd", f, h);
        specs.extend(GruParams::specs("bgru.bwd", f, h));
        specs.push(ParamSpec::new("embed.W", &[1 + 2 * h, d], Init::Uniform));
        specs.push(ParamSpec::new("embed.b", &[d], Init::Zeros));
        for r in 0..self.repeats {
            for path in ["intra", "inter"] {
                specs.extend(TransformerParams::specs(
                    &format!("block{r}.{path}"),
                    d,
                    self.d_ff,
                ));
            }
        }
        specs.push(ParamSpec::new("mask.W", &[d, 1], Init::Uniform));
        specs.push(ParamSpec::new("mask.b", &[1], Init::Zeros));
        specs
    }
}

/// Per-bin gains in `(0, 1)`, `[T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub values: Array2<f64>,
}

/// A configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Graph handles produced by [`forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub mask: Var,
    pub estimate: Var,
}

impl EnhancerModel {
    /// Seeded initialization; random draws follow lexicographic parameter order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::from_specs(config.param_specs(), &mut rng);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut specs = config.param_specs();
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        for spec in &specs {
            let value = params
                .value(&spec.name)
                .map_err(|_| ModelError::MissingParam(spec.name.clone()))?;
            if value.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: value.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params
            .names()
            .find(|n| !specs.iter().any(|s| &s.name == *n))
        {
            return Err(ModelError::UnexpectedParam(extra.clone()));
        }
        Ok(Self { config, params })
    }

    /// Enhances a 16 kHz waveform, returning the estimate and the mask used.
    pub fn enhance(&self, noisy: &AudioBuffer) -> Result<(AudioBuffer, Mask)> {
        forward(self, noisy)
    }
}

/// `e[t, f] = [ln(1 + mag[t, f]), g[t]] W + b`, shape `[T, F, d]`.
pub fn embed(g: &mut Graph, ps: &ParamSet, mag: &Array2<f64>, frames: Var) -> Result<Var> {
    let feat = mag.mapv(f64::ln_1p);
    let w = g.param(ps, "embed.W")?;
    let b = g.param(ps, "embed.b")?;
    Ok(g.embed(feat, frames, w, b)?)
}

/// One dual-path block over `[T, F, d]`: intra-frame layer across bins, then
/// inter-frame layer across time, each with its own positional table.
pub fn blockformer_block(
    g: &mut Graph,
    ps: &ParamSet,
    cfg: &ModelConfig,
    prefix: &str,
    e: Var,
) -> Result<Var> {
    let shape = g.value(e).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(NnError::Shape {
            op: "blockformer_block",
            detail: format!("{shape:?} with d_model {}", cfg.d_model),
        }
        .into());
    }
    let (t_n, f_n, d) = (shape[0], shape[1], shape[2]);
    let intra = TransformerParams::bind(g, ps, &format!("{prefix}.intra"))?;
    let inter = TransformerParams::bind(g, ps, &format!("{prefix}.inter"))?;
    let pe_f = g.constant(positional_encoding(f_n, d)?);
    let x = transformer_layer(g, e, &intra, cfg.heads, Some(pe_f))?;
    let x = g.swap_axes01(x)?;
    let pe_t = g.constant(positional_encoding(t_n, d)?);
    let x = transformer_layer(g, x, &inter, cfg.heads, Some(pe_t))?;
    Ok(g.swap_axes01(x)?)
}

/// `m[t, f] = sigmoid(e[t, f] W + b)`, shape `[T, F]`.
pub fn mask_head(g: &mut Graph, ps: &ParamSet, e: Var) -> Result<Var> {
    let shape = g.value(e).shape().to_vec();
    let w = g.param(ps, "mask.W")?;
    let b = g.param(ps, "mask.b")?;
    let logits = g.linear(e, w, Some(b))?;
    let logits = g.reshape(logits, &shape[..2])?;
    Ok(g.sigmoid(logits))
}

/// Records the full model on `spec`, the noisy STFT.
pub fn forward_graph(
    g: &mut Graph,
    ps: &ParamSet,
    cfg: &ModelConfig,
    spec: &Spectrogram,
) -> Result<ForwardVars> {
    if spec.win_len != cfg.win_len || spec.hop != cfg.hop {
        return Err(ModelError::Config(format!(
            "spectrogram geometry {}/{} does not match model {}/{}",
            spec.win_len, spec.hop, cfg.win_len, cfg.hop
        )));
    }
    let mag = spec.frames.mapv(|c| c.norm());
    let feat = g.constant(mag.mapv(f64::ln_1p).into_dyn());
    let fwd = GruParams::bind(g, ps, "bgru.fwd")?;
    let bwd = GruParams::bind(g, ps, "bgru.bwd")?;
    let frames = bgru(g, feat, &fwd, &bwd)?;
    let mut e = embed(g, ps, &mag, frames)?;
    for r in 0..cfg.repeats {
        e = blockformer_block(g, ps, cfg, &format!("block{r}"), e)?;
    }
    let mask = mask_head(g, ps, e)?;
    let estimate = g.masked_istft(mask, spec)?;
    Ok(ForwardVars { mask, estimate })
}

/// Enhances `noisy`: the mask scales the noisy magnitude, the noisy phase is kept.
pub fn forward(model: &EnhancerModel, noisy: &AudioBuffer) -> Result<(AudioBuffer, Mask)> {
    if noisy.sample_rate != SAMPLE_RATE {
        return Err(ModelError::SampleRate {
            expected: SAMPLE_RATE,
            got: noisy.sample_rate,
        });
    }
    let cfg = &model.config;
    let spec = audio::stft(noisy, cfg.win_len, cfg.hop)?;
    let mut g = Graph::new();
    let vars = forward_graph(&mut g, &model.params, cfg, &spec)?;
    let values = g
        .value(vars.mask)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("mask is rank 2");
    let mp = audio::mag_phase(&spec);
    let masked = audio::MagPhase {
        magnitude: &mp.magnitude * &values,
        ..mp
    };
    let est = audio::istft(&audio::recombine(&masked)?)?;
    Ok((est, Mask { values }))
}

#[cfg(test)]
mod tests;
