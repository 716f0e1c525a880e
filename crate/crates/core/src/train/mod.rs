//! Negative-SNR objective, batch assembly from manifests, the optimization
//! loop and the checkpoint format.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{self, AudioBuffer};
use crate::mixgen::{entry_id, Corpus, Manifest, ManifestEntry, MixError, Split};
use crate::model::{forward_graph, EnhancerModel, ModelConfig, ModelError, SAMPLE_RATE};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, NnError, Var};

/// Added to the residual energy inside the loss logarithm.
pub const LOSS_EPS: f64 = 1e-12;
pub const DEFAULT_LOSS_CAP_DB: f64 = 60.0;

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("manifest has no train entries")]
    EmptyTrainSplit,
    #[error("non-finite loss at step {step} on entry {entry} ({detail})")]
    NonFinite {
        step: u64,
        entry: String,
        detail: String,
    },
    #[error("entry {entry}: {source}")]
    Entry {
        entry: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
}

/// Records `-10 log10(sum c^2 / (sum (c - e)^2 + eps))`, floored at `-cap_db`.
pub fn snr_loss(g: &mut Graph, clean: &[f64], est: Var, cap_db: f64) -> Result<Var> {
    Ok(g.snr_loss(clean, est, cap_db, LOSS_EPS)?)
}

/// Loss value for plain waveforms.
pub fn snr_loss_value(clean: &[f64], est: &[f64], cap_db: f64) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(
        crate::nn::Tensor::from_shape_vec(ndarray::IxDyn(&[est.len()]), est.to_vec()).expect("1-d"),
    );
    let l = snr_loss(&mut g, clean, e, cap_db)?;
    Ok(g.scalar(l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub model: ModelConfig,
    /// Crop length in samples.
    pub segment_len: usize,
    pub batch_size: usize,
    /// Total number of optimizer steps, counting any resumed ones.
    pub steps: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Intermediate checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub loss_cap_db: f64,
    /// Final checkpoint location; intermediate ones get a `.stepNNNNNN` suffix.
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            model: ModelConfig::default(),
            segment_len: 32_000,
            batch_size: 1,
            steps: 100,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            loss_cap_db: DEFAULT_LOSS_CAP_DB,
            checkpoint_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        if self.segment_len < self.model.win_len {
            return Err(TrainError::Config(format!(
                "segment_len {} shorter than win_len {}",
                self.segment_len, self.model.win_len
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.loss_cap_db > 0.0) {
            return Err(TrainError::Config("loss_cap_db must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One aligned training crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub entry: String,
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
    /// Scaled noise contained in `noisy`.
    pub noise: Vec<f64>,
}

fn crop(x: &[f64], start: usize, len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().skip(start).take(len).copied().collect();
    out.resize(len, 0.0);
    out
}

/// Synthesizes each entry and takes a seeded random crop of `segment_len`
/// samples, zero-padding shorter clips on the right.
pub fn make_batch(
    corpus: &mut Corpus,
    entries: &[(String, &ManifestEntry)],
    segment_len: usize,
    seed: u64,
) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    entries
        .iter()
        .map(|(id, e)| {
            let mix = corpus.synthesize(e).map_err(|err| TrainError::Entry {
                entry: id.clone(),
                source: Box::new(err.into()),
            })?;
            let len = mix.mixture.len();
            let start = if len > segment_len {
                rng.gen_range(0..=len - segment_len)
            } else {
                0
            };
            Ok(Pair {
                entry: id.clone(),
                noisy: crop(&mix.mixture.samples, start, segment_len),
                clean: crop(&mix.clean.samples, start, segment_len),
                noise: crop(&mix.noise.samples, start, segment_len),
            })
        })
        .collect()
}

/// Loss and gradients of one pair; gradients are added into the model scaled by `scale`.
fn pair_loss(model: &mut EnhancerModel, pair: &Pair, cap_db: f64, scale: f64) -> Result<f64> {
    let cfg = model.config;
    let noisy = AudioBuffer::new(pair.noisy.clone(), SAMPLE_RATE)?;
    let spec = audio::stft(&noisy, cfg.win_len, cfg.hop)?;
    let mut g = Graph::new();
    let vars = forward_graph(&mut g, &model.params, &cfg, &spec)?;
    let loss = snr_loss(&mut g, &pair.clean, vars.estimate, cap_db)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    grads.accumulate_into(&g, &mut model.params, scale)?;
    Ok(value)
}

/// Mean loss over the batch followed by one Adam update; returns the pre-update loss.
pub fn train_step(
    model: &mut EnhancerModel,
    adam: &mut AdamState,
    batch: &[Pair],
    adam_cfg: &AdamConfig,
    cap_db: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    model.params.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for pair in batch {
        let l = pair_loss(model, pair, cap_db, scale).map_err(|e| match e {
            TrainError::Nn(NnError::SilentReference) => TrainError::NonFinite {
                step: adam.t + 1,
                entry: pair.entry.clone(),
                detail: "silent clean crop".into(),
            },
            other => TrainError::Entry {
                entry: pair.entry.clone(),
                source: Box::new(other),
            },
        })?;
        if !l.is_finite() {
            model.params.zero_grads();
            return Err(TrainError::NonFinite {
                step: adam.t + 1,
                entry: pair.entry.clone(),
                detail: format!("loss {l}"),
            });
        }
        total += l;
    }
    adam_step(&mut model.params, adam, adam_cfg)?;
    Ok(total * scale)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    /// 1-based step number.
    pub step: u64,
    pub loss_db: f64,
    pub wall_ms: f64,
}

impl LogLine {
    /// `step\tloss_db\twall_ms`.
    pub fn to_tsv(&self) -> String {
        format!("{}\t{:.6}\t{:.1}", self.step, self.loss_db, self.wall_ms)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogLine>,
}

fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Training indices in the order used by `cycle`; a seeded shuffle per cycle.
fn cycle_order(train: &[usize], seed: u64, cycle: u64) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(seed, cycle)));
    order
}

/// Fresh training state for `cfg`.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    let model = EnhancerModel::new(cfg.model, cfg.seed)?;
    Ok(Checkpoint {
        config: cfg.model,
        params: model.params,
        adam: AdamState::new(),
        step: 0,
        rng: ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 0x6372_6f70)),
    })
}

fn intermediate_path(path: &Path, step: u64) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".step{step:06}"));
    PathBuf::from(s)
}

/// Runs optimizer steps until `cfg.steps`, starting from `resume` or a fresh model.
///
/// Which entries form step `k`'s batch depends only on `k` and the seed, and
/// crop positions come from the checkpointed RNG, so resuming reproduces the
/// uninterrupted run. `on_step` sees each log line as it is produced.
pub fn train_loop(
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&LogLine),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::read(&cfg.manifest)?;
    let train: Vec<usize> = manifest.split(Split::Train).map(|(i, _)| i).collect();
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let start = match resume {
        Some(ck) => {
            if ck.config != cfg.model {
                return Err(TrainError::Config(
                    "checkpoint model config differs from the requested one".into(),
                ));
            }
            ck
        }
        None => initial_checkpoint(cfg)?,
    };
    let mut model = start.model()?;
    let mut adam = start.adam;
    let mut rng = start.rng;
    let mut step = start.step;
    let mut corpus = Corpus::for_manifest(&manifest);
    let n = train.len() as u64;
    let b = cfg.batch_size as u64;
    let mut log = Vec::new();
    let mut order_cache: Option<(u64, Vec<usize>)> = None;

    while step < cfg.steps {
        let t0 = Instant::now();
        let mut picked = Vec::with_capacity(cfg.batch_size);
        for i in 0..b {
            let k = step * b + i;
            let cycle = k / n;
            if order_cache.as_ref().map(|(c, _)| *c) != Some(cycle) {
                order_cache = Some((cycle, cycle_order(&train, cfg.seed, cycle)));
            }
            let idx = order_cache.as_ref().expect("filled above").1[(k % n) as usize];
            picked.push((entry_id(idx), &manifest.entries[idx]));
        }
        let batch_seed = rng.next_u64();
        let batch = make_batch(&mut corpus, &picked, cfg.segment_len, batch_seed)?;
        let loss =
            train_step(&mut model, &mut adam, &batch, &cfg.adam, cfg.loss_cap_db).map_err(|e| {
                match e {
                    TrainError::NonFinite { entry, detail, .. } => TrainError::NonFinite {
                        step: step + 1,
                        entry,
                        detail,
                    },
                    other => other,
                }
            })?;
        step += 1;
        let line = LogLine {
            step,
            loss_db: loss,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&line);
        log.push(line);
        if let Some(path) = &cfg.checkpoint_path {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
                let ck = Checkpoint {
                    config: cfg.model,
                    params: model.params.clone(),
                    adam: adam.clone(),
                    step,
                    rng: rng.clone(),
                };
                save_checkpoint(intermediate_path(path, step), &ck)?;
            }
        }
    }
    let checkpoint = Checkpoint {
        config: cfg.model,
        params: model.params,
        adam,
        step,
        rng,
    };
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(path, &checkpoint)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}
