//! Additive noisy-mixture synthesis at exact SNRs and deterministic split manifests.

mod corpus;
mod manifest;

pub use corpus::Corpus;
pub use manifest::{
    build_manifest, entry_id, entry_seed, noise_tag_of, speaker_of, DatasetSpec, Manifest,
    ManifestEntry, Split,
};

use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};

pub type Result<T> = std::result::Result<T, MixError>;

/// Cap applied by [`measured_snr`] when the distortion vanishes.
pub const SNR_CAP_DB: f64 = 100.0;
const SNR_EPS: f64 = 1e-12;
/// Peak target after joint rescaling of a clipping mixture.
const RESCALE_PEAK: f64 = 0.99;

#[derive(Error, Debug)]
pub enum MixError {
    #[error("empty audio buffer")]
    EmptyBuffer,
    #[error("{0} signal is silent; SNR undefined")]
    Silent(&'static str),
    #[error("sample rate mismatch: clean {clean} Hz vs noise {noise} Hz")]
    RateMismatch { clean: u32, noise: u32 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no .wav files under {0}")]
    EmptyPool(String),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("SNR grid is empty or non-finite")]
    BadGrid,
    #[error("pairs_per_clean must be at least 1")]
    ZeroPairs,
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Mean-square power `(1/N) sum s^2`.
pub fn signal_power(buf: &AudioBuffer) -> Result<f64> {
    if buf.is_empty() {
        return Err(MixError::EmptyBuffer);
    }
    Ok(buf.energy() / buf.len() as f64)
}

/// Noise gain `a` such that `10 log10(P_clean / P_{a noise}) == target_snr_db`.
pub fn gain_for_snr(clean: &AudioBuffer, noise: &AudioBuffer, target_snr_db: f64) -> Result<f64> {
    let p_clean = signal_power(clean)?;
    let p_noise = signal_power(noise)?;
    if p_clean == 0.0 {
        return Err(MixError::Silent("clean"));
    }
    if p_noise == 0.0 {
        return Err(MixError::Silent("noise"));
    }
    Ok((p_clean / (p_noise * 10f64.powf(target_snr_db / 10.0))).sqrt())
}

/// `10 log10(sum ref^2 / (sum dist^2 + 1e-12))`, capped at [`SNR_CAP_DB`].
pub fn measured_snr(reference: &AudioBuffer, distortion: &AudioBuffer) -> Result<f64> {
    if reference.len() != distortion.len() {
        return Err(MixError::LengthMismatch(reference.len(), distortion.len()));
    }
    let num = reference.energy();
    if num == 0.0 {
        return Err(MixError::Silent("reference"));
    }
    let snr = 10.0 * (num / (distortion.energy() + SNR_EPS)).log10();
    Ok(snr.min(SNR_CAP_DB))
}

/// Output of [`mix`]: `mixture == clean + noise` sample-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: AudioBuffer,
    /// Clean reference, scaled by `rescale_gain`.
    pub clean: AudioBuffer,
    /// Scaled noise actually present in `mixture`.
    pub noise: AudioBuffer,
    pub noise_gain: f64,
    /// Joint peak-normalization factor, 1.0 when the mixture did not clip.
    pub rescale_gain: f64,
}

/// Tiles `noise` cyclically from `noise_offset` to the clean length, scales it to
/// hit `target_snr_db`, and adds. A mixture peaking above 1 is rescaled jointly
/// with its components so the SNR is preserved.
pub fn mix(
    clean: &AudioBuffer,
    noise: &AudioBuffer,
    target_snr_db: f64,
    noise_offset: usize,
) -> Result<Mixture> {
    if clean.sample_rate != noise.sample_rate {
        return Err(MixError::RateMismatch {
            clean: clean.sample_rate,
            noise: noise.sample_rate,
        });
    }
    if noise.is_empty() || clean.is_empty() {
        return Err(MixError::EmptyBuffer);
    }
    let tiled = AudioBuffer {
        samples: (0..clean.len())
            .map(|i| noise.samples[(noise_offset + i) % noise.len()])
            .collect(),
        sample_rate: noise.sample_rate,
    };
    if signal_power(noise)? == 0.0 || signal_power(&tiled)? == 0.0 {
        return Err(MixError::Silent("noise"));
    }
    let a = gain_for_snr(clean, &tiled, target_snr_db)?;
    let peak = clean
        .samples
        .iter()
        .zip(&tiled.samples)
        .fold(0.0f64, |m, (c, n)| m.max((c + a * n).abs()));
    let g = if peak > 1.0 { RESCALE_PEAK / peak } else { 1.0 };

    let clean_ref: Vec<f64> = clean.samples.iter().map(|c| g * c).collect();
    let noise_part: Vec<f64> = tiled.samples.iter().map(|n| g * (a * n)).collect();
    let mixture = clean_ref
        .iter()
        .zip(&noise_part)
        .map(|(c, n)| c + n)
        .collect();
    let sr = clean.sample_rate;
    Ok(Mixture {
        mixture: AudioBuffer {
            samples: mixture,
            sample_rate: sr,
        },
        clean: AudioBuffer {
            samples: clean_ref,
            sample_rate: sr,
        },
        noise: AudioBuffer {
            samples: noise_part,
            sample_rate: sr,
        },
        noise_gain: a,
        rescale_gain: g,
    })
}
