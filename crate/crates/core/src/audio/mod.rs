//! Waveform containers, WAV I/O, STFT analysis/synthesis and resampling.
//!
//! All arithmetic is double precision. Files on disk are 16-bit PCM (32-bit
//! float is accepted on read).

mod resample;
mod stft;
mod wav;

pub use resample::resample;
pub use stft::{hann_window, istft, mag_phase, recombine, stft, MagPhase, Spectrogram};
pub use wav::{read_wav, write_wav};

pub(crate) use stft::window_square_sum;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AudioError>;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("wav file not found: {0}")]
    MissingFile(String),
    #[error("malformed wav header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("unsupported wav codec in {path}: {reason}")]
    UnsupportedCodec { path: String, reason: String },
    #[error("cannot write {path}: {reason}")]
    Unwritable { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("window length must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("empty audio buffer")]
    EmptyBuffer,
    #[error("window length must be even, got {0}")]
    OddWindow(usize),
    #[error("invalid hop {hop} for window {win_len}")]
    InvalidHop { hop: usize, win_len: usize },
    #[error("squared-window sum vanishes at sample {0}; window/hop cannot reconstruct")]
    ZeroWindowSum(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("sample rate must be positive")]
    ZeroSampleRate,
}

/// A mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}
