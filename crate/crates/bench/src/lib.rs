//! Fixtures shared by the pipeline benchmarks.

use dpse_core::audio::AudioBuffer;
use dpse_core::mixgen::mix;
use dpse_core::model::{ModelConfig, SAMPLE_RATE};
use dpse_core::signals::{noise, speech_like, NoiseKind};
use dpse_core::train::Pair;

/// Speech-like clip mixed with babble at 0 dB, returned as (clean, noisy).
pub fn noisy_clip(secs: f64) -> (AudioBuffer, AudioBuffer) {
    let clean = speech_like(1, secs, SAMPLE_RATE);
    let n = noise(NoiseKind::Babble, 2, secs, SAMPLE_RATE);
    let m = mix(&clean, &n, 0.0, 0).expect("non-silent sources");
    (m.clean, m.mixture)
}

/// Training crop of `secs` seconds.
pub fn pair(secs: f64) -> Pair {
    let clean = speech_like(3, secs, SAMPLE_RATE);
    let n = noise(NoiseKind::White, 4, secs, SAMPLE_RATE);
    let m = mix(&clean, &n, 0.0, 0).expect("non-silent sources");
    Pair {
        entry: "bench".into(),
        noisy: m.mixture.samples,
        clean: m.clean.samples,
        noise: m.noise.samples,
    }
}

/// Narrow model for timing the training step without the full-width cost.
pub fn narrow_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        d_model: 4,
        heads: 2,
        repeats: 1,
        d_ff: 8,
        ..ModelConfig::default()
    }
}
