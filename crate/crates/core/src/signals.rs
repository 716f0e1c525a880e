//! Seeded synthetic sources: speech-like harmonic utterances and a few noise
//! types. Used for tests, benchmarks and demo corpora when no recordings are
//! at hand.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use std::path::{Path, PathBuf};

use crate::audio::{write_wav, AudioBuffer, AudioError};

/// Noise families produced by [`noise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// Integrated, high-passed white noise with a slow gust envelope.
    Wind,
    /// Sum of several overlapping synthetic talkers.
    Babble,
    /// Mains hum with harmonics over a faint white floor.
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [Self::White, Self::Wind, Self::Babble, Self::Hum];

    pub fn name(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Wind => "wind",
            Self::Babble => "babble",
            Self::Hum => "hum",
        }
    }
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}

/// Formant-shaped harmonic syllables separated by short pauses, peak 0.5.
pub fn speech_like(seed: u64, secs: f64, sample_rate: u32) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let len = (secs * sr).round() as usize;
    let mut out = vec![0.0; len];
    let base_f0 = rng.gen_range(95.0..210.0);
    let mut pos = (rng.gen_range(0.02..0.08) * sr) as usize;
    while pos < len {
        let dur = (rng.gen_range(0.12..0.28) * sr) as usize;
        let f0_start = base_f0 * rng.gen_range(0.85..1.2);
        let f0_end = base_f0 * rng.gen_range(0.8..1.15);
        let formants = [
            rng.gen_range(300.0..900.0),
            rng.gen_range(900.0..2300.0),
            rng.gen_range(2300.0..3300.0),
        ];
        let level = rng.gen_range(0.4..1.0);
        let mut phase = 0.0;
        for i in 0..dur.min(len - pos) {
            let u = i as f64 / dur as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            phase += 2.0 * PI * f0 / sr;
            let env = (PI * u).sin().powf(0.6);
            let mut s = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < 4000.0_f64.min(sr / 2.0 - 100.0) {
                let fh = h as f64 * f0;
                let gain: f64 = formants
                    .iter()
                    .enumerate()
                    .map(|(k, fc)| {
                        let bw = 80.0 + 60.0 * k as f64;
                        (1.0 / (1.0 + ((fh - fc) / bw).powi(2))) / (k + 1) as f64
                    })
                    .sum();
                s += gain * (h as f64 * phase).sin() / (h as f64).sqrt();
                h += 1;
            }
            out[pos + i] += level * env * s;
        }
        pos += dur + (rng.gen_range(0.03..0.12) * sr) as usize;
    }
    AudioBuffer {
        samples: normalize_peak(out, 0.5),
        sample_rate,
    }
}

/// Seeded noise of the given family, peak 0.5.
pub fn noise(kind: NoiseKind, seed: u64, secs: f64, sample_rate: u32) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let len = (secs * sr).round() as usize;
    let samples: Vec<f64> = match kind {
        NoiseKind::White => (0..len)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
        NoiseKind::Wind => {
            let (mut acc, mut prev, mut hp) = (0.0, 0.0, 0.0);
            let gust = rng.gen_range(0.2..0.6);
            let gust_phase = rng.gen_range(0.0..2.0 * PI);
            (0..len)
                .map(|i| {
                    let w: f64 = rng.sample(StandardNormal);
                    acc = 0.995 * acc + w;
                    hp = 0.98 * (hp + acc - prev);
                    prev = acc;
                    let t = i as f64 / sr;
                    hp * (1.0 + 0.6 * (2.0 * PI * gust * t + gust_phase).sin())
                })
                .collect()
        }
        NoiseKind::Babble => {
            let talkers = 5;
            let mut mix = vec![0.0; len];
            for k in 0..talkers {
                let v = speech_like(rng.gen::<u64>() ^ k, secs, sample_rate);
                mix.iter_mut().zip(v.samples).for_each(|(m, s)| *m += s);
            }
            mix
        }
        NoiseKind::Hum => {
            let f = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    let tone: f64 = (1..=6)
                        .map(|h| (2.0 * PI * f * h as f64 * t).sin() / h as f64)
                        .sum();
                    tone + 0.05 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        }
    };
    AudioBuffer {
        samples: normalize_peak(samples, 0.5),
        sample_rate,
    }
}

/// Layout of a corpus written by [`write_demo_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct DemoCorpus {
    pub speakers: usize,
    pub files_per_speaker: usize,
    pub clean_secs: f64,
    pub noise_kinds: Vec<NoiseKind>,
    pub files_per_kind: usize,
    pub noise_secs: f64,
    pub seed: u64,
}

impl Default for DemoCorpus {
    fn default() -> Self {
        Self {
            speakers: 10,
            files_per_speaker: 1,
            clean_secs: 1.0,
            noise_kinds: vec![NoiseKind::White, NoiseKind::Wind],
            files_per_kind: 1,
            noise_secs: 2.0,
            seed: 0,
        }
    }
}

/// Writes `clean/spkNN/uttNN.wav` and `noise/<kind>/<kind>_NN.wav` under
/// `root` at 16 kHz; returns the clean and noise directories.
pub fn write_demo_corpus(root: &Path, spec: &DemoCorpus) -> Result<(PathBuf, PathBuf), AudioError> {
    let clean_dir = root.join("clean");
    let noise_dir = root.join("noise");
    let io = |p: &Path, source: std::io::Error| AudioError::Io {
        path: p.display().to_string(),
        source,
    };
    for s in 0..spec.speakers {
        let dir = clean_dir.join(format!("spk{s:02}"));
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        for u in 0..spec.files_per_speaker {
            let seed = spec
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((s * 1000 + u) as u64);
            write_wav(
                dir.join(format!("utt{u:02}.wav")),
                &speech_like(seed, spec.clean_secs, 16_000),
            )?;
        }
    }
    for (k, kind) in spec.noise_kinds.iter().enumerate() {
        let dir = noise_dir.join(kind.name());
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        for i in 0..spec.files_per_kind {
            let seed = spec
                .seed
                .wrapping_mul(1_000_033)
                .wrapping_add((k * 1000 + i) as u64 + 7_777);
            let path = dir.join(format!("{}_{i:02}.wav", kind.name()));
            write_wav(path, &noise(*kind, seed, spec.noise_secs, 16_000))?;
        }
    }
    Ok((clean_dir, noise_dir))
}
