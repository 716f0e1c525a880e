//! Short-time objective intelligibility.
//!
//! Constants: 10 kHz analysis rate, 256-sample Hann frames with hop 128 and a
//! 512-point FFT, 15 one-third-octave bands from 150 Hz, 30-frame (384 ms)
//! envelope segments, -15 dB lower SDR bound, 40 dB silent-frame range.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{MetricsError, Result};
use crate::audio::{resample, AudioBuffer};

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Symmetric Hann of length `n + 2` with both zero endpoints removed.
fn inner_hann(n: usize) -> Vec<f64> {
    let m = n + 2;
    (1..=n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / (m - 1) as f64).cos())
        .collect()
}

/// Frame starts `0, HOP, ...` strictly below `len - FRAME`.
fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Drops frames whose clean energy is more than the dynamic range below the
/// loudest clean frame, then overlap-adds the survivors.
fn remove_silent_frames(x: &[f64], y: &[f64], window: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let frames: Vec<(Vec<f64>, Vec<f64>)> = frame_starts(x.len())
        .map(|s| {
            let fx = (0..FRAME).map(|k| window[k] * x[s + k]).collect();
            let fy = (0..FRAME).map(|k| window[k] * y[s + k]).collect();
            (fx, fy)
        })
        .collect();
    let energies: Vec<f64> = frames
        .iter()
        .map(|(fx, _)| 20.0 * (norm(fx) + EPS).log10())
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<&(Vec<f64>, Vec<f64>)> = frames
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(f, _)| f)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * HOP + FRAME;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (i, (fx, fy)) in kept.iter().enumerate() {
        for k in 0..FRAME {
            xs[i * HOP + k] += fx[k];
            ys[i * HOP + k] += fy[k];
        }
    }
    (xs, ys)
}

/// `|STFT|^2` per frame, `NFFT/2 + 1` bins.
fn power_frames(x: &[f64], window: &[f64]) -> Vec<Vec<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    frame_starts(x.len())
        .map(|s| {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for k in 0..FRAME {
                buf[k] = Complex64::new(window[k] * x[s + k], 0.0);
            }
            fft.process(&mut buf);
            buf[..=NFFT / 2].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Bin ranges `[lo, hi)` of the one-third-octave bands, edges snapped to the nearest bin.
fn band_edges() -> Vec<(usize, usize)> {
    let freqs: Vec<f64> = (0..=NFFT / 2)
        .map(|k| k as f64 * STOI_RATE as f64 / NFFT as f64)
        .collect();
    let nearest = |f: f64| {
        freqs
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - f).powi(2).total_cmp(&(b.1 - f).powi(2)))
            .map(|(i, _)| i)
            .expect("non-empty")
    };
    (0..BANDS)
        .map(|i| {
            let k = i as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes `[band][frame]`.
fn band_envelopes(power: &[Vec<f64>], edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    edges
        .iter()
        .map(|&(lo, hi)| {
            power
                .iter()
                .map(|p| p[lo..hi].iter().sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

fn centre_and_normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let n = norm(v) + EPS;
    v.iter_mut().for_each(|x| *x /= n);
}

fn to_stoi_rate(buf: &AudioBuffer) -> Result<Vec<f64>> {
    if buf.sample_rate == STOI_RATE {
        Ok(buf.samples.clone())
    } else {
        Ok(resample(buf, STOI_RATE)?.samples)
    }
}

/// Intelligibility score of `est` against `clean`, nominally in `[0, 1]`.
pub fn stoi(clean: &AudioBuffer, est: &AudioBuffer) -> Result<f64> {
    if clean.len() != est.len() {
        return Err(MetricsError::LengthMismatch(clean.len(), est.len()));
    }
    if clean.sample_rate != est.sample_rate {
        return Err(MetricsError::RateMismatch(
            clean.sample_rate,
            est.sample_rate,
        ));
    }
    let x = to_stoi_rate(clean)?;
    let y = to_stoi_rate(est)?;
    let window = inner_hann(FRAME);
    let (x, y) = remove_silent_frames(&x, &y, &window);
    let xp = power_frames(&x, &window);
    let yp = power_frames(&y, &window);
    if xp.len() < SEGMENT {
        return Err(MetricsError::TooShort {
            frames: xp.len(),
            needed: SEGMENT,
        });
    }
    let edges = band_edges();
    let xe = band_envelopes(&xp, &edges);
    let ye = band_envelopes(&yp, &edges);
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let n_frames = xp.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEGMENT..=n_frames {
        for b in 0..BANDS {
            let mut xs = xe[b][m - SEGMENT..m].to_vec();
            let ys = &ye[b][m - SEGMENT..m];
            let alpha = norm(&xs) / (norm(ys) + EPS);
            let mut yc: Vec<f64> = ys
                .iter()
                .zip(&xs)
                .map(|(yv, xv)| (yv * alpha).min(xv * (1.0 + clip)))
                .collect();
            centre_and_normalize(&mut yc);
            centre_and_normalize(&mut xs);
            total += yc.iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}
