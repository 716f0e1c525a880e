use std::f64::consts::PI;

use super::{AudioBuffer, AudioError, Result};

const KAISER_BETA: f64 = 5.0;
const HALF_LEN_PER_RATE: usize = 10;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass at `cutoff` (fraction of Nyquist), unit DC gain.
fn lowpass(taps: usize, cutoff: f64) -> Vec<f64> {
    let center = (taps - 1) as f64 / 2.0;
    let norm = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - center;
            let sinc = if t == 0.0 {
                cutoff
            } else {
                (PI * cutoff * t).sin() / (PI * t)
            };
            let r = t / center;
            let win = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
            sinc * win
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Rational polyphase resampling with a Kaiser-windowed sinc anti-aliasing filter.
///
/// Output length is `round(len * target / source)`; equal rates return a copy.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(AudioError::ZeroSampleRate);
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let g = gcd(target_rate as u64, buf.sample_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (buf.sample_rate as u64 / g) as usize;
    let half_len = HALF_LEN_PER_RATE * up.max(down);
    let taps = 2 * half_len + 1;
    let h: Vec<f64> = lowpass(taps, 1.0 / up.max(down) as f64)
        .into_iter()
        .map(|v| v * up as f64)
        .collect();

    let n_in = buf.len();
    let n_out = ((n_in as f64) * up as f64 / down as f64).round() as usize;
    let samples = (0..n_out)
        .map(|m| {
            // Position on the upsampled timeline, shifted by the filter delay.
            let pos = (m * down + half_len) as isize;
            let j_hi = (pos / up as isize).min(n_in as isize - 1);
            let j_lo = ((pos - (taps as isize - 1)) as f64 / up as f64)
                .ceil()
                .max(0.0) as isize;
            (j_lo..=j_hi)
                .map(|j| buf.samples[j as usize] * h[(pos - j * up as isize) as usize])
                .sum()
        })
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: target_rate,
    })
}
