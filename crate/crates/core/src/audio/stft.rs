use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{AudioBuffer, AudioError, Result};

/// Smallest squared-window sum accepted during overlap-add normalization.
const MIN_WINDOW_SUM: f64 = 1e-10;

/// Periodic Hann window: `w[k] = 0.5 (1 - cos(2 pi k / n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(AudioError::WindowTooShort(n));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect())
}

/// One-sided complex STFT, `frames[[t, f]]`, `f` in `0..=win_len/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Array2<Complex64>,
    pub win_len: usize,
    pub hop: usize,
    pub original_len: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }

    /// Frame count produced by [`stft`] for a signal of `len` samples.
    pub fn frame_count(len: usize, win_len: usize, hop: usize) -> usize {
        let padded = len + 2 * (win_len / 2);
        (padded - win_len) / hop + 1
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            frames: self.frames.mapv(|c| c * gain),
            ..self.clone()
        }
    }
}

/// Magnitude and phase of a spectrogram, carrying the metadata needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct MagPhase {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub win_len: usize,
    pub hop: usize,
    pub original_len: usize,
    pub sample_rate: u32,
}

fn check_geometry(win_len: usize, hop: usize) -> Result<()> {
    if win_len < 2 {
        return Err(AudioError::WindowTooShort(win_len));
    }
    if !win_len.is_multiple_of(2) {
        return Err(AudioError::OddWindow(win_len));
    }
    if hop == 0 || hop > win_len {
        return Err(AudioError::InvalidHop { hop, win_len });
    }
    Ok(())
}

/// Centered STFT: `win_len/2` zeros on both ends, periodic Hann, stride `hop`.
pub fn stft(buf: &AudioBuffer, win_len: usize, hop: usize) -> Result<Spectrogram> {
    check_geometry(win_len, hop)?;
    if buf.is_empty() {
        return Err(AudioError::EmptyBuffer);
    }
    let window = hann_window(win_len)?;
    let pad = win_len / 2;
    let mut padded = vec![0.0; buf.len() + 2 * pad];
    padded[pad..pad + buf.len()].copy_from_slice(&buf.samples);

    let n_frames = Spectrogram::frame_count(buf.len(), win_len, hop);
    let n_bins = win_len / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(win_len);
    let mut frames = Array2::zeros((n_frames, n_bins));
    let mut scratch = vec![Complex64::new(0.0, 0.0); win_len];
    for t in 0..n_frames {
        let start = t * hop;
        for (k, slot) in scratch.iter_mut().enumerate() {
            *slot = Complex64::new(padded[start + k] * window[k], 0.0);
        }
        fft.process(&mut scratch);
        for f in 0..n_bins {
            frames[[t, f]] = scratch[f];
        }
    }
    Ok(Spectrogram {
        frames,
        win_len,
        hop,
        original_len: buf.len(),
        sample_rate: buf.sample_rate,
    })
}

/// Accumulated squared window over the padded timeline, `frames` frames at stride `hop`.
pub(crate) fn window_square_sum(window: &[f64], hop: usize, frames: usize) -> Vec<f64> {
    let win_len = window.len();
    let mut sum = vec![0.0; (frames - 1) * hop + win_len];
    for t in 0..frames {
        for (k, w) in window.iter().enumerate() {
            sum[t * hop + k] += w * w;
        }
    }
    sum
}

/// Checks that every retained sample of the padded timeline has a usable
/// normalizer; returns the offset of the first retained sample.
pub(crate) fn check_window_sum(wsum: &[f64], win_len: usize, original_len: usize) -> Result<usize> {
    let pad = win_len / 2;
    for j in 0..original_len {
        match wsum.get(pad + j) {
            Some(&d) if d > MIN_WINDOW_SUM => {}
            _ => return Err(AudioError::ZeroWindowSum(j)),
        }
    }
    Ok(pad)
}

/// Real inverse DFT of a one-sided spectrum, length `2 * (bins - 1)`.
///
/// Bins 0 and `N/2` contribute their real part only, matching a Hermitian
/// extension of the one-sided spectrum.
pub(crate) fn irfft_into(
    one_sided: impl Iterator<Item = Complex64>,
    ifft: &dyn rustfft::Fft<f64>,
    scratch: &mut [Complex64],
    out: &mut [f64],
) {
    let n = scratch.len();
    let half = n / 2;
    for (k, c) in one_sided.enumerate() {
        if k == 0 || k == half {
            scratch[k] = Complex64::new(c.re, 0.0);
        } else {
            scratch[k] = c;
            scratch[n - k] = c.conj();
        }
    }
    ifft.process(scratch);
    let scale = 1.0 / n as f64;
    for (o, s) in out.iter_mut().zip(scratch.iter()) {
        *o = s.re * scale;
    }
}

/// Weighted overlap-add inverse of [`stft`], normalized by the squared-window sum.
pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer> {
    let win_len = spec.win_len;
    check_geometry(win_len, spec.hop)?;
    if spec.num_bins() != win_len / 2 + 1 {
        return Err(AudioError::ShapeMismatch(format!(
            "{} bins for window {}",
            spec.num_bins(),
            win_len
        )));
    }
    let n_frames = spec.num_frames();
    if n_frames == 0 {
        return Err(AudioError::EmptyBuffer);
    }
    let window = hann_window(win_len)?;
    let wsum = window_square_sum(&window, spec.hop, n_frames);
    let pad = check_window_sum(&wsum, win_len, spec.original_len)?;

    let ifft = FftPlanner::new().plan_fft_inverse(win_len);
    let mut acc = vec![0.0; wsum.len()];
    let mut scratch = vec![Complex64::new(0.0, 0.0); win_len];
    let mut frame = vec![0.0; win_len];
    for t in 0..n_frames {
        irfft_into(
            spec.frames.row(t).iter().copied(),
            ifft.as_ref(),
            &mut scratch,
            &mut frame,
        );
        let start = t * spec.hop;
        for k in 0..win_len {
            acc[start + k] += frame[k] * window[k];
        }
    }
    let samples = (0..spec.original_len)
        .map(|j| acc[pad + j] / wsum[pad + j])
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Splits a spectrogram into modulus and argument. Zero bins get phase 0.
pub fn mag_phase(spec: &Spectrogram) -> MagPhase {
    let magnitude = spec.frames.mapv(|c| c.norm());
    let phase = spec.frames.mapv(|c| {
        if c.re == 0.0 && c.im == 0.0 {
            0.0
        } else {
            let p = c.im.atan2(c.re);
            if p <= -PI {
                PI
            } else {
                p
            }
        }
    });
    MagPhase {
        magnitude,
        phase,
        win_len: spec.win_len,
        hop: spec.hop,
        original_len: spec.original_len,
        sample_rate: spec.sample_rate,
    }
}

/// Rebuilds `m (cos p + i sin p)`.
pub fn recombine(mp: &MagPhase) -> Result<Spectrogram> {
    if mp.magnitude.dim() != mp.phase.dim() {
        return Err(AudioError::ShapeMismatch(format!(
            "magnitude {:?} vs phase {:?}",
            mp.magnitude.dim(),
            mp.phase.dim()
        )));
    }
    let mut frames = Array2::zeros(mp.magnitude.dim());
    ndarray::Zip::from(&mut frames)
        .and(&mp.magnitude)
        .and(&mp.phase)
        .for_each(|out, &m, &p| *out = Complex64::from_polar(m, p));
    Ok(Spectrogram {
        frames,
        win_len: mp.win_len,
        hop: mp.hop,
        original_len: mp.original_len,
        sample_rate: mp.sample_rate,
    })
}
