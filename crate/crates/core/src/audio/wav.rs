use std::path::Path;

use super::{AudioBuffer, AudioError, Result};

const PCM16_SCALE: f64 = 32768.0;
const PCM16_MAX: f64 = 1.0 - 1.0 / PCM16_SCALE;

/// Reads a PCM16 or float32 WAV file, averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let name = path.display().to_string();
    if !path.is_file() {
        return Err(AudioError::MissingFile(name));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| classify(&name, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::MalformedHeader {
            path: name,
            reason: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| classify(&name, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| classify(&name, e))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedCodec {
                path: name,
                reason: format!("{bits}-bit {fmt:?}"),
            })
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate).map_err(|e| AudioError::MalformedHeader {
        path: name,
        reason: e.to_string(),
    })
}

/// Quantizes one sample the way [`write_wav`] stores it.
pub(crate) fn quantize_pcm16(s: f64) -> i16 {
    (s.clamp(-1.0, PCM16_MAX) * PCM16_SCALE).round() as i16
}

/// Writes a mono 16-bit PCM file. Samples are clamped to `[-1, 1 - 2^-15]`.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let unwritable = |e: hound::Error| AudioError::Unwritable {
        path: name.clone(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(unwritable)?;
    for &s in &buf.samples {
        writer.write_sample(quantize_pcm16(s)).map_err(unwritable)?;
    }
    writer.finalize().map_err(unwritable)
}

fn classify(path: &str, err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::NotFound => {
            AudioError::MissingFile(path.to_string())
        }
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            AudioError::MalformedHeader {
                path: path.to_string(),
                reason: "truncated file".into(),
            }
        }
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_string(),
            source,
        },
        hound::Error::Unsupported => AudioError::UnsupportedCodec {
            path: path.to_string(),
            reason: "format tag not PCM or IEEE float".into(),
        },
        other => AudioError::MalformedHeader {
            path: path.to_string(),
            reason: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_i16(path: &Path, channels: u16, data: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &d in data {
            w.write_sample(d).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_i16(&p, 1, &[16384]);
        let b = read_wav(&p).unwrap();
        assert_eq!(b.samples, vec![0.5]);
        assert_eq!(b.sample_rate, 16000);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.2f32).unwrap();
        w.write_sample(0.6f32).unwrap();
        w.finalize().unwrap();
        let b = read_wav(&p).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b.samples[0] - 0.4).abs() < 1e-7);
        assert_eq!(b.sample_rate, 8000);
    }

    #[test]
    fn write_scaling_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.wav");
        let buf = AudioBuffer::new(vec![0.5, 1.0, -1.0, 2.0, -3.0], 16000).unwrap();
        write_wav(&p, &buf).unwrap();
        let raw: Vec<i16> = hound::WavReader::open(&p)
            .unwrap()
            .samples::<i16>()
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(raw, vec![16384, 32767, -32768, 32767, -32768]);
    }

    #[test]
    fn random_roundtrip_is_stable_and_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let buf = AudioBuffer::new(data.clone(), 16000).unwrap();
        let p1 = dir.path().join("r1.wav");
        write_wav(&p1, &buf).unwrap();
        let first = read_wav(&p1).unwrap();
        let max_err = first
            .samples
            .iter()
            .zip(&data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 32768.0, "max err {max_err}");

        let p2 = dir.path().join("r2.wav");
        write_wav(&p2, &first).unwrap();
        let second = read_wav(&p2).unwrap();
        assert_eq!(first.samples, second.samples);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_wav(dir.path().join("nope.wav")),
            Err(AudioError::MissingFile(_))
        ));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"definitely not a riff file").unwrap();
        assert!(matches!(
            read_wav(&junk),
            Err(AudioError::MalformedHeader { .. })
        ));

        let pcm24 = dir.path().join("p24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&pcm24, spec).unwrap();
        w.write_sample(1000i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&pcm24),
            Err(AudioError::UnsupportedCodec { .. })
        ));
    }

    #[test]
    fn unwritable_path() {
        let buf = AudioBuffer::zeros(10, 16000);
        let err = write_wav("/nonexistent-dir/x/y.wav", &buf).unwrap_err();
        assert!(matches!(err, AudioError::Unwritable { .. }));
    }
}
