use std::collections::BTreeMap;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};
use crate::model::{EnhancerModel, ModelConfig};
use crate::nn::{AdamState, ParamSet, Tensor};

pub const FORMAT_VERSION: u8 = 1;
/// File signature; the last byte is the format version.
pub const MAGIC: [u8; 8] = [b'B', b'G', b'T', b'S', b'E', 0, 0, FORMAT_VERSION];

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_T_KEY: &str = "adam_t";

/// Complete training state.
///
/// On disk (all integers u64 little-endian, floats f64 little-endian):
/// magic, config block (length + UTF-8 `key=value` lines), tensor count,
/// per tensor (name length + name, rank, dims, values), step,
/// RNG blob (length + ChaCha8 seed, stream, word position), then a
/// CRC-64/XZ of every preceding byte.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub adam: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn model(&self) -> Result<EnhancerModel> {
        Ok(EnhancerModel::from_params(
            self.config,
            self.params.clone(),
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        let text = format!("{}{ADAM_T_KEY}={}\n", self.config.to_text(), self.adam.t);
        put_bytes(&mut out, text.as_bytes());

        let mut tensors: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (name, p) in self.params.iter() {
            tensors.insert(name.clone(), &p.value);
        }
        for (name, m) in &self.adam.m {
            tensors.insert(format!("{ADAM_M}{name}"), m);
        }
        for (name, v) in &self.adam.v {
            tensors.insert(format!("{ADAM_V}{name}"), v);
        }
        put_u64(&mut out, tensors.len() as u64);
        for (name, t) in tensors {
            put_bytes(&mut out, name.as_bytes());
            put_u64(&mut out, t.ndim() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u64(&mut out, self.step);

        let mut rng = Vec::with_capacity(56);
        rng.extend_from_slice(&self.rng.get_seed());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        put_bytes(&mut out, &rng);

        let crc = CRC64.checksum(&out);
        put_u64(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(TrainError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(TrainError::Format("truncated checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = CRC64.checksum(body);
        if stored != computed {
            return Err(TrainError::Checksum { stored, computed });
        }

        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| TrainError::Format("config block is not UTF-8".into()))?;
        let mut adam_t = 0;
        let mut model_text = String::new();
        for line in text.lines() {
            match line.split_once('=') {
                Some((ADAM_T_KEY, v)) => {
                    adam_t = v
                        .parse()
                        .map_err(|_| TrainError::Format(format!("bad {ADAM_T_KEY} {v:?}")))?
                }
                _ => {
                    model_text.push_str(line);
                    model_text.push('\n');
                }
            }
        }
        let config = ModelConfig::from_text(&model_text)?;

        let count = r.u64()?;
        let mut params = ParamSet::new();
        let mut adam = AdamState {
            t: adam_t,
            ..AdamState::default()
        };
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| TrainError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u64()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::from_shape_vec(IxDyn(&dims), values).expect("length from dims");
            if let Some(p) = name.strip_prefix(ADAM_M) {
                adam.m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                adam.v.insert(p.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let step = r.u64()?;
        let blob = r.bytes()?;
        if blob.len() != 56 {
            return Err(TrainError::Format(format!(
                "RNG state of {} bytes",
                blob.len()
            )));
        }
        let seed: [u8; 32] = blob[..32].try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(blob[32..40].try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(blob[40..56].try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        if r.pos != body.len() {
            return Err(TrainError::Format(format!(
                "{} trailing bytes before checksum",
                body.len() - r.pos
            )));
        }
        for (name, m) in &adam.m {
            let p = params
                .value(name)
                .map_err(|_| TrainError::Format(format!("moment for unknown tensor {name}")))?;
            if p.shape() != m.shape() {
                return Err(TrainError::Format(format!(
                    "moment shape mismatch for {name}"
                )));
            }
        }
        Ok(Self {
            config,
            params,
            adam,
            step,
            rng,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads and checks every parameter against `expected`.
pub fn load_checkpoint_with(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    EnhancerModel::from_params(*expected, ckpt.params.clone())?;
    Ok(ckpt)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TrainError::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}
