use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{mix, ManifestEntry, Mixture, Result};
use crate::audio::{read_wav, resample, AudioBuffer};

/// Loads and caches source files referenced by manifest ids.
///
/// Noise is resampled to the clean file's rate on load.
#[derive(Debug)]
pub struct Corpus {
    clean_dir: PathBuf,
    noise_dir: PathBuf,
    clean: HashMap<String, AudioBuffer>,
    noise: HashMap<(String, u32), AudioBuffer>,
}

fn resolve(dir: &Path, id: &str) -> PathBuf {
    id.split('/').fold(dir.to_path_buf(), |p, c| p.join(c))
}

impl Corpus {
    pub fn new(clean_dir: impl Into<PathBuf>, noise_dir: impl Into<PathBuf>) -> Self {
        Self {
            clean_dir: clean_dir.into(),
            noise_dir: noise_dir.into(),
            clean: HashMap::new(),
            noise: HashMap::new(),
        }
    }

    pub fn for_manifest(manifest: &super::Manifest) -> Self {
        Self::new(&manifest.spec.clean_dir, &manifest.spec.noise_dir)
    }

    pub fn clean(&mut self, id: &str) -> Result<&AudioBuffer> {
        if !self.clean.contains_key(id) {
            let buf = read_wav(resolve(&self.clean_dir, id))?;
            self.clean.insert(id.to_string(), buf);
        }
        Ok(&self.clean[id])
    }

    pub fn noise(&mut self, id: &str, rate: u32) -> Result<&AudioBuffer> {
        let key = (id.to_string(), rate);
        if !self.noise.contains_key(&key) {
            let raw = read_wav(resolve(&self.noise_dir, id))?;
            self.noise.insert(key.clone(), resample(&raw, rate)?);
        }
        Ok(&self.noise[&key])
    }

    /// Re-synthesizes an entry; fully determined by the entry's fields.
    pub fn synthesize(&mut self, entry: &ManifestEntry) -> Result<Mixture> {
        let clean = self.clean(&entry.clean_id)?.clone();
        let noise = self.noise(&entry.noise_id, clean.sample_rate)?;
        mix(&clean, noise, entry.target_snr_db, entry.noise_offset)
    }
}
