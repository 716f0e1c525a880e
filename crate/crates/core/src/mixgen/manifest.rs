use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, MixError, Result};

const HEADER_TAG: &str = "#dpse-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Inputs to [`build_manifest`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub clean_dir: PathBuf,
    pub noise_dir: PathBuf,
    pub snr_grid: Vec<f64>,
    /// Train, validation and test ratios.
    pub splits: [f64; 3],
    pub pairs_per_clean: usize,
    pub master_seed: u64,
}

impl DatasetSpec {
    pub fn new(clean_dir: impl Into<PathBuf>, noise_dir: impl Into<PathBuf>) -> Self {
        Self {
            clean_dir: clean_dir.into(),
            noise_dir: noise_dir.into(),
            snr_grid: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            splits: [0.7, 0.2, 0.1],
            pairs_per_clean: usize::MAX,
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|v| !v.is_finite()) {
            return Err(MixError::BadGrid);
        }
        let sum: f64 = self.splits.iter().sum();
        if self.splits.iter().any(|&r| !(r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(MixError::BadRatios(self.splits));
        }
        if self.pairs_per_clean == 0 {
            return Err(MixError::ZeroPairs);
        }
        Ok(())
    }
}

/// One synthesized mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the clean directory, `/`-separated.
    pub clean_id: String,
    /// Path relative to the noise directory, `/`-separated.
    pub noise_id: String,
    pub noise_tag: String,
    pub target_snr_db: f64,
    pub split: Split,
    pub seed: u64,
    pub noise_offset: usize,
    pub rescale_gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
}

/// FNV-1a followed by a splitmix64 finalizer; stable across platforms and releases.
fn hash64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // Field separator so ("ab","c") and ("a","bc") differ.
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Per-entry seed: `hash64(master_seed, clean_id, noise_id, snr)`.
pub fn entry_seed(master_seed: u64, clean_id: &str, noise_id: &str, snr_db: f64) -> u64 {
    hash64(&[
        &master_seed.to_le_bytes(),
        clean_id.as_bytes(),
        noise_id.as_bytes(),
        &snr_db.to_bits().to_le_bytes(),
    ])
}

/// Speaker of a clean file: its first directory component, or the file stem when flat.
pub fn speaker_of(clean_id: &str) -> &str {
    match clean_id.split_once('/') {
        Some((dir, _)) => dir,
        None => file_stem(clean_id),
    }
}

/// Category label of a noise file: its first directory component, or the file
/// stem with a trailing index (`wind_03` -> `wind`) removed.
pub fn noise_tag_of(noise_id: &str) -> String {
    if let Some((dir, _)) = noise_id.split_once('/') {
        return dir.to_string();
    }
    let stem = file_stem(noise_id);
    let trimmed = stem
        .trim_end_matches(|c: char| c.is_ascii_digit())
        .trim_end_matches(['_', '-', ' ', '.']);
    if trimmed.is_empty() { stem } else { trimmed }.to_string()
}

fn file_stem(id: &str) -> &str {
    let name = id.rsplit('/').next().unwrap_or(id);
    name.rsplit_once('.').map_or(name, |(stem, _)| stem)
}

fn list_wavs(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| MixError::Io {
            path: dir.display().to_string(),
            source: e.into(),
        })?;
        let path = entry.path();
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if entry.file_type().is_file() && is_wav {
            let rel = path.strip_prefix(dir).unwrap_or(path);
            let id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if id.contains('\t') || id.contains('\n') {
                return Err(MixError::Parse {
                    line: 0,
                    reason: format!("file name with tab or newline: {id:?}"),
                });
            }
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(MixError::EmptyPool(dir.display().to_string()));
    }
    ids.sort();
    Ok(ids)
}

/// Largest-remainder apportionment of `total` items over `ratios`.
fn apportion(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = raw[i].floor() as usize;
    }
    let mut remaining = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

fn round_db(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

/// Enumerates every (clean, noise, SNR) tuple, synthesizes each once to record
/// its rescale gain, and partitions clean speakers across splits.
pub fn build_manifest(spec: &DatasetSpec) -> Result<Manifest> {
    spec.validate()?;
    let cleans = list_wavs(&spec.clean_dir)?;
    let noises = list_wavs(&spec.noise_dir)?;
    let mut corpus = Corpus::new(&spec.clean_dir, &spec.noise_dir);

    let mut entries = Vec::new();
    for clean_id in &cleans {
        let chosen: Vec<&String> = if spec.pairs_per_clean >= noises.len() {
            noises.iter().collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[
                &spec.master_seed.to_le_bytes(),
                clean_id.as_bytes(),
            ]));
            let mut idx =
                rand::seq::index::sample(&mut rng, noises.len(), spec.pairs_per_clean).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &noises[i]).collect()
        };
        let rate = corpus.clean(clean_id)?.sample_rate;
        for noise_id in chosen {
            let noise_len = corpus.noise(noise_id, rate)?.len();
            for &snr in &spec.snr_grid {
                let target = round_db(snr);
                let seed = entry_seed(spec.master_seed, clean_id, noise_id, target);
                let noise_offset = ChaCha8Rng::seed_from_u64(seed).gen_range(0..noise_len);
                let mut entry = ManifestEntry {
                    clean_id: clean_id.clone(),
                    noise_id: noise_id.clone(),
                    noise_tag: noise_tag_of(noise_id),
                    target_snr_db: target,
                    split: Split::Train,
                    seed,
                    noise_offset,
                    rescale_gain: 1.0,
                };
                entry.rescale_gain = corpus.synthesize(&entry)?.rescale_gain;
                entries.push(entry);
            }
        }
    }

    assign_splits(&mut entries, spec);
    Ok(Manifest {
        spec: spec.clone(),
        entries,
    })
}

/// Greedy speaker-to-split assignment: speakers in a seeded order, each to the
/// split with the largest remaining entry deficit.
fn assign_splits(entries: &mut [ManifestEntry], spec: &DatasetSpec) {
    let mut speakers: Vec<(String, usize)> = Vec::new();
    for e in entries.iter() {
        let s = speaker_of(&e.clean_id);
        match speakers.iter_mut().find(|(name, _)| name == s) {
            Some((_, n)) => *n += 1,
            None => speakers.push((s.to_string(), 1)),
        }
    }
    speakers.sort();
    let mut rng =
        ChaCha8Rng::seed_from_u64(hash64(&[&spec.master_seed.to_le_bytes(), b"speakers"]));
    speakers.shuffle(&mut rng);

    let targets = apportion(entries.len(), &spec.splits);
    let mut filled = [0usize; 3];
    let mut assignment = Vec::with_capacity(speakers.len());
    for (name, count) in &speakers {
        let split = Split::ALL
            .iter()
            .copied()
            .max_by(|a, b| {
                let da = targets[a.index()] as i64 - filled[a.index()] as i64;
                let db = targets[b.index()] as i64 - filled[b.index()] as i64;
                // Ties go to the earlier split.
                da.cmp(&db).then(b.index().cmp(&a.index()))
            })
            .expect("three splits");
        filled[split.index()] += count;
        assignment.push((name.clone(), split));
    }
    for e in entries.iter_mut() {
        let s = speaker_of(&e.clean_id);
        e.split = assignment
            .iter()
            .find(|(name, _)| name == s)
            .map(|(_, sp)| *sp)
            .expect("every speaker assigned");
    }
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64_list(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim().parse::<f64>().map_err(|e| MixError::Parse {
                line,
                reason: format!("bad number {v:?}: {e}"),
            })
        })
        .collect()
}

/// Stable identifier of the entry at `index` (its row number in the manifest).
pub fn entry_id(index: usize) -> String {
    format!("{index:06}")
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_tsv(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "{HEADER_TAG}\tclean_dir={}\tnoise_dir={}\tsnr_grid={}\tsplits={}\tpairs_per_clean={}\tmaster_seed={}\n",
            s.clean_dir.display(),
            s.noise_dir.display(),
            join_f64(&s.snr_grid),
            join_f64(&s.splits),
            s.pairs_per_clean,
            s.master_seed,
        );
        for e in &self.entries {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{:.12}",
                e.clean_id,
                e.noise_id,
                e.noise_tag,
                e.target_snr_db,
                e.split,
                e.seed,
                e.noise_offset,
                e.rescale_gain
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(MixError::Parse {
            line: 1,
            reason: "empty manifest".into(),
        })?;
        let spec = parse_header(header)?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| MixError::Parse {
                line: lineno,
                reason,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 8 {
                return Err(bad(format!("expected 8 fields, found {}", fields.len())));
            }
            entries.push(ManifestEntry {
                clean_id: fields[0].to_string(),
                noise_id: fields[1].to_string(),
                noise_tag: fields[2].to_string(),
                target_snr_db: fields[3]
                    .parse()
                    .map_err(|e| bad(format!("target_snr_db: {e}")))?,
                split: fields[4].parse().map_err(bad)?,
                seed: fields[5].parse().map_err(|e| bad(format!("seed: {e}")))?,
                noise_offset: fields[6]
                    .parse()
                    .map_err(|e| bad(format!("noise_offset: {e}")))?,
                rescale_gain: fields[7]
                    .parse()
                    .map_err(|e| bad(format!("rescale_gain: {e}")))?,
            });
        }
        Ok(Manifest { spec, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|source| MixError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MixError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

fn parse_header(header: &str) -> Result<DatasetSpec> {
    let bad = |reason: String| MixError::Parse { line: 1, reason };
    let mut fields = header.split('\t');
    if fields.next() != Some(HEADER_TAG) {
        return Err(bad(format!("missing {HEADER_TAG:?} header")));
    }
    let mut spec = DatasetSpec::new("", "");
    for kv in fields {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("header field without '=': {kv:?}")))?;
        match key {
            "clean_dir" => spec.clean_dir = PathBuf::from(value),
            "noise_dir" => spec.noise_dir = PathBuf::from(value),
            "snr_grid" => spec.snr_grid = parse_f64_list(value, 1)?,
            "splits" => {
                let v = parse_f64_list(value, 1)?;
                spec.splits = v
                    .try_into()
                    .map_err(|_| bad("splits needs three ratios".into()))?;
            }
            "pairs_per_clean" => {
                spec.pairs_per_clean = value
                    .parse()
                    .map_err(|e| bad(format!("pairs_per_clean: {e}")))?
            }
            "master_seed" => {
                spec.master_seed = value
                    .parse()
                    .map_err(|e| bad(format!("master_seed: {e}")))?
            }
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
    Ok(spec)
}
