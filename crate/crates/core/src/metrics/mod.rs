//! Objective scores (SNR, STOI) per pair and over manifest splits, with
//! box-plot summaries grouped by noise tag and input-SNR bin.

mod stoi;

pub use stoi::{stoi, STOI_RATE};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::audio::AudioError;
use crate::mixgen::{entry_id, Corpus, Manifest, MixError, Split};
use crate::model::{EnhancerModel, ModelError};

/// Upper limit of reported SNRs.
pub const SNR_CAP_DB: f64 = 100.0;
const SNR_EPS: f64 = 1e-12;
/// Width of the input-SNR bins used in summaries.
pub const SNR_BIN_DB: f64 = 5.0;

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("silent reference signal")]
    SilentReference,
    #[error("too little non-silent speech for STOI: {frames} frames, need {needed}")]
    TooShort { frames: usize, needed: usize },
    #[error("split {0} has no entries")]
    EmptySplit(Split),
    #[error("entry {entry}: {source}")]
    Entry {
        entry: String,
        #[source]
        source: Box<MetricsError>,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `10 log10(sum c^2 / (sum (c - e)^2 + 1e-12))`, capped at [`SNR_CAP_DB`].
pub fn snr_metric(clean: &[f64], est: &[f64]) -> Result<f64> {
    if clean.len() != est.len() {
        return Err(MetricsError::LengthMismatch(clean.len(), est.len()));
    }
    let signal: f64 = clean.iter().map(|c| c * c).sum();
    if signal == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    let residual: f64 = clean.iter().zip(est).map(|(c, e)| (c - e) * (c - e)).sum();
    Ok((10.0 * (signal / (residual + SNR_EPS)).log10()).min(SNR_CAP_DB))
}

/// Scores of one manifest entry before and after enhancement.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub entry_id: String,
    pub noise_tag: String,
    pub input_snr_db: f64,
    pub output_snr_db: f64,
    pub stoi_in: f64,
    pub stoi_out: f64,
}

/// Box-plot statistics of one metric within one group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with linearly interpolated quantiles (position `q * (n - 1)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `None` for an empty sample.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(BoxStats {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

/// Nearest 5 dB grid point, clamped to `[-10, 10]`.
pub fn snr_bin(snr_db: f64) -> i32 {
    ((snr_db / SNR_BIN_DB).round() * SNR_BIN_DB).clamp(-10.0, 10.0) as i32
}

pub const METRICS: [&str; 5] = [
    "input_snr_db",
    "output_snr_db",
    "snr_gain_db",
    "stoi_in",
    "stoi_out",
];

fn metric_values(row: &EvalRow) -> [f64; 5] {
    [
        row.input_snr_db,
        row.output_snr_db,
        row.output_snr_db - row.input_snr_db,
        row.stoi_in,
        row.stoi_out,
    ]
}

/// Groups: `all`, `tag=<tag>`, `snr=<bin>`, `tag=<tag>,snr=<bin>`; one row per metric.
pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u8, String, i32), Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        let bin = snr_bin(r.input_snr_db);
        groups.entry((0, String::new(), 0)).or_default().push(r);
        groups
            .entry((1, r.noise_tag.clone(), 0))
            .or_default()
            .push(r);
        groups.entry((2, String::new(), bin)).or_default().push(r);
        groups
            .entry((3, r.noise_tag.clone(), bin))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((kind, tag, bin), members) in groups {
        let label = match kind {
            0 => "all".to_string(),
            1 => format!("tag={tag}"),
            2 => format!("snr={bin}"),
            _ => format!("tag={tag},snr={bin}"),
        };
        for (m, name) in METRICS.iter().enumerate() {
            let vals: Vec<f64> = members.iter().map(|r| metric_values(r)[m]).collect();
            let stats = box_stats(&vals).expect("groups are non-empty");
            out.push(SummaryRow {
                group: label.clone(),
                metric: name.to_string(),
                n: vals.len(),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: stats.min,
                q1: stats.q1,
                median: stats.median,
                q3: stats.q3,
                max: stats.max,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<SummaryRow>,
}

/// Scores every entry of `split`; without a model the mixture itself is the estimate.
pub fn eval_manifest(
    model: Option<&EnhancerModel>,
    manifest: &Manifest,
    split: Split,
) -> Result<Evaluation> {
    let mut corpus = Corpus::for_manifest(manifest);
    let mut rows = Vec::new();
    for (i, entry) in manifest.split(split) {
        let id = entry_id(i);
        let wrap = |e: MetricsError| MetricsError::Entry {
            entry: id.clone(),
            source: Box::new(e),
        };
        let mix = corpus.synthesize(entry).map_err(|e| wrap(e.into()))?;
        let est = match model {
            Some(m) => m.enhance(&mix.mixture).map_err(|e| wrap(e.into()))?.0,
            None => mix.mixture.clone(),
        };
        let row = EvalRow {
            entry_id: id.clone(),
            noise_tag: entry.noise_tag.clone(),
            input_snr_db: snr_metric(&mix.clean.samples, &mix.mixture.samples).map_err(wrap)?,
            output_snr_db: snr_metric(&mix.clean.samples, &est.samples).map_err(wrap)?,
            stoi_in: stoi(&mix.clean, &mix.mixture).map_err(wrap)?,
            stoi_out: stoi(&mix.clean, &est).map_err(wrap)?,
        };
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MetricsError::EmptySplit(split));
    }
    let summary = summarize(&rows);
    Ok(Evaluation { rows, summary })
}

pub fn rows_tsv(rows: &[EvalRow]) -> String {
    let mut s =
        String::from("entry_id\tnoise_tag\tinput_snr_db\toutput_snr_db\tstoi_in\tstoi_out\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.entry_id, r.noise_tag, r.input_snr_db, r.output_snr_db, r.stoi_in, r.stoi_out
        );
    }
    s
}

pub fn summary_tsv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("group\tmetric\tn\tmean\tmin\tq1\tmedian\tq3\tmax\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.group, r.metric, r.n, r.mean, r.min, r.q1, r.median, r.q3, r.max
        );
    }
    s
}
