//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dpse_core::audio::{istft, read_wav, stft, write_wav};
use dpse_core::metrics::{stoi, SummaryRow};
use dpse_core::mixgen::{measured_snr, mix, Manifest};
use dpse_core::model::{ModelConfig, COMPONENTS, END_TO_END, SAMPLE_RATE};
use dpse_core::signals::{noise, speech_like, write_demo_corpus, DemoCorpus, NoiseKind};
use dpse_core::train::{initial_checkpoint, load_checkpoint, save_checkpoint, TrainConfig};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome>);

fn dpse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Result<String, String> {
    let out = dpse(args);
    if out.status.code() != Some(0) {
        return Err(format!(
            "`dpse {}` exited {:?}: {}",
            args.first().copied().unwrap_or(""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took < limit {
        Ok(took)
    } else {
        Err(format!("took {took:.1?}, limit {limit:?}"))
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Rows of `eval` output, keyed by column name.
fn eval_rows(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split('\t').map(String::from))
                .collect()
        })
        .collect()
}

fn summary_rows(path: &Path) -> Vec<SummaryRow> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            let f = |i: usize| c[i].parse::<f64>().unwrap();
            SummaryRow {
                group: c[0].into(),
                metric: c[1].into(),
                n: c[2].parse().unwrap(),
                mean: f(3),
                min: f(4),
                q1: f(5),
                median: f(6),
                q3: f(7),
                max: f(8),
            }
        })
        .collect()
}

fn dsp_reconstruction() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let x = noise(NoiseKind::White, 1000 + seed, 1.0, SAMPLE_RATE);
        let y =
            istft(&stft(&x, 512, 128).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        check(y.len() == x.len(), || {
            format!("seed {seed}: length {} vs {}", y.len(), x.len())
        })?;
        worst = worst.max(rel_l2(&y.samples, &x.samples));
    }
    check(worst < 1e-6, || format!("max relative L2 {worst:.3e}"))?;
    let took = within(Duration::from_secs(5), start)?;
    Ok(format!(
        "max relative L2 {worst:.3e} over 50 buffers in {took:.1?}"
    ))
}

fn mixer_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_rescaled = 0.0f64;
    let mut rescaled = 0;
    for pair in 0..20u64 {
        let clean = speech_like(pair, 1.0, SAMPLE_RATE);
        let kind = NoiseKind::ALL[pair as usize % NoiseKind::ALL.len()];
        let n = noise(kind, 500 + pair, 1.5, SAMPLE_RATE);
        for target in [-10.0, -5.0, 0.0, 5.0, 10.0] {
            let m = mix(&clean, &n, target, (pair as usize * 977) % n.len())
                .map_err(|e| e.to_string())?;
            let err = (measured_snr(&m.clean, &m.noise).map_err(|e| e.to_string())? - target).abs();
            if m.rescale_gain == 1.0 {
                worst = worst.max(err);
            } else {
                rescaled += 1;
                worst_rescaled = worst_rescaled.max(err);
            }
        }
    }
    check(worst < 1e-6, || format!("max error {worst:.3e} dB"))?;
    check(worst_rescaled < 1e-2, || {
        format!("max rescaled error {worst_rescaled:.3e} dB")
    })?;
    let took = within(Duration::from_secs(5), start)?;
    Ok(format!(
        "max error {worst:.2e} dB, {rescaled} rescaled mixtures max {worst_rescaled:.2e} dB, {took:.1?}"
    ))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let tiny = ModelConfig::tiny();
    check(
        (
            tiny.win_len,
            tiny.num_bins(),
            tiny.hidden,
            tiny.d_model,
            tiny.heads,
            tiny.repeats,
        ) == (16, 9, 3, 4, 2, 1),
        || format!("tiny geometry {tiny:?}"),
    )?;
    let text = run_ok(&["gradcheck", "--config", "tiny"])?;
    let mut worst = (String::new(), 0.0f64);
    for name in COMPONENTS.iter().chain([&END_TO_END]) {
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("{name}\t")))
            .ok_or_else(|| format!("{name} not reported"))?;
        let err: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        check(err < 1e-4, || {
            format!("{name} max relative error {err:.3e}")
        })?;
        if err >= worst.1 {
            worst = (name.to_string(), err);
        }
    }
    let took = within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{} checks, worst {} {:.2e}, {took:.1?}",
        COMPONENTS.len() + 1,
        worst.0,
        worst.1
    ))
}

fn identity_mask(dir: &Path) -> Outcome {
    let start = Instant::now();
    let mut ckpt =
        initial_checkpoint(&TrainConfig::new(dir.join("unused.tsv"))).map_err(|e| e.to_string())?;
    ckpt.params
        .value_mut("mask.b")
        .map_err(|e| e.to_string())?
        .fill(20.0);
    let path = dir.join("identity.ckpt");
    save_checkpoint(&path, &ckpt).map_err(|e| e.to_string())?;

    let clean = speech_like(21, 1.5, SAMPLE_RATE);
    let n = noise(NoiseKind::Babble, 22, 1.5, SAMPLE_RATE);
    let noisy = mix(&clean, &n, 0.0, 0).map_err(|e| e.to_string())?.mixture;
    let input = dir.join("noisy.wav");
    let output = dir.join("enhanced.wav");
    write_wav(&input, &noisy).map_err(|e| e.to_string())?;
    run_ok(&[
        "enhance",
        "--ckpt",
        s(&path),
        "--in",
        s(&input),
        "--out",
        s(&output),
    ])?;
    let x = read_wav(&input).map_err(|e| e.to_string())?;
    let y = read_wav(&output).map_err(|e| e.to_string())?;
    check(x.len() == y.len(), || "length changed".into())?;
    let err = rel_l2(&y.samples, &x.samples);
    check(err < 1e-3, || format!("relative L2 {err:.3e}"))?;
    let took = within(Duration::from_secs(10), start)?;
    Ok(format!("relative L2 {err:.2e}, {took:.1?}"))
}

/// One clean file and one noise file at 0 dB; returns the manifest path.
fn single_pair(dir: &Path) -> Result<PathBuf, String> {
    let clean_dir = dir.join("clean/spk00");
    let noise_dir = dir.join("noise/white");
    fs::create_dir_all(&clean_dir).map_err(|e| e.to_string())?;
    fs::create_dir_all(&noise_dir).map_err(|e| e.to_string())?;
    write_wav(
        clean_dir.join("utt00.wav"),
        &speech_like(31, 2.0, SAMPLE_RATE),
    )
    .map_err(|e| e.to_string())?;
    write_wav(
        noise_dir.join("white_00.wav"),
        &noise(NoiseKind::White, 32, 2.0, SAMPLE_RATE),
    )
    .map_err(|e| e.to_string())?;
    let manifest = dir.join("pair.tsv");
    run_ok(&[
        "synth",
        "--clean-dir",
        s(&dir.join("clean")),
        "--noise-dir",
        s(&dir.join("noise")),
        "--out-manifest",
        s(&manifest),
        "--snr-grid",
        "0",
        "--splits",
        "1,0,0",
    ])?;
    Ok(manifest)
}

const OVERFIT_STEPS: &str = "40";

fn overfit(dir: &Path) -> Outcome {
    let start = Instant::now();
    let manifest = single_pair(dir)?;
    let ckpt = dir.join("overfit.ckpt");
    let log = dir.join("overfit.log");
    run_ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out-ckpt",
        s(&ckpt),
        "--log",
        s(&log),
        "--steps",
        OVERFIT_STEPS,
        "--segment-len",
        "32000",
        "--lr",
        "1e-3",
    ])?;
    let losses: Vec<f64> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    let (first, last) = (losses[0], *losses.last().unwrap());
    check(last < first, || format!("loss {first:.3} -> {last:.3}"))?;

    let rows = dir.join("overfit_rows.tsv");
    run_ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--split",
        "train",
        "--out-rows",
        s(&rows),
        "--out-summary",
        s(&dir.join("overfit_summary.tsv")),
    ])?;
    let row = &eval_rows(&rows)[0];
    let input: f64 = row["input_snr_db"].parse().unwrap();
    let output: f64 = row["output_snr_db"].parse().unwrap();
    check(output >= input + 5.0, || {
        format!("SNR {input:.2} -> {output:.2} dB")
    })?;
    let took = within(Duration::from_secs(15 * 60), start)?;
    Ok(format!(
        "{OVERFIT_STEPS} steps, loss {first:.2} -> {last:.2} dB, SNR {input:.2} -> {output:.2} dB, {took:.1?}"
    ))
}

fn stoi_properties() -> Outcome {
    let start = Instant::now();
    let err = |e: dpse_core::metrics::MetricsError| e.to_string();
    let clean = speech_like(41, 2.0, SAMPLE_RATE);
    let selfscore = stoi(&clean, &clean).map_err(err)?;
    check((selfscore - 1.0).abs() < 1e-6, || {
        format!("stoi(x, x) = {selfscore}")
    })?;

    let n = noise(NoiseKind::White, 42, 2.0, SAMPLE_RATE);
    let mut scores = Vec::new();
    let mut gain_dev = 0.0f64;
    for target in [10.0, 0.0, -10.0] {
        let m = mix(&clean, &n, target, 0).map_err(|e| e.to_string())?;
        let base = stoi(&m.clean, &m.mixture).map_err(err)?;
        for g in [0.1, 0.5, 3.0, 20.0] {
            gain_dev =
                gain_dev.max((stoi(&m.clean, &m.mixture.scaled(g)).map_err(err)? - base).abs());
        }
        scores.push(base);
    }
    check(gain_dev < 1e-9, || format!("gain deviation {gain_dev:.3e}"))?;
    check(scores[0] > scores[1] && scores[1] > scores[2], || {
        format!("scores {scores:?}")
    })?;
    let took = within(Duration::from_secs(30), start)?;
    Ok(format!(
        "self {selfscore:.9}, gain deviation {gain_dev:.1e}, +10/0/-10 dB {:.3}/{:.3}/{:.3}, {took:.1?}",
        scores[0], scores[1], scores[2]
    ))
}

fn determinism(dir: &Path) -> Outcome {
    let start = Instant::now();
    let (clean, noise_dir) = write_demo_corpus(&dir.join("corpus"), &DemoCorpus::default())
        .map_err(|e| e.to_string())?;
    let synth = |out: &Path| {
        run_ok(&[
            "synth",
            "--clean-dir",
            s(&clean),
            "--noise-dir",
            s(&noise_dir),
            "--out-manifest",
            s(out),
            "--seed",
            "13",
        ])
    };
    let (m1, m2) = (dir.join("m1.tsv"), dir.join("m2.tsv"));
    synth(&m1)?;
    synth(&m2)?;
    check(fs::read(&m1).unwrap() == fs::read(&m2).unwrap(), || {
        "manifests differ".into()
    })?;

    let train = |out: &Path, log: &Path, resume: Option<&Path>| {
        let mut args = vec![
            "train",
            "--manifest",
            s(&m1),
            "--out-ckpt",
            s(out),
            "--log",
            s(log),
            "--steps",
            "6",
            "--checkpoint-every",
            "3",
            "--segment-len",
            "4000",
            "--batch-size",
            "2",
            "--seed",
            "4",
            "--win-len",
            "64",
            "--hop",
            "16",
            "--hidden",
            "4",
            "--d-model",
            "4",
            "--heads",
            "2",
            "--repeats",
            "1",
            "--d-ff",
            "8",
        ];
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        run_ok(&args)
    };
    let full = dir.join("full.ckpt");
    let full_log = dir.join("full.log");
    train(&full, &full_log, None)?;
    let mid = dir.join("full.ckpt.step000003");
    let resumed = dir.join("resumed.ckpt");
    let resumed_log = dir.join("resumed.log");
    train(&resumed, &resumed_log, Some(&mid))?;
    check(
        fs::read(&full).unwrap() == fs::read(&resumed).unwrap(),
        || "resumed checkpoint differs".into(),
    )?;
    let losses = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.split('\t').take(2).collect::<Vec<_>>().join("\t"))
            .collect()
    };
    check(losses(&full_log)[3..] == losses(&resumed_log)[..], || {
        "resumed losses differ".into()
    })?;

    let loaded = load_checkpoint(&full).map_err(|e| e.to_string())?;
    let again = dir.join("again.ckpt");
    save_checkpoint(&again, &loaded).map_err(|e| e.to_string())?;
    check(
        fs::read(&full).unwrap() == fs::read(&again).unwrap(),
        || "save/load/save differs".into(),
    )?;
    let took = within(Duration::from_secs(5 * 60), start)?;
    Ok(format!(
        "manifest, resume and checkpoint bytes identical, {took:.1?}"
    ))
}

const TOY_STEPS: &str = "300";
const TOY_MODEL: [&str; 14] = [
    "--win-len",
    "512",
    "--hop",
    "128",
    "--hidden",
    "8",
    "--d-model",
    "4",
    "--heads",
    "2",
    "--repeats",
    "1",
    "--d-ff",
    "8",
];

fn toy_reproduction(dir: &Path) -> Outcome {
    let start = Instant::now();
    let (clean, noise_dir) = write_demo_corpus(&dir.join("corpus"), &DemoCorpus::default())
        .map_err(|e| e.to_string())?;
    let manifest = dir.join("toy.tsv");
    run_ok(&[
        "synth",
        "--clean-dir",
        s(&clean),
        "--noise-dir",
        s(&noise_dir),
        "--out-manifest",
        s(&manifest),
        "--seed",
        "1",
    ])?;
    let m = Manifest::read(&manifest).map_err(|e| e.to_string())?;
    let tags: std::collections::BTreeSet<&str> =
        m.entries.iter().map(|e| e.noise_tag.as_str()).collect();
    check(m.entries.len() >= 10 && tags.len() >= 2, || {
        "manifest too small".into()
    })?;

    let ckpt = dir.join("toy.ckpt");
    let mut args = vec![
        "train",
        "--manifest",
        s(&manifest),
        "--out-ckpt",
        s(&ckpt),
        "--steps",
        TOY_STEPS,
        "--segment-len",
        "16000",
        "--lr",
        "3e-3",
    ];
    args.extend(TOY_MODEL);
    run_ok(&args)?;

    let rows = dir.join("rows.tsv");
    let summary = dir.join("summary.tsv");
    let svg = dir.join("figures.svg");
    run_ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--split",
        "test",
        "--out-rows",
        s(&rows),
        "--out-summary",
        s(&summary),
        "--svg",
        s(&svg),
    ])?;
    let summary = summary_rows(&summary);
    let mean = |metric: &str| {
        summary
            .iter()
            .find(|r| r.group == "snr=0" && r.metric == metric)
            .map(|r| r.mean)
            .ok_or_else(|| format!("no snr=0 {metric} group"))
    };
    let (input, output) = (mean("input_snr_db")?, mean("output_snr_db")?);
    check(output > input, || {
        format!("0 dB test mean SNR {input:.2} -> {output:.2} dB")
    })?;

    let test_tags: std::collections::BTreeSet<String> = eval_rows(&rows)
        .iter()
        .map(|r| r["noise_tag"].clone())
        .collect();
    let fig = fs::read_to_string(&svg).unwrap();
    check(fig.matches("<polyline").count() == test_tags.len(), || {
        "one curve per tag expected".into()
    })?;
    let bins = summary
        .iter()
        .filter(|r| r.metric == "stoi_out" && r.group.starts_with("snr="))
        .count();
    check(bins > 0 && fig.matches("data-bin=").count() == bins, || {
        "one box per SNR bin expected".into()
    })?;
    let took = start.elapsed();
    Ok(format!(
        "{TOY_STEPS} steps, 0 dB test mean SNR {input:.2} -> {output:.2} dB, {} curves, {bins} boxes, {took:.1?}",
        test_tags.len()
    ))
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let sub = |name: &str| {
        let p = dir.path().join(name);
        fs::create_dir_all(&p).unwrap();
        p
    };
    let criteria: Vec<Criterion> = vec![
        ("1 dsp reconstruction", Box::new(dsp_reconstruction)),
        ("2 mixer exactness", Box::new(mixer_exactness)),
        ("3 gradient suite", Box::new(gradient_suite)),
        (
            "4 identity mask",
            Box::new({
                let d = sub("identity");
                move || identity_mask(&d)
            }),
        ),
        (
            "5 overfit smoke",
            Box::new({
                let d = sub("overfit");
                move || overfit(&d)
            }),
        ),
        ("6 stoi properties", Box::new(stoi_properties)),
        (
            "7 determinism and formats",
            Box::new({
                let d = sub("determinism");
                move || determinism(&d)
            }),
        ),
        (
            "8 toy training and evaluation",
            Box::new({
                let d = sub("toy");
                move || toy_reproduction(&d)
            }),
        ),
    ];
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
