//! The `dpse` command line: dataset synthesis, training, enhancement,
//! evaluation and gradient checks.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dpse_core::audio::{read_wav, write_wav, AudioBuffer};
use dpse_core::metrics::{eval_manifest, rows_tsv, summary_tsv};
use dpse_core::mixgen::{build_manifest, DatasetSpec, Manifest, Split};
use dpse_core::model::{run_grad_suite, ModelConfig, SuiteOptions, SAMPLE_RATE};
use dpse_core::nn::AdamConfig;
use dpse_core::train::{load_checkpoint, train_loop, TrainConfig, DEFAULT_LOSS_CAP_DB};

pub mod svg;

/// Exit code for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit code for malformed invocations.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for failures while running a valid invocation.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "dpse",
    version,
    about = "Masking speech enhancer: synthesize, train, enhance, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a mixture manifest from clean-speech and noise directories.
    Synth(SynthArgs),
    /// Train an enhancer on the train split of a manifest.
    Train(TrainArgs),
    /// Enhance one 16 kHz WAV file.
    Enhance(EnhanceArgs),
    /// Score a manifest split with SNR and STOI.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of clean speech WAV files, searched recursively.
    #[arg(long)]
    pub clean_dir: PathBuf,
    /// Directory of noise WAV files, searched recursively.
    #[arg(long)]
    pub noise_dir: PathBuf,
    /// Output manifest path.
    #[arg(long)]
    pub out_manifest: PathBuf,
    /// Comma-separated target SNRs in dB.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-10,-5,0,5,10"
    )]
    pub snr_grid: Vec<f64>,
    /// Train, validation and test ratios.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.2,0.1")]
    pub splits: Vec<f64>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// (noise, SNR) pairs drawn per clean file; all pairs when omitted.
    #[arg(long)]
    pub pairs_per_clean: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// win 512, hop 128, H 64, d 32, 4 heads, R 2, FFN 64.
    Default,
    /// win 16, hop 4, H 3, d 4, 2 heads, R 1, FFN 8.
    Tiny,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Base architecture [default: `default`, or the resumed checkpoint's];
    /// individual flags below override it.
    #[arg(long, value_enum)]
    pub config: Option<Preset>,
    /// STFT window length in samples.
    #[arg(long)]
    pub win_len: Option<usize>,
    /// STFT hop in samples.
    #[arg(long)]
    pub hop: Option<usize>,
    /// BGRU hidden size per direction.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Per-bin embedding width.
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Dual-path block repetitions.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Feed-forward width.
    #[arg(long)]
    pub d_ff: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            win_len: self.win_len.unwrap_or(base.win_len),
            hop: self.hop.unwrap_or(base.hop),
            hidden: self.hidden.unwrap_or(base.hidden),
            d_model: self.d_model.unwrap_or(base.d_model),
            heads: self.heads.unwrap_or(base.heads),
            repeats: self.repeats.unwrap_or(base.repeats),
            d_ff: self.d_ff.unwrap_or(base.d_ff),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest written by `synth`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Final checkpoint path.
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Total optimizer steps, counting resumed ones.
    #[arg(long, default_value_t = 100)]
    pub steps: u64,
    /// Seed for initialization, shuffling and crops.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from this checkpoint; its architecture is used unless overridden.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also write the step log to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Write `<out-ckpt>.stepNNNNNN` every this many steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Crop length in samples.
    #[arg(long, default_value_t = 32_000)]
    pub segment_len: usize,
    /// Pairs per optimizer step.
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Loss floor magnitude in dB.
    #[arg(long, default_value_t = DEFAULT_LOSS_CAP_DB)]
    pub loss_cap_db: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Adam first-moment decay.
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    /// Adam second-moment decay.
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    /// Adam denominator epsilon.
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Noisy 16 kHz mono WAV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Enhanced 16-bit PCM WAV.
    #[arg(long = "out")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; the unprocessed mixture is scored when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Manifest written by `synth`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Per-entry rows (TSV).
    #[arg(long)]
    pub out_rows: PathBuf,
    /// Grouped box statistics (TSV).
    #[arg(long)]
    pub out_summary: PathBuf,
    /// Output-SNR curves per noise tag and STOI boxes per SNR bin (SVG).
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Layer widths to check at.
    #[arg(long, value_enum, default_value = "tiny")]
    pub config: Preset,
    /// Perturb the named component's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    /// Probe at most this many coordinates per tensor.
    #[arg(long, hide = true)]
    pub per_param: Option<usize>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let [train, val, test] = a.splits[..] else {
        bail!(
            "--splits needs three comma-separated ratios, got {}",
            a.splits.len()
        );
    };
    let spec = DatasetSpec {
        clean_dir: a.clean_dir,
        noise_dir: a.noise_dir,
        snr_grid: a.snr_grid,
        splits: [train, val, test],
        pairs_per_clean: a.pairs_per_clean.unwrap_or(usize::MAX),
        master_seed: a.seed,
    };
    let manifest = build_manifest(&spec).context("building manifest")?;
    manifest
        .write(&a.out_manifest)
        .with_context(|| format!("writing {}", a.out_manifest.display()))?;
    println!("entries\t{}", manifest.entries.len());
    for split in Split::ALL {
        println!("{split}\t{}", manifest.count(split));
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let resume = match &a.resume {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let base = match (&resume, a.model.config) {
        (_, Some(preset)) => preset.config(),
        (Some(ck), None) => ck.config,
        (None, None) => ModelConfig::default(),
    };
    let mut cfg = TrainConfig::new(&a.manifest);
    cfg.model = a.model.apply(base);
    cfg.segment_len = a.segment_len;
    cfg.batch_size = a.batch_size;
    cfg.steps = a.steps;
    cfg.seed = a.seed;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.loss_cap_db = a.loss_cap_db;
    cfg.adam = AdamConfig {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.adam_eps,
    };
    cfg.checkpoint_path = Some(a.out_ckpt.clone());
    if let Some(ck) = &resume {
        ensure!(
            ck.step < cfg.steps,
            "checkpoint is already at step {}, nothing to do for --steps {}",
            ck.step,
            cfg.steps
        );
    }
    let mut log_file = match &a.log {
        Some(p) => {
            Some(fs::File::create(p).with_context(|| format!("creating log {}", p.display()))?)
        }
        None => None,
    };
    let mut log_err = None;
    let stdout = std::io::stdout();
    train_loop(&cfg, resume, |line| {
        let text = line.to_tsv();
        let _ = writeln!(stdout.lock(), "{text}");
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{text}") {
                log_err.get_or_insert(e);
            }
        }
    })
    .context("training")?;
    if let Some(e) = log_err {
        return Err(e).context("writing log");
    }
    Ok(())
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let model = ckpt.model()?;
    let input: AudioBuffer = read_wav(&a.input)?;
    ensure!(
        input.sample_rate == SAMPLE_RATE,
        "{} is {} Hz; expected {} Hz input",
        a.input.display(),
        input.sample_rate,
        SAMPLE_RATE
    );
    let (out, _) = model.enhance(&input)?;
    write_wav(&a.output, &out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let model = match &a.ckpt {
        Some(p) => Some(
            load_checkpoint(p)
                .with_context(|| format!("loading {}", p.display()))?
                .model()?,
        ),
        None => None,
    };
    let ev = eval_manifest(model.as_ref(), &manifest, a.split)?;
    fs::write(&a.out_rows, rows_tsv(&ev.rows))
        .with_context(|| format!("writing {}", a.out_rows.display()))?;
    fs::write(&a.out_summary, summary_tsv(&ev.summary))
        .with_context(|| format!("writing {}", a.out_summary.display()))?;
    if let Some(p) = &a.svg {
        fs::write(p, svg::figures(&ev.summary))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    println!("rows\t{}", ev.rows.len());
    for r in ev.summary.iter().filter(|r| r.group == "all") {
        println!("{}\t{:.6}", r.metric, r.mean);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = a.config.config();
    let opts = SuiteOptions {
        per_param: match (a.per_param, a.config) {
            (Some(k), _) => Some(k),
            (None, Preset::Tiny) => None,
            (None, Preset::Default) => Some(2),
        },
        corrupt: a.corrupt,
        input_secs: 0.1,
    };
    let entries = run_grad_suite(&cfg, &opts)?;
    println!("component\tmax_rel_error\tcoordinates\tkink_retries\tstatus\tworst");
    let mut failed = Vec::new();
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        let worst = match &e.report.worst {
            Some((name, i)) => format!(
                "{name}[{i}] analytic {:.6e} numeric {:.6e}",
                e.report.worst_pair.0, e.report.worst_pair.1
            ),
            None => "-".into(),
        };
        println!(
            "{}\t{:.3e}\t{}\t{}\t{status}\t{worst}",
            e.name, e.report.max_rel_error, e.report.coordinates, e.report.kink_retries
        );
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    ensure!(
        failed.is_empty(),
        "gradient check failed for {}",
        failed.join(", ")
    );
    Ok(())
}
