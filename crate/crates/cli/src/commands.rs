use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use udcvr::degradation::{default_gamma, degrade_sequence, make_psf, DegradationParams, PsfKind, PsfSpec};
use udcvr::gradcheck::{run_suite, SuiteOptions};
use udcvr::metrics::MetricReport;
use udcvr::training::{load_model, TrainConfig, Trainer};
use udcvr::{io, Branches, Error, FusionMode, QkvMode};

use crate::manifest::RunManifest;

pub const THREADS_ENV: &str = "UDCVR_THREADS";
pub const LOSS_CSV: &str = "loss.csv";
pub const DEGRADATION_FILE: &str = "degradation.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(Error),
    #[error("{0}")]
    Verification(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "udcvr",
    version,
    about = "Under-display-camera video degradation and restoration"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a degraded copy of a PNG frame sequence.
    Degrade(DegradeArgs),
    /// Train a restoration model on paired sequences.
    Train(TrainArgs),
    /// Restore every frame of a sequence with a trained checkpoint.
    Restore(RestoreArgs),
    /// Compute PSNR/SSIM of a predicted sequence against ground truth.
    Eval(EvalArgs),
    /// Verify every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "gaussian")]
    pub psf: PsfKind,
    /// Kernel side; defaults to the family preset.
    #[arg(long)]
    pub psf_size: Option<usize>,
    #[arg(long)]
    pub psf_sigma: Option<f64>,
    #[arg(long)]
    pub band_period: Option<usize>,
    #[arg(long)]
    pub band_amplitude: Option<f64>,
    #[arg(long)]
    pub haze_weight: Option<f64>,
    /// Light attenuation in (0, 1]; defaults per PSF family.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = udcvr::degradation::DEFAULT_LAMBDA_READ)]
    pub lread: f64,
    #[arg(long, default_value_t = udcvr::degradation::DEFAULT_LAMBDA_SHOT)]
    pub lshot: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with `degraded/` and `clean/` (or subdirectories that have them).
    #[arg(long)]
    pub data: PathBuf,
    /// Flat key=value training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    #[arg(long)]
    pub temporal_qkv: Option<QkvMode>,
    #[arg(long)]
    pub branches: Option<Branches>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; also capped by UDCVR_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Report directory; defaults to `--pred`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frame side of the end-to-end model check.
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    #[arg(long, default_value = "gradcheck")]
    pub out: PathBuf,
    /// Scale one op's backward rule by a factor, as `op:factor`.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Degrade(a) => degrade(a),
        Command::Train(a) => train(a),
        Command::Restore(a) => restore(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Data(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

/// Worker count: the request (or available cores), capped by UDCVR_THREADS.
pub fn thread_budget(requested: Option<usize>) -> CliResult<usize> {
    let mut n = requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let cap: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        n = n.min(cap);
    }
    Ok(n.max(1))
}

fn degrade(a: DegradeArgs) -> CliResult<()> {
    let start = Instant::now();
    let mut spec = PsfSpec::preset(a.psf);
    spec.size = a.psf_size.unwrap_or(spec.size);
    spec.sigma = a.psf_sigma.unwrap_or(spec.sigma);
    spec.band_period = a.band_period.unwrap_or(spec.band_period);
    spec.band_amplitude = a.band_amplitude.unwrap_or(spec.band_amplitude);
    spec.haze_weight = a.haze_weight.unwrap_or(spec.haze_weight);
    let gamma = a.gamma.unwrap_or(default_gamma(a.psf));
    let params = DegradationParams::new(make_psf(&spec)?, gamma, a.lread, a.lshot, a.seed)?;

    let clean = io::read_sequence(&a.input)?;
    let degraded = degrade_sequence(&clean, &params)?;
    io::write_sequence(&a.out, &degraded)?;
    params.save(&a.out.join(DEGRADATION_FILE))?;
    info!("degraded {} frames into {}", degraded.len(), a.out.display());

    let mut m = RunManifest::new("degrade");
    m.path("in", &a.input).path("out", &a.out);
    m.flag("psf", a.psf)
        .flag("psf_size", spec.size)
        .flag("psf_sigma", spec.sigma)
        .flag("band_period", spec.band_period)
        .flag("band_amplitude", spec.band_amplitude)
        .flag("haze_weight", spec.haze_weight)
        .flag("gamma", gamma)
        .flag("lread", a.lread)
        .flag("lshot", a.lshot)
        .flag("seed", a.seed);
    m.write(&a.out, start.elapsed())?;
    Ok(())
}

/// Loss rows already on disk up to and including `iteration`.
fn previous_losses(path: &Path, iteration: u64) -> String {
    let mut kept = String::from("iteration,loss\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let it = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if it.is_some_and(|it| it <= iteration) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    kept
}

fn train(a: TrainArgs) -> CliResult<()> {
    let start = Instant::now();
    if a.resume && (a.seed.is_some() || a.fusion.is_some() || a.temporal_qkv.is_some() || a.branches.is_some()) {
        return Err(CliError::Usage(
            "--resume keeps the checkpoint's config; only --iterations may change".into(),
        ));
    }
    let data = io::read_pairs(&a.data)?;
    let mut trainer = if a.resume {
        let mut t = Trainer::load_checkpoint(&a.out)?;
        if let Some(n) = a.iterations {
            t.cfg.iterations = n;
        }
        info!("resuming at iteration {}", t.iteration);
        t
    } else {
        let mut cfg = match &a.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
        cfg.seed = a.seed.unwrap_or(cfg.seed);
        cfg.model.fusion = a.fusion.unwrap_or(cfg.model.fusion);
        cfg.model.qkv_mode = a.temporal_qkv.unwrap_or(cfg.model.qkv_mode);
        cfg.model.branches = a.branches.unwrap_or(cfg.model.branches);
        Trainer::new(cfg)?
    };
    create_dir(&a.out)?;
    let csv_path = a.out.join(LOSS_CSV);
    let mut csv = previous_losses(&csv_path, trainer.iteration);
    let write_csv = |csv: &str| {
        fs::write(&csv_path, csv).map_err(|e| Error::Io {
            path: csv_path.clone(),
            source: e,
        })
    };
    let every = trainer.cfg.checkpoint_every;
    trainer.run(&data, |t, i, loss| {
        writeln!(csv, "{i},{loss}").expect("writing to a String");
        if i % 50 == 0 || i == t.cfg.iterations {
            info!("iteration {i}/{} loss {loss:.6}", t.cfg.iterations);
        }
        if every > 0 && i % every == 0 {
            t.save_checkpoint(&a.out)?;
            write_csv(&csv)?;
        }
        Ok(())
    })?;
    trainer.save_checkpoint(&a.out)?;
    write_csv(&csv)?;

    let mut m = RunManifest::new("train");
    m.path("data", &a.data).path("out", &a.out);
    if let Some(c) = &a.config {
        m.path("config", c);
    }
    m.flag("resume", a.resume);
    for key in trainer.cfg.to_kv().keys() {
        m.flag(key, trainer.cfg.to_kv().get_str(key).unwrap_or_default());
    }
    m.write(&a.out, start.elapsed())?;
    Ok(())
}

fn restore(a: RestoreArgs) -> CliResult<()> {
    let start = Instant::now();
    let (model, params) = load_model(&a.ckpt)?;
    let seq = io::read_sequence(&a.input)?;
    let k = model.config().frames;
    if seq.len() < k {
        return Err(CliError::Data(Error::Contract(format!(
            "sequence has {} frames but the model needs at least {k}",
            seq.len()
        ))));
    }
    let threads = thread_budget(a.threads)?;
    let restored = model.restore_sequence(&params, &seq, threads)?;
    io::write_sequence(&a.out, &restored)?;
    info!("restored {} frames with {threads} threads", restored.len());

    let mut m = RunManifest::new("restore");
    m.path("ckpt", &a.ckpt).path("in", &a.input).path("out", &a.out);
    m.flag("threads", threads);
    m.write(&a.out, start.elapsed())?;
    Ok(())
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TABLE: &str = "metrics.txt";

fn eval(a: EvalArgs) -> CliResult<()> {
    let start = Instant::now();
    let pred = io::read_sequence(&a.pred)?;
    let gt = io::read_sequence(&a.gt)?;
    let report = MetricReport::from_sequences(&pred, &gt)?;
    let out = a.out.clone().unwrap_or_else(|| a.pred.clone());
    create_dir(&out)?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::Data(Error::Io { path: p, source: e }))
    };
    write(METRICS_CSV, report.to_csv())?;
    write(METRICS_TABLE, report.to_string())?;
    print!("{report}");

    let mut m = RunManifest::new("eval");
    m.path("pred", &a.pred).path("gt", &a.gt).path("out", &out);
    m.write(&out, start.elapsed())?;
    Ok(())
}

fn parse_fault(s: &str) -> CliResult<(&'static str, f64)> {
    let (op, factor) = s
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("fault must look like `op:factor`, got `{s}`")))?;
    let factor: f64 = factor
        .parse()
        .map_err(|_| CliError::Usage(format!("bad fault factor `{factor}`")))?;
    Ok((Box::leak(op.to_string().into_boxed_str()), factor))
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let start = Instant::now();
    let opts = SuiteOptions {
        seed: a.seed,
        size: a.size,
        fault: a.inject_fault.as_deref().map(parse_fault).transpose()?,
    };
    let report = run_suite(&opts)?;
    print!("{report}");
    create_dir(&a.out)?;
    let path = a.out.join("gradcheck.txt");
    fs::write(&path, report.to_string()).map_err(|e| CliError::Data(Error::Io { path, source: e }))?;

    let mut m = RunManifest::new("gradcheck");
    m.path("out", &a.out);
    m.flag("seed", a.seed).flag("size", a.size);
    if let Some(f) = &a.inject_fault {
        m.flag("inject_fault", f);
    }
    m.write(&a.out, start.elapsed())?;

    let failed: Vec<&str> = report
        .cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "finite-difference mismatch in: {}",
            failed.join(", ")
        )))
    }
}
