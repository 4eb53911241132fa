//! `dvd`: synthesize datasets, match references, train, dehaze, evaluate and
//! check gradients.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dvd_core::error::Error;
use dvd_core::flow::FlowKind;
use dvd_core::io::{load_sequence, FrameFormat, DEFAULT_PATTERN};
use dvd_core::pipeline::dataset::{synthesize, Dataset, SynthConfig};
use dvd_core::pipeline::experiments::{ablation, format_table, kernel_sweep};
use dvd_core::pipeline::gradcheck::{gradcheck_suite, GradcheckConfig};
use dvd_core::pipeline::matching::{match_dataset, read_table, MatchConfig};
use dvd_core::pipeline::run::{
    dehaze_frames, eval_frames, load_checkpoint, run_training, training_sets, write_frames, DehazeJob, LOG_FILE,
};
use dvd_core::pipeline::{TrainConfig, Trainer};

const SEED_VAR: &str = "DVD_SEED";

/// Reported with the numerical-failure exit code.
#[derive(Debug, thiserror::Error)]
#[error("gradient check failed for {0}")]
struct GradientMismatch(String);

/// Every section is optional; missing fields take their defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct Config {
    synth: SynthConfig,
    #[serde(rename = "match")]
    matching: MatchConfig,
    train: TrainConfig,
    gradcheck: GradcheckConfig,
}

#[derive(Parser)]
#[command(name = "dvd", version, about = "Non-aligned video dehazing toolkit")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration (also read from DVD_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic hazy/clear dataset.
    Synth(SynthArgs),
    /// Match every hazy frame to clear reference frames.
    Match(MatchArgs),
    /// Train the network on matched pairs.
    Train(TrainArgs),
    /// Dehaze a directory of frames with a checkpoint.
    Dehaze(DehazeArgs),
    /// Score dehazed frames against clear frames.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck(GradcheckArgs),
    /// Toy-scale kernel sweep or module ablation on the standard scene.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    format: Option<FrameFormat>,
}

#[derive(Args)]
struct MatchArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Random references instead of matching.
    #[arg(long)]
    unpaired: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory of match tables written by `dvd match`.
    #[arg(long)]
    matches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    flow: Option<FlowKind>,
}

#[derive(Args)]
struct DehazeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of hazy frames.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "blockmatch")]
    flow: FlowKind,
    /// Flows for `--flow truth` or `--flow file`.
    #[arg(long)]
    flow_dir: Option<PathBuf>,
    #[arg(long, default_value = "png")]
    format: FrameFormat,
    #[arg(long, default_value = DEFAULT_PATTERN)]
    pattern: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    outputs: PathBuf,
    #[arg(long)]
    clear: PathBuf,
    #[arg(long, default_value = "png")]
    format: FrameFormat,
    /// A match table to score against `--truth`.
    #[arg(long, requires = "truth")]
    table: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Window sizes to compare; ignored with `--ablation`.
    #[arg(long, value_delimiter = ',', default_value = "3,5,7,9")]
    kernels: Vec<usize>,
    /// Compare basic, +FCAS and +FCAS+DCAF instead.
    #[arg(long)]
    ablation: bool,
    #[arg(long)]
    iterations: Option<usize>,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(Config::default()),
    }
}

fn seed_override(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_VAR) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_VAR}={v} is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

impl Config {
    fn reseed(&mut self, seed: u64) {
        self.synth.scene.seed = seed;
        self.synth.misalignment.seed = seed;
        self.matching.seed = seed;
        self.train.seed = seed;
        self.train.net.seed = seed;
    }
}

/// Prints one JSON value per line on stdout.
fn emit(value: &impl Serialize) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn synth(cfg: Config, args: SynthArgs) -> anyhow::Result<()> {
    let mut s = cfg.synth;
    if let Some(p) = args.pairs {
        s.pairs = p;
    }
    if let Some(b) = args.beta {
        s.scene.beta = b;
    }
    if let Some(f) = args.format {
        s.format = f;
    }
    let manifest = synthesize(&s, &args.out)?;
    log::info!("wrote {} pairs to {}", manifest.pairs.len(), args.out.display());
    emit(&manifest)
}

fn matching(cfg: Config, args: MatchArgs) -> anyhow::Result<()> {
    let mut m = cfg.matching;
    m.unpaired |= args.unpaired;
    let ds = Dataset::open(&args.dataset)?;
    let summary = match_dataset(&ds, &m, &args.out)?;
    let path = args.out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    emit(&summary)
}

/// Sends training log lines to the log file and stdout.
struct Tee<A, B>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

fn train(cfg: Config, args: TrainArgs) -> anyhow::Result<()> {
    let mut t = cfg.train;
    if let Some(i) = args.iterations {
        t.iterations = i;
    }
    if let Some(lr) = args.lr {
        t.lr = lr;
        t.disc_lr = lr;
    }
    if let Some(k) = args.kernel {
        t.net.kernel = k;
    }
    if let Some(l) = args.levels {
        t.net.levels = l;
    }
    if let Some(f) = args.flow {
        t.flow = f;
    }
    let ds = Dataset::open(&args.dataset)?;
    let mut trainer = Trainer::new(t.clone())?;
    let sets = training_sets(&ds, &args.matches, &t, &trainer.embedder)?;
    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join(LOG_FILE);
    let file = io::BufWriter::new(fs::File::create(&log_path)?);
    let mut log = Tee(file, io::stdout().lock());
    let summary = run_training(&mut trainer, &sets, &args.out, &mut log);
    log.flush()?;
    drop(log);
    let summary = summary?;
    log::info!("trained {} steps, checkpoint in {}", summary.steps, args.out.display());
    Ok(())
}

fn dehaze(args: DehazeArgs) -> anyhow::Result<()> {
    let (params, meta) = load_checkpoint(&args.checkpoint)?;
    let mut job = DehazeJob::new(args.frames, args.format, args.flow);
    job.pattern = args.pattern;
    match args.flow {
        FlowKind::Truth => job.truth_flow_dir = args.flow_dir,
        _ => job.flow_dir = args.flow_dir,
    }
    let out = dehaze_frames(&params, &meta, &job)?;
    write_frames(&args.out, &out, args.format)?;
    log::info!("wrote {} frames to {}", out.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let outputs = load_sequence(&args.outputs, DEFAULT_PATTERN, args.format)?;
    let clear = load_sequence(&args.clear, DEFAULT_PATTERN, args.format)?;
    let tables = match (&args.table, &args.truth) {
        (Some(t), Some(u)) => Some((read_table(t)?, read_table(u)?)),
        _ => None,
    };
    let report = eval_frames(&outputs, &clear, tables.as_ref().map(|(a, b)| (a, b)))?;
    if let Some(p) = &args.report {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    emit(&report)
}

fn gradcheck(cfg: Config, args: GradcheckArgs) -> anyhow::Result<()> {
    let mut g = cfg.gradcheck;
    if let Some(s) = args.seeds {
        g.seeds = s;
    }
    let checks = gradcheck_suite(&g)?;
    for c in &checks {
        emit(c)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.op.as_str()).collect();
    if !failed.is_empty() {
        return Err(GradientMismatch(failed.join(", ")).into());
    }
    Ok(())
}

fn sweep(cfg: Config, args: SweepArgs) -> anyhow::Result<()> {
    let mut t = cfg.train;
    if let Some(i) = args.iterations {
        t.iterations = i;
    }
    let scores = if args.ablation {
        ablation(&t, &cfg.synth)?
    } else {
        if args.kernels.is_empty() {
            bail!("no kernel sizes given");
        }
        kernel_sweep(&args.kernels, &t, &cfg.synth)?
    };
    for s in &scores {
        emit(s)?;
    }
    eprint!("{}", format_table(&scores));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = seed_override(cli.seed)? {
        cfg.reseed(s);
    }
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Match(a) => matching(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Dehaze(a) => dehaze(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(cfg, a),
        Command::Sweep(a) => sweep(cfg, a),
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let numerical = e.chain().any(|c| {
                c.downcast_ref::<Error>().is_some_and(Error::is_numerical) || c.is::<GradientMismatch>()
            });
            log::error!("{e:#}");
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
