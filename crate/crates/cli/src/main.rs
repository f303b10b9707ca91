mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Usage problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(yvector::Error),
}

impl CliError {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        CliError::Usage(msg.to_string())
    }
}

impl From<yvector::Error> for CliError {
    fn from(e: yvector::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser)]
#[command(name = "yvec", version, about = "Raw-waveform speaker embeddings: synth, train, embed, eval, cfr")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus with a trial list.
    Synth(SynthArgs),
    /// Train a model on a corpus manifest.
    Train(TrainArgs),
    /// Extract one embedding per manifest utterance.
    Embed(EmbedArgs),
    /// Score a trial list and report EER, minDCF and a bootstrap interval.
    Eval(EvalArgs),
    /// Cumulative frequency response of the first-layer filters.
    Cfr(CfrArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 20)]
    utts: usize,
    #[arg(long, default_value_t = 5.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of trials to draw (half target, half nontarget).
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by commands that read a run configuration.
#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_seconds: Option<f64>,
    #[arg(long)]
    utterances_per_epoch: Option<usize>,
    #[arg(long)]
    save_every: Option<usize>,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Input length after center crop / tiling.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Binary embedding table written by `embed`.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    p_target: Option<f64>,
}

#[derive(Args)]
struct CfrArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Expected preset; a checkpoint with a different geometry is rejected.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    band_lo: f64,
    #[arg(long, default_value_t = 8000.0)]
    band_hi: f64,
}

fn base_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(o) = &c.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => run::synth(a.speakers, a.utts, a.seconds, a.seed, a.trials, &a.out),
        Command::Train(a) => {
            let mut cfg = base_config(&a.common)?;
            if a.manifest.is_some() {
                cfg.manifest = a.manifest;
            }
            if let Some(p) = a.preset {
                cfg.preset = p;
                cfg.encoder = None;
            }
            if let Some(v) = a.width_divisor {
                cfg.width_divisor = v;
            }
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr0 = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.crop_seconds {
                cfg.train.crop_seconds = v;
            }
            if let Some(v) = a.utterances_per_epoch {
                cfg.train.utterances_per_epoch = v;
            }
            if let Some(v) = a.save_every {
                cfg.save_every = v;
            }
            run::train(cfg.finish()?, a.resume.as_deref())
        }
        Command::Embed(a) => {
            let mut cfg = base_config(&a.common)?;
            if a.checkpoint.is_some() {
                cfg.checkpoint = a.checkpoint;
            }
            if a.manifest.is_some() {
                cfg.manifest = a.manifest;
            }
            if let Some(v) = a.samples {
                cfg.eval_samples = v;
            }
            run::embed(cfg.finish()?)
        }
        Command::Eval(a) => {
            let mut cfg = base_config(&a.common)?;
            if a.trials.is_some() {
                cfg.trials = a.trials;
            }
            if let Some(v) = a.resamples {
                cfg.bootstrap_resamples = v;
            }
            if let Some(v) = a.confidence {
                cfg.confidence = v;
            }
            if let Some(v) = a.p_target {
                cfg.dcf.p_target = v;
            }
            run::eval(cfg.finish()?, &a.embeddings)
        }
        Command::Cfr(a) => {
            let mut cfg = base_config(&a.common)?;
            if a.checkpoint.is_some() {
                cfg.checkpoint = a.checkpoint;
            }
            run::cfr(cfg.finish()?, a.preset.as_deref(), a.band_lo, a.band_hi)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
