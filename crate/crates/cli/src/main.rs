//! `kwsnet`: generate synthetic corpora, train, evaluate, spot keywords and
//! export sweep tables.
//!
//! Exit codes: 0 success, 2 input or parse error, 3 missing artifact,
//! 4 numeric divergence, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kwsnet_core::trainer::RunConfig;
use kwsnet_core::KwsError;

#[derive(Parser)]
#[command(name = "kwsnet", version, about = "Zero-shot audio-visual keyword spotting")]
struct Cli {
    /// Worker threads for data-parallel work (1 keeps runs deterministic and cheap).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// Flat key=value config file (see `dump-config`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for corpus generation, model init, batching and eval noise.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    V,
    A,
    Av,
}

#[derive(Args, Clone)]
pub struct Models {
    /// Visual checkpoint file or training directory.
    #[arg(long)]
    pub visual: Option<PathBuf>,
    /// Audio checkpoint file or training directory.
    #[arg(long)]
    pub audio: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "v")]
    pub modality: ModalityArg,
    /// Audio weight when fusing with video.
    #[arg(long, default_value_t = 0.5)]
    pub fusion_weight: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Evaluate the last checkpoints on a split and write the metrics report.
    Eval(EvalArgs),
    /// Spot one keyword in one clip.
    Spot(SpotArgs),
    /// Evaluate an SNR or fusion-weight grid.
    Sweep(SweepArgs),
    /// Print every setting as key=value lines.
    DumpConfig(DumpArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory (must not exist yet).
    #[arg(long)]
    pub out: PathBuf,
    /// CMUdict-format lexicon; defaults to the bundled one.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub train_vocab: Option<usize>,
    #[arg(long)]
    pub test_vocab: Option<usize>,
    /// Shortest keyword in phonemes.
    #[arg(long)]
    pub min_np: Option<usize>,
    /// Multi-word training clips.
    #[arg(long)]
    pub clips: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory for checkpoints and loss.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "v")]
    pub modality: ModalityArg,
    /// Start from the weights of this checkpoint (e.g. after pretraining).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Ignore keyword boundaries in the loss.
    #[arg(long)]
    pub no_loc: bool,
    /// Drop the keyword shortcut into the detector.
    #[arg(long)]
    pub no_shortcut: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub models: Models,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Word list to query; defaults to the split's keywords.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Count a positive clip as found wherever the peak lies.
    #[arg(long)]
    pub no_localization: bool,
    /// Mix babble into the audio at this SNR (dB).
    #[arg(long, allow_negative_numbers = true)]
    pub snr: Option<f64>,
    /// Report CSV path; printed to stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-pair score dump (TSV) for the newest checkpoint.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Args)]
pub struct SpotArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub models: Models,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub clip: String,
    /// Word or phrase.
    #[arg(long)]
    pub keyword: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub snr: Option<f64>,
    /// Per-frame keyword probability, as CSV.
    #[arg(long)]
    pub trace_csv: Option<PathBuf>,
    /// Sigmoid of the similarity map (frames x phonemes), as CSV.
    #[arg(long)]
    pub map_csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub models: Models,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub no_localization: bool,
    /// SNR grid `from:to:step` in dB.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "fusion", required_unless_present = "fusion")]
    pub snr: Option<String>,
    /// Audio-weight grid `from:to:step`.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Audio SNR used during a fusion sweep.
    #[arg(long, allow_negative_numbers = true)]
    pub at_snr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: Common,
}

/// Defaults, then the config file, then `--set` overrides.
pub fn load_config(c: &Common) -> kwsnet_core::Result<RunConfig> {
    let mut rc = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => KwsError::Missing(p.display().to_string()),
                _ => KwsError::Io(e),
            })?;
            RunConfig::from_kv(&text)?
        }
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| KwsError::Config(format!("override `{o}` is not key=value")))?;
        rc.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        rc.model.seed = s;
        rc.train.seed = s;
    }
    Ok(rc)
}

fn exit_code(e: &KwsError) -> u8 {
    match e {
        KwsError::Missing(_) => 3,
        KwsError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        KwsError::Numeric(_) => 4,
        KwsError::Dimension { .. } | KwsError::Alignment { .. } | KwsError::Io(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    kwsnet_core::par::init_threads(cli.threads.max(1));
    let res = match cli.cmd {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Spot(a) => commands::spot(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::DumpConfig(a) => load_config(&a.common).map(|rc| print!("{}", rc.to_kv())),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
