mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use structalign::selection::StrategyKind;

pub const SEED_ENV: &str = "STRUCTALIGN_SEED";

/// Structure-aligned protein language models at desk scale: synthetic
/// corpora, structure tokenizer, reference and alignment training, probes
/// and zero-shot scoring.
#[derive(Debug, Parser)]
#[command(name = "structalign", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (JSON lines).
    Gen(GenArgs),
    /// Fit the structure-token codebook to a corpus.
    FitTokenizer(FitTokenizerArgs),
    /// Train the reference model on the high-quality subset of a corpus.
    TrainRef(TrainRefArgs),
    /// Run structure alignment training.
    Align(AlignArgs),
    /// Train and score a probe on frozen encoder features.
    Probe(ProbeArgs),
    /// Per-protein pseudo-perplexity (CSV).
    Ppl(PplArgs),
    /// Zero-shot mutation scores, with Spearman correlation when labels are given.
    Score(ScoreArgs),
    /// Train and evaluate a grid of ablation runs.
    Ablate(AblateArgs),
    /// Write per-residue encoder embeddings with labels (CSV).
    Export(ExportArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of proteins.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 24)]
    pub len_min: usize,
    #[arg(long, default_value_t = 64)]
    pub len_max: usize,
    /// Sequence/structure coupling in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    pub coupling: f64,
    /// Fraction of records whose coordinates are corrupted.
    #[arg(long, default_value_t = 0.0)]
    pub noise_frac: f64,
    /// Standard deviation of the coordinate noise (Å).
    #[arg(long, default_value_t = 2.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.4)]
    pub helix_frac: f64,
    #[arg(long, default_value_t = 0.3)]
    pub strand_frac: f64,
    /// Width of the structure embeddings.
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    /// Neighbours seen by the structure encoder.
    #[arg(long, default_value_t = 8)]
    pub k_neighbors: usize,
    /// Pull of random-coil steps toward the chain centroid.
    #[arg(long, default_value_t = 0.35)]
    pub compactness: f64,
    /// Seed for all randomness (overridden by STRUCTALIGN_SEED).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitTokenizerArgs {
    /// Corpus file (JSON lines).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Codebook size.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Seed for all randomness (overridden by STRUCTALIGN_SEED).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Codebook file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the corpus with structure tokens filled in.
    #[arg(long)]
    pub tokenized_out: Option<PathBuf>,
}

/// Training settings shared by `train-ref` and `align`. Flags given on the
/// command line override values from `--config`.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Base training configuration (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup_epochs: usize,
    /// Peak learning rate of the encoder.
    #[arg(long, default_value_t = 1e-4)]
    pub lr_backbone: f64,
    /// Peak learning rate of the heads and projections.
    #[arg(long, default_value_t = 1e-3)]
    pub lr_heads: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Records per batch.
    #[arg(long, default_value_t = 16)]
    pub batch_records: usize,
    /// Sequence length cap (training windows and model positions).
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
    /// Fraction of records held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Width of the shared alignment space.
    #[arg(long, default_value_t = 32)]
    pub proj_dim: usize,
    /// Structure-token codebook size.
    #[arg(long, default_value_t = 20)]
    pub struct_vocab: usize,
    /// Seed for all randomness (overridden by STRUCTALIGN_SEED).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainRefArgs {
    /// Corpus file (JSON lines).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Keep records with resolution below this (Å).
    #[arg(long, default_value_t = 2.0)]
    pub res_max: f64,
    /// Keep records with R-free below this.
    #[arg(long, default_value_t = 0.20)]
    pub rfree_max: f64,
    /// Codebook used to tokenize records without structure tokens; fit to
    /// the corpus when absent.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Excess,
    LossLarge,
    LossSmall,
    Full,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Excess => StrategyKind::Excess,
            StrategyArg::LossLarge => StrategyKind::LossLarge,
            StrategyArg::LossSmall => StrategyKind::LossSmall,
            StrategyArg::Full => StrategyKind::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Corpus file (JSON lines).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pretrained checkpoint to start from; its heads are re-initialized.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Reference model (checkpoint file or train-ref run directory).
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Codebook for records without structure tokens (defaults to the one
    /// saved with the reference run, else fit to the corpus).
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Residue selection strategy.
    #[arg(long, value_enum, default_value_t = StrategyArg::Excess)]
    pub strategy: StrategyArg,
    /// Fraction of residue losses kept per family.
    #[arg(long, default_value_t = 0.8)]
    pub rho: f64,
    /// Weight of the latent (contrastive) task.
    #[arg(long, default_value_t = 0.5)]
    pub gamma_latent: f64,
    /// Weight of the physical (structure-token) task.
    #[arg(long, default_value_t = 0.5)]
    pub gamma_physical: f64,
    /// Keep every residue and skip the selection code entirely.
    #[arg(long)]
    pub no_selection: bool,
    /// Log every residue's selection decision to logs/selection_audit.csv.
    #[arg(long)]
    pub audit: bool,
    /// Continue from checkpoints/last.json in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed epochs; the schedule still spans
    /// --epochs, so a later --resume continues the same run.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeTask {
    Contact,
    Ss,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub task: ProbeTask,
    /// Corpus file (JSON lines).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Hidden width of the probe.
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    /// Fraction of proteins held out for scoring.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Residue pairs sampled per training protein (contact task).
    #[arg(long, default_value_t = 256)]
    pub pairs_per_protein: usize,
    /// Seed for all randomness (overridden by STRUCTALIGN_SEED).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PplArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus file (JSON lines).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Wild-type sequence, or a FASTA / plain-text file holding it.
    #[arg(long)]
    pub wt: String,
    /// One variant per line, e.g. `A12G` or `A12G:K15R` (1-based positions).
    #[arg(long)]
    pub mutations: PathBuf,
    /// One fitness value per variant line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Result file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Corpus file (JSON lines).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Grid specification (JSON): base config, probe config, cells.
    #[arg(long)]
    pub grid: PathBuf,
    /// Overrides the grid's base seed when given.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory: grid.csv, grid.json and one run per cell.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus file (JSON lines).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// True when `id` was given on the command line or through the environment.
pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable)
    )
}

/// Invalid flag values or combinations found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<structalign::Error>() {
            return match e {
                structalign::Error::Numerical(_) => EXIT_NUMERICAL,
                structalign::Error::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args(args: Vec<String>) -> Result<(), (u8, String)> {
    let matches = match Cli::command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return Err((code, String::new()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| (EXIT_USAGE, e.to_string()))?;
    let sub = matches
        .subcommand()
        .map(|(_, m)| m.clone())
        .expect("subcommand required");
    commands::dispatch(cli.command, &sub, args).map_err(|e| (exit_code(&e), format!("{:#}", e)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run_args(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {}", msg);
            }
            ExitCode::from(code)
        }
    }
}
