use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vecforge::compat::CompatPolicy;
use vecforge::tensorstore::DType;
use vecforge::vectorops::{MaskSpec, Scalar};
use vecforge::Error;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "vecforge",
    version,
    about = "Task-vector arithmetic on safetensors checkpoints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for the perturbation generators
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Scaling coefficient for apply
    #[arg(long, global = true, default_value = "1", allow_hyphen_values = true)]
    pub alpha: Scalar,

    /// Mask for apply: full, preset:<name>, file:<path>, a rule file, or inline rules like "-*embed*,+*"
    #[arg(long, global = true, default_value = "full", value_parser = parse_mask, allow_hyphen_values = true)]
    pub mask: MaskSpec,

    /// Storage dtype: vector dtype for extract/compose, output override for apply
    #[arg(long, global = true)]
    pub dtype: Option<DType>,

    /// Worker threads per tensor (default: all cores)
    #[arg(long, global = true, env = vecforge::parallel::THREADS_ENV)]
    pub threads: Option<usize>,

    /// Machine-readable JSON output
    #[arg(long, global = true)]
    pub json: bool,
}

fn parse_mask(s: &str) -> Result<MaskSpec, String> {
    MaskSpec::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Tolerate dtype differences between paired tensors
    #[arg(long)]
    pub allow_dtype_mismatch: bool,

    /// Tolerate tensors present on one side only when they match --ignore
    #[arg(long)]
    pub allow_extra: bool,

    /// Glob pattern for tensors that may be one-sided (repeatable)
    #[arg(long = "ignore", value_name = "PATTERN")]
    pub ignore: Vec<String>,

    /// Carry integer and bool tensors through unchanged
    #[arg(long)]
    pub copy_through_non_float: bool,
}

impl PolicyArgs {
    pub fn policy(&self) -> CompatPolicy {
        CompatPolicy {
            allow_dtype_mismatch: self.allow_dtype_mismatch,
            allow_extra: self.allow_extra,
            ignore: self.ignore.clone(),
            copy_through_non_float: self.copy_through_non_float,
        }
    }
}

#[derive(Debug, Args)]
pub struct ShardArgs {
    /// Split output into shards of at most this many bytes (suffixes K, M, G)
    #[arg(long, value_parser = parse_size)]
    pub max_shard_bytes: Option<u64>,
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, mult) = match s.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
        None => (s, 1),
        Some((i, _)) => {
            let mult = match s[i..].to_ascii_uppercase().as_str() {
                "K" | "KB" | "KIB" => 1 << 10,
                "M" | "MB" | "MIB" => 1 << 20,
                "G" | "GB" | "GIB" => 1 << 30,
                other => return Err(format!("unknown size suffix {other:?}")),
            };
            (&s[..i], mult)
        }
    };
    let n: u64 = digits.parse().map_err(|_| format!("not a size: {s:?}"))?;
    n.checked_mul(mult)
        .filter(|v| *v > 0)
        .ok_or_else(|| format!("size out of range: {s:?}"))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PerturbKind {
    HardLite,
    NoiseDigit,
    SentenceShuffle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Template {
    Gsm8k,
    Humaneval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract a task vector: minuend − subtrahend
    Extract {
        #[arg(long)]
        minuend: PathBuf,
        #[arg(long)]
        subtrahend: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Free-text note on the data behind the donors, stored in provenance
        #[arg(long)]
        dataset_note: Option<String>,
        /// Suggested α, stored in provenance
        #[arg(long, allow_hyphen_values = true)]
        alpha_hint: Option<String>,
        /// Timestamp to record in provenance (omitted by default for reproducible output)
        #[arg(long)]
        created_at: Option<String>,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        shards: ShardArgs,
    },
    /// Apply a task vector: target + α·(mask ⊙ vector)
    Apply {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        vector: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        shards: ShardArgs,
    },
    /// Weighted sum of task vectors
    Compose {
        /// Term as <PATH>:<WEIGHT> (repeatable)
        #[arg(
            long = "term",
            value_name = "PATH:WEIGHT",
            required = true,
            allow_hyphen_values = true
        )]
        terms: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        shards: ShardArgs,
    },
    /// Interpolate two checkpoints: λ·a + (1−λ)·b
    Interp {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        lambda: Scalar,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        shards: ShardArgs,
    },
    /// Check that two checkpoints can be combined
    Validate {
        a: PathBuf,
        b: PathBuf,
        /// Tokenizer or vocabulary JSON for the first checkpoint
        #[arg(long, requires = "tokenizer_b")]
        tokenizer_a: Option<PathBuf>,
        /// Tokenizer or vocabulary JSON for the second checkpoint
        #[arg(long, requires = "tokenizer_a")]
        tokenizer_b: Option<PathBuf>,
        /// Maximum mismatches listed in the table
        #[arg(long, default_value_t = 20)]
        limit: usize,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Describe a checkpoint or task vector
    Inspect {
        path: PathBuf,
        /// Include per-tensor L2 and max-abs statistics
        #[arg(long)]
        norms: bool,
    },
    /// Plan and execute a recipe file
    RunRecipe {
        recipe: PathBuf,
        /// Validate and print the plan without writing anything
        #[arg(long)]
        dry_run: bool,
    },
    /// Sweep the loss along the segment between two parameter vectors
    LmcSweep {
        /// Loss oracle JSON
        #[arg(long)]
        oracle: PathBuf,
        /// θ_A (λ = 1): JSON array or checkpoint
        #[arg(long)]
        theta_a: Option<PathBuf>,
        /// θ_B (λ = 0): JSON array or checkpoint
        #[arg(long)]
        theta_b: Option<PathBuf>,
        #[arg(long, default_value_t = 101)]
        points: usize,
        #[arg(long, default_value_t = vecforge::lmclab::DEFAULT_EPSILON)]
        epsilon: f64,
        /// Also write (λ, loss) rows to this CSV file
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Perturb line-delimited JSON problem records
    Perturb {
        #[arg(long, value_enum)]
        kind: PerturbKind,
        /// Input records (default: stdin)
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output records (default: stdout)
        #[arg(long)]
        output: Option<PathBuf>,
        /// Noise operations per sentence, in [0, 1]
        #[arg(long, default_value_t = 0.5)]
        intensity: f64,
        /// Magnitude multiplier for hard-lite
        #[arg(long, default_value_t = 10)]
        scale: u32,
    },
    /// Wrap a prompt in an evaluation template
    Prompt {
        #[arg(long, value_enum, default_value = "gsm8k")]
        template: Template,
        /// Custom template text file with a {problem} slot
        #[arg(long)]
        template_file: Option<PathBuf>,
        /// Prompt text (default: stdin)
        text: Option<String>,
    },
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Usage = 1,
    Incompatible = 2,
    Io = 3,
    Internal = 4,
}

pub fn exit_for(err: &Error) -> Exit {
    match err.root() {
        Error::Incompatible(_) | Error::NonFloatDType(_) => Exit::Incompatible,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::NoShardIndex(_)
        | Error::DuplicateTensor(_)
        | Error::UnknownTensor(_)
        | Error::ShortRead { .. }
        | Error::Json { .. } => Exit::Io,
        Error::Mask(_)
        | Error::InvalidArgument(_)
        | Error::Recipe(_)
        | Error::TensorTooLarge { .. } => Exit::Usage,
        Error::Invariant(_) | Error::Step { .. } => Exit::Internal,
    }
}

pub fn is_checkpoint_path(p: &Path) -> bool {
    p.is_dir() || p.extension().is_some_and(|e| e == "safetensors")
}

pub fn stderr_is_terminal() -> bool {
    std::io::stderr().is_terminal()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                Exit::Usage
            } else {
                Exit::Ok
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let threads = cli.global.threads;
    match vecforge::parallel::with_threads(threads, || commands::run(&cli)).and_then(|r| r) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Incompatible(report) = e.root() {
                eprint!("{}", report.render_table(50));
            }
            ExitCode::from(exit_for(&e) as u8)
        }
    }
}
