//! The `dehaze` command line.
//!
//! Every invocation resolves one configuration (built-in defaults or a
//! checkpoint's model, then `--config`, then `--set` overrides and flags),
//! runs a single subcommand and appends one JSON line to the run log.
//! Exit codes: 0 success, 1 user error, 2 runtime failure.

mod commands;
mod runlog;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use dehaze_core::dam::AttributionRegion;

pub use runlog::RunRecord;

/// Environment variable selecting the accelerator. Only `cpu` exists.
pub const DEVICE_ENV: &str = "DEHAZE_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "dehaze", version, about = "Tiled haze removal for very large images")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file layered over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in model preset used when no checkpoint is given.
    #[arg(long, global = true, default_value = "default", value_name = "NAME")]
    pub preset: String,
    /// Dotted configuration override, e.g. `train.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// JSON-lines file every run appends a record to.
    #[arg(long, global = true, default_value = "dehaze-runs.jsonl", value_name = "PATH")]
    pub run_log: PathBuf,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

/// Where model weights come from.
#[derive(Debug, Args, Clone)]
pub struct ModelSource {
    /// Trained checkpoint; without one the model is freshly initialized.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the fresh initialization.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a paired dataset with synthetic haze.
    Synth(SynthArgs),
    /// Train on the train split of a manifest.
    Train(TrainArgs),
    /// Dehaze one image.
    Infer(InferArgs),
    /// Attribution map for a window of the dehazed output.
    Attribute(AttributeArgs),
    /// Score a split of a manifest.
    Eval(EvalArgs),
    /// Per-stage peak memory and wall time over image sizes.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["clear_dir", "generate", "regenerate"])))]
pub struct SynthArgs {
    /// Directory of clear images to haze.
    #[arg(long, value_name = "DIR")]
    pub clear_dir: Option<PathBuf>,
    /// Generate `synth.count` procedural clear images into `<out>/clear`.
    #[arg(long)]
    pub generate: bool,
    /// Recreate the hazy images of an existing manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub regenerate: Option<PathBuf>,
    /// Output directory (hazy images and manifest).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Haze parameter seed (`synth.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub pairs: PathBuf,
    /// Directory for checkpoints, loss log and resolved config.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
    /// Crop and shuffle seed (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
    /// Bits per channel of the written image.
    #[arg(long, value_enum, default_value = "8")]
    pub bits: Bits,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    /// Hazy input image.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Path start; normally the clear image.
    #[arg(long, value_name = "PATH")]
    pub baseline: PathBuf,
    /// Detector window `x,y,l`: top-left corner and side in pixels.
    #[arg(long, value_name = "X,Y,L")]
    pub region: Region,
    /// Integration steps (`attribution.steps`, 100 by default).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Directory for the raw map, heatmap and sidecar.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub pairs: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Score only the window `x,y,l` of every image.
    #[arg(long, value_name = "X,Y,L")]
    pub crop: Option<Region>,
    /// Score the hazy inputs themselves instead of model outputs.
    #[arg(long)]
    pub inputs_only: bool,
    /// JSON-lines report; printed to stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Per-image CSV export.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelSource,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Square image sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048")]
    pub sizes: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub precision: PrecisionArg,
    /// CSV export.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Bits {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Fp32,
    Fp16,
    Both,
}

/// `x,y,l` window flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region(pub AttributionRegion);

impl FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("expected three non-negative integers `x,y,l`, got `{s}`"))?;
        match nums[..] {
            [x, y, l] if l > 0 => Ok(Region(AttributionRegion { x, y, l })),
            [_, _, 0] => Err("window side l must be positive".into()),
            _ => Err(format!("expected `x,y,l`, got `{s}`")),
        }
    }
}

/// A failed run: bad input from the user, or something that went wrong
/// while running (out of memory, I/O, divergence).
#[derive(Debug)]
pub enum Failure {
    User(String),
    Runtime { stage: &'static str, message: String },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Runtime { .. } => 2,
        }
    }

    /// Classify a library error raised during `stage`.
    pub fn at(stage: &'static str) -> impl Fn(dehaze_core::Error) -> Failure {
        move |e| {
            if e.is_runtime() {
                Failure::Runtime {
                    stage,
                    message: e.to_string(),
                }
            } else {
                Failure::User(e.to_string())
            }
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::User(m) => write!(f, "{m}"),
            Failure::Runtime { stage, message } => write!(f, "stage `{stage}` failed: {message}"),
        }
    }
}

fn init_logging(common: &Common) {
    let level = if common.quiet {
        log::LevelFilter::Error
    } else {
        match common.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    // A second initialization (several runs in one process) keeps the first.
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    init_logging(&cli.common);
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let mut record = RunRecord::start(commands::name(&cli.command), args);
    let result = commands::execute(&cli, &mut record);
    let code = match &result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    };
    record.finish(code, result.err());
    if let Err(e) = record.append(&cli.common.run_log) {
        eprintln!("warning: could not append to run log {}: {e}", cli.common.run_log.display());
    }
    code
}
