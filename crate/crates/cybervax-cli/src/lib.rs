//! Operator entry points for the cybervax immune system: training,
//! inference, attack demos and the evaluation harness.
//!
//! The binary is a thin wrapper over [`run`], which is also callable
//! in-process so integration tests exercise the exact shipping paths.
//! Every command resolves a single effective configuration (defaults,
//! then config file, then `CYBERVAX_*` environment variables, then
//! flags), echoes it into the output directory, and is deterministic
//! given that configuration plus its input checkpoints.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cybervax_core::Error;

pub mod commands;
pub mod config;
mod io;

pub use config::{EvalSettings, RunConfig};

/// Process exit codes. Anything unexpected maps to 1.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_PARTIAL: i32 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "cybervax",
    version,
    about = "Vaccinate portraits against face-replacement attacks, then recover and verify them"
)]
pub struct Cli {
    #[command(flatten)]
    pub globals: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON config file; environment variables and flags override it.
    #[arg(long, global = true, env = "CYBERVAX_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory for checkpoints, reports and images [default: out].
    #[arg(long, global = true, env = "CYBERVAX_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Root RNG seed; drives synthetic data, batches and augmentation.
    #[arg(long, global = true, env = "CYBERVAX_SEED")]
    pub seed: Option<u64>,

    /// Working resolution in pixels (images are square).
    #[arg(long, global = true, env = "CYBERVAX_RESOLUTION")]
    pub resolution: Option<usize>,

    /// Compute device; this build supports only "cpu".
    #[arg(long, global = true, env = "CYBERVAX_DEVICE")]
    pub device: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the vaccinator/neutraliser pair end to end.
    Train(TrainArgs),
    /// Train a vaccinated-or-not classifier against a trained system.
    TrainValidator(TrainValidatorArgs),
    /// Train the blind inpainting baseline used for comparisons.
    TrainBaseline(TrainBaselineArgs),
    /// Train the toy two-identity face-swap attacker.
    TrainFaceswap(TrainFaceswapArgs),
    /// Embed recovery payloads into portraits.
    Vaccinate(VaccinateArgs),
    /// Reconstruct faces from (possibly attacked) portraits.
    Neutralise(NeutraliseArgs),
    /// Score images with a trained validator.
    Validate(ValidateArgs),
    /// Attack inputs, then neutralise and validate the result.
    Attack(AttackArgs),
    /// Full evaluation matrix: metrics, reports and plots.
    Evaluate(EvaluateArgs),
}

/// Where training/evaluation portraits come from. Exactly one source
/// must be given.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Use a generated synthetic dataset with this many faces.
    #[arg(long, value_name = "N", conflicts_with = "data")]
    pub synthetic: Option<usize>,

    /// Portrait directory (flat, or with train/val/test subdirectories).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Total optimisation steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<u64>,

    /// Continue from an existing immune-system checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainValidatorArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Trained immune-system checkpoint to classify against.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,

    /// Validator architecture (defaults to the config file, then mlp).
    #[arg(long, value_enum)]
    pub arch: Option<ArchChoice>,

    /// Total optimisation steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainBaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Total optimisation steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFaceswapArgs {
    /// Frames per synthetic identity.
    #[arg(long, value_name = "N", conflicts_with = "data")]
    pub synthetic: Option<usize>,

    /// Directory with one subdirectory of frames per identity.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Autoencoder training steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct VaccinateArgs {
    /// Trained immune-system checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,

    /// Input image file or directory of images.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,

    /// Landmark file (single input) or directory of per-stem .txt files.
    #[arg(long, value_name = "PATH")]
    pub landmarks: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct NeutraliseArgs {
    #[command(flatten)]
    pub common: VaccinateArgs,

    /// Validator checkpoint; adds a verdict per frame.
    #[arg(long, value_name = "CKPT")]
    pub validator: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ValidateArgs {
    /// Trained validator checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub validator: PathBuf,

    /// Input image file or directory of images.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,

    /// Decision threshold on the vaccinated probability.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    /// Trained immune-system checkpoint (used for neutralisation).
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,

    /// Input image file or directory of images.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,

    /// Attack family to apply to the face region.
    #[arg(long, value_enum, default_value_t = AttackMode::Mask)]
    pub mode: AttackMode,

    /// Face-swap checkpoint; required for --mode faceswap.
    #[arg(long, value_name = "CKPT")]
    pub faceswap: Option<PathBuf>,

    /// Swap target identity (defaults to the model's second identity).
    #[arg(long)]
    pub target: Option<String>,

    /// Validator checkpoint; adds a verdict per frame.
    #[arg(long, value_name = "CKPT")]
    pub validator: Option<PathBuf>,

    /// Landmark file or directory of per-stem .txt files.
    #[arg(long, value_name = "PATH")]
    pub landmarks: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    /// Trained immune-system checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    /// Validator checkpoint; adds verdicts and the classification report.
    #[arg(long, value_name = "CKPT")]
    pub validator: Option<PathBuf>,

    /// Inpainting-baseline checkpoint; adds the ablation comparison.
    #[arg(long, value_name = "CKPT")]
    pub baseline: Option<PathBuf>,

    /// Face-swap checkpoint; adds the swap recovery demo.
    #[arg(long, value_name = "CKPT")]
    pub faceswap: Option<PathBuf>,

    /// Magnitudes per degradation sweep (overrides the config file).
    #[arg(long)]
    pub sweep_points: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchChoice {
    Mlp,
    SmallCnn,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// Black out the face region (the strongest removal attack).
    Mask,
    /// Replace the face with the swap model's target identity.
    Faceswap,
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackMode::Mask => write!(f, "mask"),
            AttackMode::Faceswap => write!(f, "faceswap"),
        }
    }
}

/// Map a core error onto the documented exit codes.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parameter(_) | Error::Serde(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io(_) | Error::Image(_) => EXIT_DATA,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => 1,
    }
}

/// Parse and execute a full command line (`args[0]` is the program
/// name). Returns the process exit code instead of exiting, so tests
/// and other hosts can call it in-process.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();

    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful outcomes; anything else
            // is a usage error.
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };

    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}
