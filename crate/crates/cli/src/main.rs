//! `vicl`: generate toy analogy data, mine quadruplets, train, infer,
//! evaluate and gradient-check the model.
//!
//! Exit codes: 0 success, 1 runtime or configuration failure, 2 invalid
//! command line, 3 training aborted on a non-finite loss or gradient.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_NON_FINITE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "vicl", version, about = "Visual in-context learning with a miniature flow-matching transformer")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs. Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test quadruplets for procedural tasks.
    GenData(GenDataArgs),
    /// Train the backbone, or adapters on a frozen base.
    Train(TrainArgs),
    /// Solve one analogy: exemplar pair plus query to prediction.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a test split with fixed exemplars.
    Eval(EvalArgs),
    /// Mine quadruplets from a corpus of source/target pairs.
    Mine(MineArgs),
    /// Check analytic gradients of the full loss against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Comma-separated task names, `name` or `name:inv`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<String>,
    /// Quadruplets per task before the split.
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of each task held out for testing.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// RunConfig JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory (its `train/` split is used when present).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Base checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Freeze every tensor of `--init` and train adapters only.
    #[arg(long)]
    pub adapter_only: bool,
    /// Continue an interrupted run from one of its checkpoints.
    #[arg(long, conflicts_with_all = ["init", "adapter_only"])]
    pub resume: Option<PathBuf>,
    /// Save `checkpoint-<step>.bin` every N steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Override `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the MoE-LoRA expert count.
    #[arg(long)]
    pub experts: Option<usize>,
    /// Override the MoE-LoRA top-k.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Log the running loss every N steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub exemplar_src: PathBuf,
    #[arg(long)]
    pub exemplar_tgt: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Euler steps.
    #[arg(long, default_value_t = vicl_core::diffusion::DEFAULT_SAMPLER_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep out-of-range values instead of clamping to [0, 1] (they are still
    /// clipped when written as 8-bit PPM).
    #[arg(long)]
    pub no_clamp: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; not needed with `--oracle`.
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Dataset directory (its `test/` split is used when present).
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated: iou, psnr, ssim, rmse255, depth, normal.
    #[arg(long, default_value = "psnr,ssim")]
    pub metrics: String,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = vicl_core::diffusion::DEFAULT_SAMPLER_STEPS)]
    pub steps: usize,
    /// Repeat with five exemplar draws and report mean and std across them.
    #[arg(long)]
    pub robustness: bool,
    /// Score the ground truth itself instead of model predictions.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    /// Corpus directory holding `pairs.jsonl`, or the file itself.
    #[arg(long)]
    pub pairs: PathBuf,
    /// `toy` (block means of the pixels) or `file` (an `embeddings.bin` table).
    #[arg(long, default_value = "toy")]
    pub embedder: String,
    /// Table for the file embedder; defaults to `embeddings.bin` next to the pairs.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Cluster count, or `auto` for the corpus-size rule.
    #[arg(long, default_value = "auto")]
    pub k: String,
    #[arg(long, default_value_t = vicl_core::mining::DEFAULT_TAU_VIS)]
    pub tau_vis: f64,
    #[arg(long, default_value_t = vicl_core::mining::DEFAULT_TAU_TEXT)]
    pub tau_text: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = vicl_core::mining::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// RunConfig whose backbone is checked; defaults to the 2-block D=32
    /// model with LoRA and MoE-LoRA.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative control: corrupt the matmul backward pass.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::error!("cannot set up {n} threads: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Mine(a) => commands::mine(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            match e {
                vicl_core::Error::NonFinite { .. } => ExitCode::from(EXIT_NON_FINITE),
                _ => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}
