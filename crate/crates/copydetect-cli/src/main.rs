//! `copydetect`: answer-copying detection on multiple-choice exams.
//!
//! Subcommands: `fit` estimates a behavioral model from responses,
//! `detect` scores every ordered pair within each examination room,
//! `rooms` applies per-room false-discovery-rate control and flags
//! massive cheating, and `simulate` measures type-I error and power by
//! cross-room pairing and copy injection. Every run writes a manifest
//! next to its outputs; identical seeds give byte-identical outputs for
//! any `--threads` value.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use manifest::{manifest_path_for, ManifestBuilder};

#[derive(Debug, Parser)]
#[command(
    name = "copydetect",
    version,
    about = "Answer-copying detection for multiple-choice exams"
)]
struct Cli {
    /// Worker threads (default: available parallelism; env COPYDETECT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a behavioral response model and save it.
    Fit(FitArgs),
    /// Score every ordered pair per examination room.
    Detect(DetectArgs),
    /// Per-room FDR control and massive-cheating flags.
    Rooms(RoomsArgs),
    /// Type-I error and power curves via cross-room pairs and copy injection.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// Nominal response model (softmax in ability), fitted by MML.
    Nrm,
    /// Proportion-correct curve model with incorrect-option shares.
    Wesolowsky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuspectRuleArg {
    /// A student is suspected when they are the copier of a rejected pair.
    Copier,
    /// Either member of a rejected pair is suspected.
    Either,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Which behavioral model to fit.
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Responses CSV: student_id,room_id,answers.
    #[arg(long)]
    pub responses: PathBuf,
    /// Answer key file: one line of option letters.
    #[arg(long)]
    pub key: PathBuf,
    /// Options per question.
    #[arg(long, default_value_t = 4)]
    pub n_options: usize,
    /// Output model file (JSON container).
    #[arg(long)]
    pub out: PathBuf,
    /// Quadrature nodes for the ability prior.
    #[arg(long, default_value_t = 21)]
    pub quad_nodes: usize,
    /// EM cycle cap.
    #[arg(long, default_value_t = 200)]
    pub max_cycles: usize,
    /// EM convergence tolerance (max parameter change).
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Minimum records required for an MML fit.
    #[arg(long, default_value_t = 200)]
    pub min_examinees: usize,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_options: usize,
    /// Fitted model file; repeat to supply both families for --variant all.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Index variant (omega1, omega2, omega1s, omega2s, gamma1, gamma2,
    /// gamma1s, gamma2s, or a comma list, or "all").
    #[arg(long, default_value = "omega2s")]
    pub variant: String,
    /// Significance level used for the console summary only.
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
    /// Apply the half-point continuity correction to standardized variants.
    #[arg(long)]
    pub continuity_correction: bool,
    /// Output CSV: copier,source,room,variant,matches,statistic,p_value.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RoomsArgs {
    /// Pair-results CSV produced by `detect`.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_options: usize,
    /// Variant to screen on when the results file holds several.
    #[arg(long)]
    pub variant: Option<String>,
    /// False-discovery-rate budget per room.
    #[arg(long, default_value_t = 0.01)]
    pub p_star: f64,
    /// Massive-cheating threshold on the suspected-student share.
    #[arg(long, default_value_t = 0.6)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = SuspectRuleArg::Copier)]
    pub suspect_rule: SuspectRuleArg,
    /// Output CSV: room_id,num_students,num_tests,suspected_share,massive_flag.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional one-line summary CSV (num_rooms,num_flagged,proportion).
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Real data: responses CSV (requires --key).
    #[arg(long)]
    pub responses: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub n_options: usize,
    /// Synthetic population, e.g. nrm:items=48,n=4,students=2000,rooms=20.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Cross-room pairs to sample.
    #[arg(long, default_value_t = 100_000)]
    pub pairs: usize,
    /// Significance level of the index.
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
    /// Comma-separated copying levels; default 1,5,10,...,N.
    #[arg(long)]
    pub levels: Option<String>,
    /// Variants to run (comma list or "all").
    #[arg(long, default_value = "omega2s")]
    pub variants: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// With --synthetic: score with the generating model instead of
    /// refitting on the drawn data.
    #[arg(long)]
    pub use_true_model: bool,
    #[arg(long)]
    pub continuity_correction: bool,
    /// Quadrature nodes for refits.
    #[arg(long, default_value_t = 21)]
    pub quad_nodes: usize,
    #[arg(long, default_value_t = 200)]
    pub max_cycles: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub min_examinees: usize,
    /// Output directory for type1.csv and power.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("COPYDETECT_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(threads) = threads {
        if let Err(error) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {error}");
            return ExitCode::FAILURE;
        }
    }

    let (name, manifest_path) = match &cli.command {
        Command::Fit(args) => ("fit", manifest_path_for(&args.out)),
        Command::Detect(args) => ("detect", manifest_path_for(&args.out)),
        Command::Rooms(args) => ("rooms", manifest_path_for(&args.out)),
        Command::Simulate(args) => ("simulate", args.out_dir.join("manifest.json")),
    };
    let mut manifest = ManifestBuilder::new(name, manifest_path);

    let result = match &cli.command {
        Command::Fit(args) => commands::cmd_fit(args, &mut manifest),
        Command::Detect(args) => commands::cmd_detect(args, &mut manifest),
        Command::Rooms(args) => commands::cmd_rooms(args, &mut manifest),
        Command::Simulate(args) => commands::cmd_simulate(args, &mut manifest),
    };

    let failed = result.is_err();
    if let Err(error) = &result {
        eprintln!("error: {error:#}");
    }
    if let Err(manifest_error) = manifest.finish(result.err().as_ref()) {
        eprintln!("error: {manifest_error:#}");
        return ExitCode::FAILURE;
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
