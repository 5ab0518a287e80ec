mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sigmine_core::{Error, ErrorCategory};

#[derive(Debug, Parser)]
#[command(
    name = "sigmine",
    version,
    about = "Query-by-example search over gridded volumes with binary patch signatures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic volume with planted motif sites.
    Generate(GenerateArgs),
    /// Train a patch encoder on a volume.
    Train(TrainArgs),
    /// Encode every grid patch of a volume into signature records.
    Encode(EncodeArgs),
    /// Shard a record file into a store directory.
    Ingest(IngestArgs),
    /// Build a multi-index over a store.
    BuildIndex(BuildIndexArgs),
    /// Ranked matches for a point or a signature, as JSON.
    Query(QueryArgs),
    /// Retrieval metrics against planted sites.
    Eval(EvalArgs),
    /// Monte Carlo recall of multi-index look-ups by Hamming distance.
    SimulateRecall(RecallArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Extent as `x,y,z`, or one value for a cube.
    #[arg(long, default_value = "128")]
    pub extent: String,
    /// Motif class and count, e.g. `bar:60`; repeat for more classes.
    /// Class ids follow the order given. Shapes: bar, ring, blob.
    #[arg(long = "class", required = true)]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 20.0)]
    pub min_spacing: f64,
    /// Per-axis margin `x,y,z` (or one value).
    #[arg(long, default_value = "10,10,4")]
    pub margin: String,
    #[arg(long, default_value_t = 0.2)]
    pub background: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Planar,
    Volumetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    NtXent,
    Triplet,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Patch shape `depth,height,width`.
    #[arg(long, default_value = "3,16,16")]
    pub patch: String,
    #[arg(long, value_enum, default_value_t = LayoutArg::Planar)]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 64)]
    pub bits: usize,
    /// Real-valued steps.
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// Steps with the sign layer on, after the real-valued phase.
    #[arg(long, default_value_t = 500)]
    pub binary_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub binary_lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, value_enum, default_value_t = LossArg::NtXent)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 16)]
    pub batch_pairs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    /// Training patches need at least this mean absolute gradient.
    #[arg(long, default_value_t = 0.07)]
    pub min_gradient: f64,
    /// Allow binarized training without a real-valued phase.
    #[arg(long)]
    pub binary_from_scratch: bool,
    /// Per-step loss as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Record file; a `<out>.json` manifest is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub stride: u32,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Store directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub shard_size: u32,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub partitions: usize,
    /// Seed of the bit-to-partition shuffle.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Service configuration supplying defaults; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, requires_all = ["y", "z"], conflicts_with = "signature")]
    pub x: Option<u32>,
    #[arg(long, requires_all = ["x", "z"])]
    pub y: Option<u32>,
    #[arg(long, requires_all = ["x", "y"])]
    pub z: Option<u32>,
    /// 16 hex digits.
    #[arg(long)]
    pub signature: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub t: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Store holding the searched signatures.
    #[arg(long)]
    pub store: PathBuf,
    /// Search through this index instead of scanning the store.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Searched volume; its site sidecar provides the truth.
    #[arg(long)]
    pub volume: PathBuf,
    /// Volume whose sites of `--class` are the queries.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub class: u32,
    /// Match radius in voxels.
    #[arg(long, default_value_t = 6.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 10.0)]
    pub t: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Also score one query set made of the first N queries.
    #[arg(long, default_value_t = 0)]
    pub multi: usize,
    /// K-means purity of site embeddings in the searched volume.
    #[arg(long)]
    pub cluster: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics file (`name value` lines); printed when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Mean precision curves as CSV.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecallArgs {
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub bits: usize,
    #[arg(long, default_value_t = 200_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; printed when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub session_log: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::DataFormat => 3,
        ErrorCategory::Contract => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let body = text.split("\nUsage:").next().unwrap_or_default();
            let line = body.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!(
                "error[{}]: {}",
                ErrorCategory::Usage.as_str(),
                line.trim_start_matches("error: ")
            );
            return ExitCode::from(exit_code(ErrorCategory::Usage));
        }
    };
    let result: Result<(), Error> = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Encode(a) => commands::encode(&a),
        Command::Ingest(a) => commands::ingest(&a),
        Command::BuildIndex(a) => commands::build_index(&a),
        Command::Query(a) => commands::query(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SimulateRecall(a) => commands::simulate_recall(&a),
        Command::Serve(a) => commands::serve(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category().as_str());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
