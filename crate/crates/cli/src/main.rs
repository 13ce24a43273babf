//! `deepattr` command-line tool.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "deepattr", version, about = "Cross-region pooling, CARR classifiers and evaluation over regional codes")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Pool regional codes of every image into holistic features.
    Pool(PoolArgs),
    /// Train one-vs-rest base classifiers on pooled features.
    Train(TrainArgs),
    /// Train context-aware region-refined ensembles from base models.
    CarrTrain(CarrTrainArgs),
    /// Score a split with models or ensembles.
    Predict(PredictArgs),
    /// Classification report for a score file.
    EvalCls(EvalClsArgs),
    /// Retrieval report for pooled features.
    EvalRetrieval(EvalRetrievalArgs),
    /// Proposal recall against annotated boxes for several K.
    ProposalRecall(RecallArgs),
    /// Most discriminative region and top attribute dimensions of an image.
    Backtrack(BacktrackArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Synthetic spec JSON; omitted fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum OpArg {
    Max,
    Avg,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum LayoutArg {
    Single,
    Multiscale,
    Spp,
}

#[derive(Args, Debug, Serialize)]
struct PoolArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "softmax")]
    layer: String,
    #[arg(long, value_enum, default_value_t = OpArg::Max)]
    op: OpArg,
    #[arg(long, value_enum, default_value_t = LayoutArg::Multiscale)]
    layout: LayoutArg,
    /// RootSIFT normalization of the pooled vector.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    rootsift: bool,
    /// Scale-interval boundaries for the multiscale layout.
    #[arg(long, value_delimiter = ',')]
    scale_boundaries: Option<Vec<f64>>,
    /// Grid sides for the spatial-pyramid layout.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    grid_sides: Vec<u32>,
    /// Keep only the top K proposals by objectness.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SolverArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,10,100")]
    c_grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 5000)]
    max_passes: usize,
    #[arg(long, default_value_t = 1.0)]
    positive_weight: f64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum RefineLayoutArg {
    MirrorGlobal,
    Single,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum AlphaModeArg {
    Adaboost,
    GridSearch,
}

#[derive(Args, Debug, Serialize)]
struct CarrTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Base models from `train`.
    #[arg(long)]
    base: PathBuf,
    #[arg(long, default_value_t = 0.025)]
    beta: f64,
    #[arg(long, default_value_t = 2)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    min_top_k: usize,
    /// Keep regions scoring above this instead of the top K.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long, default_value = "fc1")]
    refine_layer: String,
    #[arg(long, value_enum, default_value_t = OpArg::Avg)]
    refine_op: OpArg,
    #[arg(long, value_enum, default_value_t = RefineLayoutArg::MirrorGlobal)]
    refine_layout: RefineLayoutArg,
    #[arg(long, value_enum, default_value_t = AlphaModeArg::Adaboost)]
    alpha_mode: AlphaModeArg,
    /// Keep only the top K proposals by objectness.
    #[arg(long)]
    top_k: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Ensemble or base-model file.
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Map,
    Accuracy,
}

#[derive(Args, Debug, Serialize)]
struct EvalClsArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Map)]
    metric: MetricArg,
    /// VOC-2007 11-point interpolated AP instead of all-point AP.
    #[arg(long)]
    eleven_point: bool,
    /// JSON report path (printed to stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum ProtocolArg {
    Holidays,
    Ukb,
}

#[derive(Args, Debug, Serialize)]
struct EvalRetrievalArgs {
    #[arg(long)]
    features: PathBuf,
    /// JSON object mapping item id to group id.
    #[arg(long)]
    groups: PathBuf,
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    /// JSON array of query ids (holidays; default: first id of each group).
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct RecallArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON object mapping image id to a list of boxes.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,500,1000")]
    k_list: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BacktrackArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    image: String,
    #[arg(long)]
    category: String,
    /// Number of attribute dimensions to list.
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEEPATTR_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
