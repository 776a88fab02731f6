//! Command line front-end for `moe-spatial`.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 capacity. Failures print one
//! JSON line on stderr: `{"error":<category>,"kind":<kind>,"message":<text>}`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moe_spatial::error::Category;
use moe_spatial::probe::TargetSpec;
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "moe-spatial", version, about = "Spatial statistics of mixture-of-experts routing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Omit the timestamp comment from SVG output.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Manifest location (default: next to the first output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Uniform-random routing traces.
    GenRandom(GenRandomArgs),
    /// Activation rates and correlation lengths of a trace.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Exponential fit of correlation length against block size.
    Fit(FitArgs),
    /// Potts spin-chain reference model.
    #[command(subcommand)]
    Chain(ChainCmd),
    /// Maximum-entropy routing loss.
    #[command(subcommand, name = "mem-loss")]
    MemLoss(MemLossCmd),
    /// Small MoE language model.
    #[command(subcommand)]
    Toy(ToyCmd),
    /// Linear position probes on embeddings.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// SVG figures from CSV outputs.
    #[command(subcommand)]
    Plot(PlotCmd),
}

#[derive(Debug, Args, Serialize)]
pub struct GenRandomArgs {
    #[arg(long)]
    pub n_experts: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long)]
    pub len: usize,
    #[arg(long)]
    pub seqs: usize,
    #[arg(long, default_value = "random")]
    pub model: String,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeCmd {
    /// Per (layer, expert, position) activation rates.
    Rates(RatesArgs),
    /// Correlation length per layer and block size.
    Xi(XiArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormArg {
    /// Each (layer, expert) row sums to one over positions.
    Positions,
    /// Each (layer, position) column sums to k over experts.
    Experts,
}

#[derive(Debug, Args, Serialize)]
pub struct RatesArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = NormArg::Positions)]
    pub normalization: NormArg,
    /// Also write a heatmap of one layer.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitArg {
    Blocks,
    Tokens,
}

#[derive(Debug, Args, Serialize)]
pub struct XiArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    pub block_sizes: Vec<usize>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = UnitArg::Blocks)]
    pub unit: UnitArg,
    /// Pool domains across sequences instead of averaging per-sequence ξ.
    #[arg(long)]
    pub pooled: bool,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// ξ table as written by `analyze xi`.
    #[arg(short, long)]
    pub input: PathBuf,
    /// Fit CSV; printed to stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Restrict to one layer instead of the layer average.
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainCmd {
    /// Exact correlation length from the transfer matrix.
    Xi(ChainXiArgs),
    /// Metropolis samples written as a single-layer top-1 trace.
    Sample(ChainSampleArgs),
    /// Mean |magnetization| against chain length.
    Order(ChainOrderArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct Coupling {
    /// Product βJ; overrides --beta and --j.
    #[arg(long)]
    pub beta_j: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub j: f64,
}

impl Coupling {
    /// `(beta, j)`, with `--beta-j` taken as β = 1.
    pub fn resolve(&self) -> (f64, f64) {
        match self.beta_j {
            Some(bj) => (1.0, bj),
            None => (self.beta, self.j),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ChainXiArgs {
    #[arg(long)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub coupling: Coupling,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ChainSampleArgs {
    #[arg(long)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub coupling: Coupling,
    #[arg(long)]
    pub len: usize,
    #[arg(long)]
    pub samples: usize,
    /// Sweeps between recorded samples.
    #[arg(long, default_value_t = 10)]
    pub sweeps: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ChainOrderArgs {
    #[arg(long)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub coupling: Coupling,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemLossCmd {
    /// Per-token KL to the uniform k-subset distribution.
    Eval(MemEvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct MemEvalArgs {
    /// NDJSON, one array of router logits per token.
    #[arg(long)]
    pub logits: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temp: f64,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyCmd {
    /// Train the toy model on a synthetic task.
    Train(ToyTrainArgs),
    /// Finite-difference check of the analytic gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxArg {
    None,
    Switch,
    Mem,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterArg {
    Learned,
    /// Contiguous position blocks mapped to fixed expert groups.
    Static,
    /// Position p uses the k-subset of rank p mod C(n, k).
    StaticCycled,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateArg {
    Topk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    Copy,
    Reverse,
    Modsum,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 32)]
    pub model_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub experts: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 128)]
    pub context: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 10000.0)]
    pub rope_base: f64,
    #[arg(long, value_enum, default_value_t = GateArg::Topk)]
    pub gate: GateArg,
}

#[derive(Debug, Args, Serialize)]
pub struct LossArgs {
    #[arg(long, value_enum, default_value_t = AuxArg::None)]
    pub aux: AuxArg,
    #[arg(long, default_value_t = 0.01)]
    pub aux_weight: f64,
    #[arg(long, value_enum, default_value_t = RouterArg::Learned)]
    pub router: RouterArg,
    /// MEM temperature.
    #[arg(long, default_value_t = 1.0)]
    pub temp: f64,
    /// MEM inverse temperature of the subset distribution.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, value_enum, default_value_t = TaskArg::Copy)]
    pub task: TaskArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyTrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Training sequence length (default: the context length).
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 8)]
    pub eval_batch: usize,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Routing traces of the trained model on the held-out batch.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Per-step loss curve.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Expert usage and entropy at each checkpoint.
    #[arg(long)]
    pub usage: Option<PathBuf>,
    /// Parameter blob of the trained model (sidecar header alongside).
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 8)]
    pub len: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeCmd {
    /// Synthetic RoPE-rotated embeddings.
    MakeFeatures(MakeFeaturesArgs),
    /// Cross-validated logistic probes for position targets.
    Train(ProbeTrainArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct MakeFeaturesArgs {
    #[arg(long, default_value_t = 256)]
    pub len: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 10000.0)]
    pub base: f64,
    #[arg(long, default_value_t = 16)]
    pub seqs: usize,
    #[arg(long, default_value_t = 0.25)]
    pub noise: f64,
    /// Store rows as f32 in a sibling `.bin` file.
    #[arg(long)]
    pub packed: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeTrainArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// Targets: parity, exact, block_<n>.
    #[arg(long, value_delimiter = ',', default_value = "parity,exact", value_parser = parse_target)]
    pub targets: Vec<TargetSpec>,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    /// L2 strengths (default: 1e-3 to 1e3 in decades).
    #[arg(long, value_delimiter = ',')]
    pub l2_grid: Option<Vec<f64>>,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Full reports, including fold metrics and grid scores.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn parse_target(s: &str) -> Result<TargetSpec, String> {
    s.parse::<TargetSpec>().map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotCmd {
    /// Heatmap from a rates table.
    Rates(PlotRatesArgs),
    /// ξ against block size from a ξ table.
    Xi(PlotArgs),
    /// Training curves from a `toy train --report` table.
    Curve(PlotArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PlotRatesArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, value_enum, default_value_t = NormArg::Positions)]
    pub normalization: NormArg,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    kind: &'a str,
    message: String,
}

fn report_error(category: Category, kind: &str, message: String) -> ExitCode {
    let (name, code) = match category {
        Category::Usage => ("usage", 2),
        Category::Data => ("data", 3),
        Category::Capacity => ("capacity", 4),
    };
    let line = ErrorLine {
        error: name,
        kind,
        message,
    };
    eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if matches!(e.kind(), ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                eprint!("{e}");
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return report_error(Category::Usage, "cli", first);
        }
    };
    match commands::run(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(e.category(), e.kind(), e.to_string()),
    }
}
