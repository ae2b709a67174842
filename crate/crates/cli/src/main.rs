//! `chmm`: simulate pen experiments, fit SIR variants, estimate evidence
//! and rank models.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "chmm", version, about = "Evidence and Bayes factors for coupled HMMs")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "CHMM_THREADS")]
    threads: Option<usize>,
    /// JSON config; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an experiment design to data and truth CSVs.
    Simulate(SimulateArgs),
    /// Exact log marginal likelihood by joint forward filtering.
    Oracle(OracleArgs),
    /// Joint posterior MCMC and defense mixture fit for one model.
    Mcmc(McmcArgs),
    /// Evidence estimate for one model.
    Evidence(EvidenceArgs),
    /// Evidence for several models and their Bayes-factor ranking.
    Rank(RankArgs),
    /// Fixed-parameter comparison of marginal likelihood estimators.
    Compare(CompareArgs),
    /// Marginal posterior state probabilities per bird and step.
    Smooth(SmoothArgs),
}

/// Where the data come from: a CSV file, or a design simulated with the
/// run's model, parameters and seed.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataArgs {
    /// Data CSV (`chicken,pen,transgenic,challenge,t1..tT`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Preset design name (hpai-cross, scaling-4 ... scaling-64).
    #[arg(long)]
    pub design: Option<String>,
    /// Design as a JSON file.
    #[arg(long)]
    pub design_file: Option<PathBuf>,
}

/// Model variant and parameters in natural units.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Model number 1-16.
    #[arg(long)]
    pub model: Option<u8>,
    /// Free parameters of the model, comma separated, in the model's
    /// parameter order; defaults to the simulation-study values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub moribund_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_data: Option<PathBuf>,
    #[arg(long)]
    pub out_truth: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct OracleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Largest joint state space per pen.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// MCMC and mixture settings shared by `mcmc`, `evidence` and `rank`.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub iter: Option<usize>,
    #[arg(long)]
    pub burn_in_frac: Option<f64>,
    /// Weight of the fitted component of the defense mixture.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Degrees of freedom of a t component instead of a normal.
    #[arg(long)]
    pub df: Option<u32>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct McmcArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON with samples and the fitted mixture.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Natural-scale samples as CSV.
    #[arg(long)]
    pub samples_csv: Option<PathBuf>,
}

/// Importance-sampling settings shared by `evidence` and `rank`.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub n_theta: Option<usize>,
    /// Guiding ensemble size per parameter draw.
    #[arg(long)]
    pub guiding: Option<usize>,
    /// Regenerate the ensemble when its ESS drops below this.
    #[arg(long)]
    pub regen: Option<f64>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// miffbs or diffbs.
    #[arg(long)]
    pub proposal: Option<String>,
    /// Hidden-state draws per parameter draw.
    #[arg(long)]
    pub l_inner: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvidenceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimate: EstimateArgs,
    /// Output of `mcmc` to take the mixture from instead of refitting.
    #[arg(long)]
    pub mcmc: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct RankArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: DataArgs,
    /// Models to rank; all 16 by default.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<u8>>,
    /// Rank existing evidence CSVs instead of estimating.
    #[arg(long, value_delimiter = ',')]
    pub from: Option<Vec<PathBuf>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimate: EstimateArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// Directory for per-model natural-scale sample CSVs.
    #[arg(long)]
    pub samples_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct CompareArgs {
    /// Data CSV to compare on instead of simulated designs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Preset designs, comma separated or repeated.
    #[arg(long = "design", value_delimiter = ',')]
    pub designs: Option<Vec<String>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Methods among ff, diffbs, miffbs, pf.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Estimates per method (PF runs or proposal draws).
    #[arg(long)]
    pub budget_estimates: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub guiding: Option<usize>,
    #[arg(long)]
    pub regen: Option<f64>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub oracle_budget: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SmoothArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Take parameters as the posterior mean of an `mcmc` output.
    #[arg(long)]
    pub mcmc: Option<PathBuf>,
    /// exact, miffbs, or auto (exact when within budget).
    #[arg(long)]
    pub method: Option<String>,
    /// Proposal draws for the miffbs method.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub guiding: Option<usize>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> chmm::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(chmm::Error::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| chmm::Error::Invalid(e.to_string()))?;
    }
    let config = cli.config.as_deref().map(config::load).transpose()?;
    let config = config.as_ref();
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&config::merge(a, config, "simulate")?),
        Command::Oracle(a) => commands::oracle(&config::merge(a, config, "oracle")?),
        Command::Mcmc(a) => commands::mcmc(&config::merge(a, config, "mcmc")?),
        Command::Evidence(a) => commands::evidence(&config::merge(a, config, "evidence")?),
        Command::Rank(a) => commands::rank(&config::merge(a, config, "rank")?),
        Command::Compare(a) => commands::compare(&config::merge(a, config, "compare")?),
        Command::Smooth(a) => commands::smooth(&config::merge(a, config, "smooth")?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
