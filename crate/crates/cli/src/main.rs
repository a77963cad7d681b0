//! `dauc`: generate data, train a model, categorize uncertain predictions and
//! evaluate the result.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dauc_core::categorizer::ThresholdBasis;
use dauc_core::classifier::ModelKind;
use dauc_core::{Category, KernelFamily};

#[derive(Parser, Debug)]
#[command(
    name = "dauc",
    version,
    about = "Density-based categorization of uncertain predictions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic train/val/test feature CSVs.
    Generate {
        #[command(subcommand)]
        dataset: Dataset,
    },
    /// Train a classifier and write latent CSVs for every split.
    Train(TrainArgs),
    /// Score test latents and assign uncertainty categories.
    Categorize(CategorizeArgs),
    /// Retrain on density-filtered training data and compare on a target category.
    Inverse(InverseArgs),
    /// Per-category precision / recall / F1 of a categorization report.
    Evaluate(EvaluateArgs),
    /// Precision-recall curves from a quantile sweep of each score.
    PrCurve(PrCurveArgs),
}

#[derive(Subcommand, Debug)]
pub enum Dataset {
    /// Two moons plus mislabelled clusters and test-only outliers.
    TwoSmiles(TwoSmilesArgs),
}

#[derive(Args, Debug)]
pub struct TwoSmilesArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6000)]
    pub n_moons: usize,
    #[arg(long, default_value_t = 0.1)]
    pub moon_noise: f64,
    /// Points per cluster per split.
    #[arg(long, default_value_t = 150)]
    pub cluster_n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub cluster_std: f64,
    /// Outliers per outlier center (test split only).
    #[arg(long, default_value_t = 750)]
    pub ood_n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub ood_std: f64,
    /// Train, validation and test share of the moon points.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.275, 0.275, 0.45])]
    pub split_fractions: Vec<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelArg {
    Linear,
    Mlp,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Linear => ModelKind::Linear,
            ModelArg::Mlp => ModelKind::Mlp,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KernelArg {
    Gaussian,
    Exponential,
    Tophat,
}

impl From<KernelArg> for KernelFamily {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Gaussian => KernelFamily::Gaussian,
            KernelArg::Exponential => KernelFamily::Exponential,
            KernelArg::Tophat => KernelFamily::Tophat,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BasisArg {
    Test,
    Val,
}

impl From<BasisArg> for ThresholdBasis {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Test => ThresholdBasis::Test,
            BasisArg::Val => ThresholdBasis::Val,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TargetArg {
    #[value(name = "bi")]
    BndIdm,
    Bnd,
    Idm,
    Ood,
    Other,
}

impl From<TargetArg> for Category {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::BndIdm => Category::BndIdm,
            TargetArg::Bnd => Category::Bnd,
            TargetArg::Idm => Category::Idm,
            TargetArg::Ood => Category::Ood,
            TargetArg::Other => Category::Other,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct OptimizerArgs {
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    /// Mini-batch size; full batch when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with train.csv, val.csv and test.csv feature files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Linear)]
    pub model: ModelArg,
    /// Hidden width of the MLP (its latent dimension).
    #[arg(long, default_value_t = 8)]
    pub latent_dim: usize,
    #[command(flatten)]
    pub opt: OptimizerArgs,
    /// Output directory for checkpoint.json and the latent CSVs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LatentInputs {
    /// Directory holding train.csv, val.csv and test.csv latent files.
    #[arg(long)]
    pub latents: PathBuf,
}

#[derive(Args, Debug)]
pub struct CategorizeArgs {
    #[command(flatten)]
    pub inputs: LatentInputs,
    /// Quantile for both thresholds; defaults to validation accuracy.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub q_bnd: Option<f64>,
    #[arg(long)]
    pub q_idm: Option<f64>,
    #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
    #[arg(long, value_enum, default_value_t = BasisArg::Test)]
    pub threshold_basis: BasisArg,
    /// Drop each training point's own kernel term when computing the OOD threshold.
    #[arg(long)]
    pub leave_one_out: bool,
    /// Only categorize rows with u >= this value; the rest are Trusted.
    #[arg(long)]
    pub u_threshold: Option<f64>,
    /// Checkpoint used for the entropy fallback when the test file has no u column.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InverseArgs {
    #[command(flatten)]
    pub inputs: LatentInputs,
    /// Categorization report that defines the target set.
    #[arg(long)]
    pub report: PathBuf,
    /// Discard proportions to try.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.6, 0.9])]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub bandwidth: f64,
    #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
    pub kernel: KernelArg,
    #[arg(long, value_enum, default_value_t = TargetArg::BndIdm)]
    pub target: TargetArg,
    #[command(flatten)]
    pub opt: OptimizerArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Test latent CSV supplying gold labels.
    #[arg(long)]
    pub test: PathBuf,
    /// Extra gold masks: CSV `id,<category>...` with 0/1 cells.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PrCurveArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, default_value_t = 19)]
    pub n_points: usize,
    /// Output directory for pr_curve.csv and pr_curve.json.
    #[arg(long)]
    pub out: PathBuf,
}

/// A broken internal invariant, as opposed to bad input.
#[derive(Debug)]
pub struct Internal(pub String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "internal error: {}", self.0)
    }
}

impl std::error::Error for Internal {}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DAUC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("DAUC_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("DAUC_THREADS must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = std::panic::catch_unwind(|| {
        configure_threads()?;
        commands::run(cli.command)
    });
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Internal>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
        Err(_) => ExitCode::from(3),
    }
}
