//! Command-line front end for the `mlmi` pipeline.
//!
//! Each subcommand maps to one workflow step: inspect the missing data
//! (`patterns`, `correlate`), impute (`impute`), check convergence
//! (`diagnose`), derive variables (`transform`), fit the analysis model on
//! every imputed dataset (`analyze`) and pool (`pool`). `synth` writes
//! demo and simulation data.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod files;

pub use files::{list_numbered, numbered_name};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mlmi::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl CliError {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "mlmi",
    version,
    about = "Multiple imputation of two-level data with a multivariate mixed-model Gibbs sampler",
    long_about = "Multiple imputation of two-level (clustered) data.\n\n\
        Typical workflow:\n  \
        mlmi patterns  --data d.csv --group ID\n  \
        mlmi impute    --data d.csv --group ID --formula 'MA + SES ~ 1 + (1|ID)' \\\n                 \
        --burnin 5000 --between 500 --m 20 --seed 1 --out run1\n  \
        mlmi diagnose  --chain run1\n  \
        mlmi analyze   --imputations run1 --formula 'MA ~ 1 + SES + (1|ID)' --out run1/fits\n  \
        mlmi pool estimates --fits run1/fits\n\n\
        Exit status: 0 on success, 1 on invalid input or usage, 2 on numerical failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate missing-data patterns.
    ///
    /// One row per distinct pattern, most frequent first, with counts,
    /// relative and cumulative percentages; `-` marks a missing variable.
    /// The group column is excluded.
    Patterns(PatternsArgs),
    /// Pairwise-complete correlations of all numeric columns.
    Correlate(CorrelateArgs),
    /// Generate synthetic two-level data.
    ///
    /// Writes the dataset and a JSON sidecar with the true generating
    /// parameters.
    Synth(SynthArgs),
    /// Impute missing responses with the multilevel Gibbs sampler.
    ///
    /// Writes imp_001.csv .. imp_MMM.csv, the parameter chain (chain.csv)
    /// and the effective configuration (spec.json) to --out. Right-hand-side
    /// variables must be complete. Flags override values from --config.
    Impute(ImputeArgs),
    /// Convergence report and plot export for a stored chain.
    ///
    /// Potential scale reductions are computed per parameter over the
    /// imputation phase, split into --segments pieces. With --plot, trace,
    /// autocorrelation and posterior-summary data are written as CSV and SVG.
    Diagnose(DiagnoseArgs),
    /// Add group means or group-mean-centered variables.
    ///
    /// Script syntax: `groupmean(SES -> SES.mean); cwc(SES by ID -> SES.cwc)`.
    /// Applied to one file, or to every imp_*.csv in a directory with group
    /// means recomputed per dataset.
    Transform(TransformArgs),
    /// Fit the analysis model on every imputed dataset.
    ///
    /// Writes fit_001.json .. fit_MMM.json and the effective configuration
    /// (analysis.json) to --out. Fits run in parallel over --jobs workers.
    Analyze(AnalyzeArgs),
    /// Pool per-imputation fits.
    #[command(subcommand)]
    Pool(PoolCommand),
}

#[derive(Debug, Clone, Args)]
pub(crate) struct DataArgs {
    /// Delimited input file with a header row.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Grouping (cluster) column.
    #[arg(long, value_name = "NAME")]
    pub group: String,
    /// Field delimiter.
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Read only these columns (comma-separated).
    #[arg(long, value_delimiter = ',', value_name = "NAMES")]
    pub columns: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub(crate) struct ReportArgs {
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct PatternsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Show patterns until this cumulative percentage is reached.
    #[arg(long, default_value_t = 100.0, value_name = "PCT")]
    pub cumulative: f64,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args)]
pub(crate) struct CorrelateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args)]
pub(crate) struct SynthArgs {
    #[command(subcommand)]
    pub model: SynthModel,
}

#[derive(Debug, Subcommand)]
pub(crate) enum SynthModel {
    /// Demo data shaped like a large-scale reading survey: 8,767 students
    /// in 475 classes, seven variables, 61% planned-plus-unit missingness
    /// on DPM.
    Pirls {
        #[arg(long)]
        seed: u64,
        /// Output dataset.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Sidecar with the true parameters [default: <out>.truth.json].
        #[arg(long, value_name = "FILE")]
        truth: Option<PathBuf>,
    },
    /// Two-level normal data from a JSON spec, or a random-intercept model
    /// for one response `y` with total variance 1 given --icc.
    TwoLevel(TwoLevelArgs),
}

#[derive(Debug, Args)]
pub(crate) struct TwoLevelArgs {
    /// JSON generating spec (n_groups, group_size, responses, covariates,
    /// random_slopes, beta, psi, sigma, seed).
    #[arg(long, value_name = "FILE", conflicts_with = "icc")]
    pub config: Option<PathBuf>,
    /// Number of groups.
    #[arg(long)]
    pub groups: Option<usize>,
    /// Rows per group.
    #[arg(long)]
    pub size: Option<usize>,
    /// Intraclass correlation of the random-intercept model.
    #[arg(long)]
    pub icc: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Delete values: VAR=RATE, repeatable.
    #[arg(long, value_name = "VAR=RATE")]
    pub ampute: Vec<String>,
    /// Standardized driver of MAR deletion; MCAR when absent.
    #[arg(long, value_name = "NAME")]
    pub driver: Option<String>,
    /// Logistic slope on the driver.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub slope: f64,
    /// Seed for the deletion step [default: seed + 1].
    #[arg(long)]
    pub ampute_seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// [default: <out>.truth.json]
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct ImputeArgs {
    /// JSON run configuration; any flag given overrides its value.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    pub group: Option<String>,
    /// Imputation model, e.g. `MA + SES ~ 1 + (1|ID)`.
    #[arg(long)]
    pub formula: Option<String>,
    /// Burn-in iterations.
    #[arg(long)]
    pub burnin: Option<u64>,
    /// Iterations between saved datasets.
    #[arg(long)]
    pub between: Option<u64>,
    /// Number of imputed datasets.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Store every k-th iteration in the chain [default: 10].
    #[arg(long)]
    pub stride: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub(crate) enum ModeArg {
    Multilevel,
    SingleLevel,
}

#[derive(Debug, Args)]
pub(crate) struct DiagnoseArgs {
    /// chain.csv, or an imputation output directory.
    #[arg(long, value_name = "PATH")]
    pub chain: PathBuf,
    #[arg(long, default_value_t = mlmi::diagnostics::DEFAULT_SEGMENTS)]
    pub segments: usize,
    /// R̂ above this flags a parameter.
    #[arg(long, default_value_t = mlmi::diagnostics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Export plot data for this parameter, e.g. `Beta[1,1]`; repeatable.
    #[arg(long, value_name = "PARAM")]
    pub plot: Vec<String>,
    /// Plot kinds: trace, acf, posterior [default: all].
    #[arg(long, value_delimiter = ',')]
    pub kind: Vec<String>,
    /// Directory for plot files [default: plots/ next to the chain].
    #[arg(long, value_name = "DIR")]
    pub plot_dir: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args)]
pub(crate) struct TransformArgs {
    /// A dataset file or a directory of imp_*.csv files.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "NAME")]
    pub group: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Transformation script.
    #[arg(long, required_unless_present = "script_file", conflicts_with = "script_file")]
    pub script: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub script_file: Option<PathBuf>,
    /// Output file, or directory when --input is a directory.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub(crate) struct AnalyzeArgs {
    /// JSON run configuration; any flag given overrides its value.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory of imp_*.csv files.
    #[arg(long, value_name = "DIR", conflicts_with = "data")]
    pub imputations: Option<PathBuf>,
    /// A single complete dataset.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    pub group: Option<String>,
    /// Analysis model, e.g. `MA ~ 1 + SES + (1 + SES|ID)`.
    #[arg(long)]
    pub formula: Option<String>,
    /// ml or reml [default: reml].
    #[arg(long)]
    pub method: Option<String>,
    /// Transformation script applied to each dataset before fitting.
    #[arg(long)]
    pub transform: Option<String>,
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Worker threads [default: available cores].
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub(crate) enum PoolCommand {
    /// Pool fixed effects with Rubin's rules; variance components are
    /// averaged.
    Estimates {
        /// Directory of fit_*.json files.
        #[arg(long, value_name = "DIR")]
        fits: PathBuf,
        /// Small-sample degrees of freedom based on the complete-data df.
        #[arg(long)]
        adjust_df: bool,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Wald test (D1) of one or more constraints on the fixed effects,
    /// e.g. `--constraint 'SES.cwc - SES.mean'`; each constraint is tested
    /// against zero.
    Constraints {
        #[arg(long, value_name = "DIR")]
        fits: PathBuf,
        #[arg(long, required = true, allow_hyphen_values = true)]
        constraint: Vec<String>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Compare nested models fitted by ML: pooled likelihood-ratio test
    /// (D3) or combined chi-square statistics (D2).
    Compare {
        /// Fits of the larger model.
        #[arg(long, value_name = "DIR")]
        full: PathBuf,
        /// Fits of the nested model.
        #[arg(long, value_name = "DIR")]
        null: PathBuf,
        #[arg(long, value_enum, default_value_t = CompareMethod::D3)]
        method: CompareMethod,
        /// Imputed datasets for D3 [default: as recorded by analyze].
        #[arg(long, value_name = "DIR")]
        imputations: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub(crate) enum CompareMethod {
    D2,
    D3,
}

/// Parses `argv` (including the program name), runs one subcommand and
/// returns the process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let res = match cli.command {
        Command::Patterns(a) => commands::patterns(a),
        Command::Correlate(a) => commands::correlate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Impute(a) => commands::impute(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Transform(a) => commands::transform(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Pool(p) => commands::pool(p),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
