//! `perfinf` — simulate performative trajectories and reproduce the
//! coverage, Q-Q, score-quality and convergence experiments as data files.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use performative_core::estimator::LambdaPolicy;
use performative_core::inference::GradGMode;
use performative_harness::config::ExperimentConfig;
use performative_harness::output::{self, Format};
use performative_harness::runner;

#[derive(Parser)]
#[command(
    name = "perfinf",
    about = "Statistical inference experiments under performative data generation"
)]
struct Cli {
    /// JSON experiment configuration; the built-in default setting is used
    /// when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured trial count.
    #[arg(long, global = true)]
    trials: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Use the analytic Jacobian of the update map instead of the fitted
    /// score model.
    #[arg(long = "oracle-gradg", global = true)]
    oracle_gradg: bool,

    /// Output format for the tabular subcommands.
    #[arg(long, global = true, value_enum, default_value_t = CliFormat::Csv)]
    format: CliFormat,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliFormat {
    Csv,
    Json,
}

impl From<CliFormat> for Format {
    fn from(f: CliFormat) -> Format {
        match f {
            CliFormat::Csv => Format::Csv,
            CliFormat::Json => Format::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one trajectory at the largest grid size and write trajectory.json.
    Simulate {
        /// zero | greedy | fixed:<value>
        #[arg(long, default_value = "zero")]
        policy: PolicyArg,
        /// Include the full per-step datasets in the output.
        #[arg(long)]
        include_datasets: bool,
    },
    /// Coverage and width of the confidence regions, per (policy, n, t).
    /// Columns: policy,n,t,coverage_t,coverage_ps,se,mean_width,mean_lambda.
    Coverage,
    /// Mahalanobis Q-Q diagnostic of the CLT at the largest grid size.
    /// Columns: rank,observed_m2,chi2_quantile.
    Qq,
    /// Score-fit quality and variance error against the analytic recursion.
    /// Columns: n,t,j_psi,var_err.
    ScoreEval,
    /// Underlying-trajectory distance to the stable point and its geometric
    /// bound. Columns: t,dist_to_ps,bound.
    Convergence,
}

#[derive(Clone)]
struct PolicyArg(LambdaPolicy);

impl FromStr for PolicyArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(PolicyArg(LambdaPolicy::Zero)),
            "greedy" => Ok(PolicyArg(LambdaPolicy::Greedy)),
            other => {
                let value = other.strip_prefix("fixed:").ok_or_else(|| {
                    format!("unknown policy '{other}' (zero | greedy | fixed:<v>)")
                })?;
                let v: f64 = value
                    .parse()
                    .map_err(|_| format!("bad fixed lambda '{value}'"))?;
                Ok(PolicyArg(LambdaPolicy::Fixed(v)))
            }
        }
    }
}

fn load_config(cli: &Cli) -> performative_harness::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(trials) = cli.trials {
        config.trials = trials;
    }
    if cli.oracle_gradg {
        config.score.mode = GradGMode::Oracle;
    }
    config.validate()?;
    Ok(config)
}

fn out_path(dir: &Path, stem: &str, format: Format) -> PathBuf {
    dir.join(format!("{stem}.{}", format.extension()))
}

fn run(cli: &Cli) -> performative_harness::Result<PathBuf> {
    let config = load_config(cli)?;
    let format: Format = cli.format.into();
    match &cli.command {
        Command::Simulate {
            policy,
            include_datasets,
        } => {
            let record = runner::run_simulate(&config, policy.0, *include_datasets)?;
            let path = cli.out.join("trajectory.json");
            output::atomic_write(&path, &output::to_json(&record)?)?;
            Ok(path)
        }
        Command::Coverage => {
            let summary = runner::run_coverage(&config)?;
            let path = out_path(&cli.out, "coverage", format);
            output::atomic_write(&path, &output::render_coverage(&summary, format)?)?;
            Ok(path)
        }
        Command::Qq => {
            let points = runner::run_qq(&config)?;
            let path = out_path(&cli.out, "qq", format);
            output::atomic_write(&path, &output::render_qq(&points, format)?)?;
            Ok(path)
        }
        Command::ScoreEval => {
            let rows = runner::run_score_eval(&config)?;
            let path = out_path(&cli.out, "score_eval", format);
            output::atomic_write(&path, &output::render_score_eval(&rows, format)?)?;
            Ok(path)
        }
        Command::Convergence => {
            let rows = runner::run_convergence(&config)?;
            let path = out_path(&cli.out, "convergence", format);
            output::atomic_write(&path, &output::render_convergence(&rows, format)?)?;
            Ok(path)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(path) => {
            println!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
