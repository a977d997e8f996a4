use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use linkreg::harness::{self, FitRequest, McRequest, TableMode};
use linkreg::{Coefficients, Error, EstimatorKind, SolverOptions};

#[derive(Parser)]
#[command(name = "linkreg", version, about = "Logistic regression on probabilistically linked data")]
struct Cli {
    /// Suppress the summary printed to stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    Oracle,
    Estimated,
}

impl From<TableArg> for TableMode {
    fn from(t: TableArg) -> Self {
        match t {
            TableArg::Oracle => TableMode::Oracle,
            TableArg::Estimated => TableMode::Estimated,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a linked dataset from a scenario file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one estimator to a dataset CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// oracle, naive, chipperfield or optimal.
        #[arg(long)]
        estimator: String,
        #[arg(long, value_enum, default_value = "estimated")]
        table: TableArg,
        /// Scenario file; needed for `--table oracle`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        review_prob: Option<f64>,
        /// Extra re-freezing rounds for the optimal estimator.
        #[arg(long, default_value_t = 0)]
        extra_iterations: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the match-probability table as CSV.
        #[arg(long)]
        table_out: Option<PathBuf>,
    },
    /// Run a Monte Carlo study.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        /// Write per-replication estimates as CSV.
        #[arg(long)]
        emit_plot_data: Option<PathBuf>,
    },
    /// Compare the two sides of the score identity at a coefficient vector.
    Audit {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated coefficients; defaults to the scenario's truth.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        beta: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100_000)]
        n_mc: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> linkreg::Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let seed = harness::cmd_simulate(&config, &out, seed)?;
            if !quiet {
                eprintln!("wrote {} (seed {seed})", out.display());
            }
        }
        Command::Fit {
            data,
            estimator,
            table,
            config,
            review_prob,
            extra_iterations,
            out,
            table_out,
        } => {
            let mut kind: EstimatorKind = estimator.parse()?;
            if let EstimatorKind::OptimalTwoStep {
                extra_iterations: e, ..
            } = &mut kind
            {
                *e = extra_iterations;
            }
            let report = harness::cmd_fit(&FitRequest {
                data: &data,
                estimator: kind,
                table_mode: table.into(),
                config: config.as_deref(),
                review_probability: review_prob,
                out: &out,
                table_out: table_out.as_deref(),
                solver: SolverOptions::default(),
            })?;
            if !quiet {
                eprintln!(
                    "{}: beta = {:?} converged = {} iterations = {}",
                    report.estimator, report.beta, report.converged, report.iterations
                );
            }
        }
        Command::Mc {
            config,
            out,
            seed,
            reps,
            emit_plot_data,
        } => {
            let report = harness::cmd_mc(&McRequest {
                config: &config,
                out: &out,
                seed,
                replications: reps,
                plot_data: emit_plot_data.as_deref(),
            })?;
            if !quiet {
                for s in &report.estimators {
                    eprintln!(
                        "{:>12}  bias = {:?}  trace = {:.3e}  converged = {}/{}",
                        s.estimator,
                        s.bias,
                        s.trace_empirical,
                        s.converged,
                        report.replications
                    );
                }
                if let Some(v) = &report.efficiency {
                    eprintln!("efficiency: {:?}", v.branch);
                }
            }
        }
        Command::Audit {
            config,
            beta,
            n_mc,
            seed,
            out,
        } => {
            let beta = beta.map(Coefficients::new).transpose()?;
            let report = harness::cmd_score_audit(&config, beta, n_mc, seed, &out)?;
            if !quiet {
                eprintln!(
                    "min eigenvalue of gap = {:.3e}, positive definite = {}",
                    report.min_eigenvalue, report.positive_definite
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
