//! Command-line surface: validate models, tabulate first-return step
//! probabilities, assemble joint ruin laws, run the simulators, and compare
//! the two pipelines.
//!
//! Exit codes: 0 success, 1 domain error (or a failed comparison), 2 I/O
//! error. CSV goes to --out or stdout; diagnostics go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fluidruin::bridge::QTable;
use fluidruin::joint::{fmt_g12, joint_cdf, result_to_csv, JointLawRequest};
use fluidruin::model::{parse_model, renormalize, validate, ModelSpec};
use fluidruin::sim::{
    convergence_report, convergence_reports_to_csv, default_horizon, empirical_joint_cdf,
    pasting_samples_to_csv, sample_exact_many, sample_pasting_many, ConvergenceBudget,
};
use fluidruin::uniformization::build_kernel;

#[derive(Parser)]
#[command(name = "fluidruin", version, about = "Joint ruin-time laws of coupled fluid processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Cap on worker threads for parallel sampling.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    /// Path to the model JSON file.
    #[arg(long)]
    model: PathBuf,
    /// Rescale generator and switch rows to their required sums before
    /// validating.
    #[arg(long)]
    renormalize_inputs: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file and report every violated invariant.
    Validate {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Tabulate first-return step probabilities p(ell, n) up to n-max.
    Psi {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        n_max: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the approximate joint CDF of the two ruin times on a grid.
    Joint {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        n_max: usize,
        /// Comma-separated ascending first-ruin times.
        #[arg(long, value_delimiter = ',')]
        x_grid: Vec<f64>,
        /// Comma-separated ascending second-ruin times.
        #[arg(long, value_delimiter = ',')]
        y_grid: Vec<f64>,
        /// Accept an n-max below the grid requirement and report the defect.
        #[arg(long)]
        allow_truncation: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw seeded pasting samples and dump them as CSV.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Censoring horizon; defaults to a drift-based scale of the model.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recursion vs Monte Carlo joint CDF, cell by cell.
    Compare {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        n_max: usize,
        #[arg(long, value_delimiter = ',')]
        x_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        y_grid: Vec<f64>,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        allow_truncation: bool,
        /// Per-cell tolerance multiplier on the binomial standard error.
        #[arg(long, default_value_t = 4.0)]
        se_band: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pasting-accuracy diagnostics across a list of observation rates.
    Convergence {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated ascending observation rates.
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 1.0)]
        q: f64,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Domain(String),
    Io(String),
    /// Comparison ran but at least one cell fell outside the tolerance band.
    ToleranceExceeded,
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn domain<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Domain(e.to_string())
}

fn load_model(args: &ModelArgs) -> Result<ModelSpec, CliError> {
    let text = std::fs::read_to_string(&args.model)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.model.display())))?;
    let mut spec = parse_model(&text).map_err(domain)?;
    if args.renormalize_inputs {
        renormalize(&mut spec);
    }
    let report = validate(&spec);
    for issue in &report.issues {
        eprintln!("{} {}: {}", issue.severity, issue.field, issue.message);
    }
    if report.ok() {
        Ok(spec)
    } else {
        Err(CliError::Domain("model validation failed".into()))
    }
}

fn write_output(out: &Option<PathBuf>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Domain(e.to_string()))?;
    }
    match cli.command {
        Command::Validate { model } => {
            let path = model.model.clone();
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let mut spec = parse_model(&text).map_err(domain)?;
            if model.renormalize_inputs {
                renormalize(&mut spec);
            }
            let report = validate(&spec);
            for issue in &report.issues {
                println!("{} {}: {}", issue.severity, issue.field, issue.message);
            }
            if report.ok() {
                Ok(())
            } else {
                Err(CliError::Domain("model validation failed".into()))
            }
        }
        Command::Psi { model, gamma, n_max, out } => {
            let spec = load_model(&model)?;
            if n_max < 2 {
                return Err(CliError::Domain(format!("n-max must be at least 2, got {n_max}")));
            }
            let mut csv = String::from("coord,ell,n,value\n");
            for (k, coord) in spec.coord.iter().enumerate() {
                let kernel = build_kernel(coord, gamma).map_err(domain)?;
                let table = QTable::new(kernel);
                let row = initial_plus_row(&spec, k);
                for n in 2..=n_max {
                    for ell in 0..=n {
                        let v = table.ruin_step_pmf(row, ell as i64, n).map_err(domain)?;
                        csv.push_str(&format!("{},{},{},{}\n", k + 1, ell, n, fmt_g12(v)));
                    }
                }
            }
            write_output(&out, &csv)
        }
        Command::Joint { model, gamma, n_max, x_grid, y_grid, allow_truncation, out } => {
            let spec = load_model(&model)?;
            let req = JointLawRequest { spec, gamma, x_grid, y_grid, n_max, allow_truncation };
            let result = joint_cdf(&req).map_err(domain)?;
            write_output(&out, &result_to_csv(&result))
        }
        Command::Simulate { model, gamma, samples, seed, horizon, out } => {
            let spec = load_model(&model)?;
            let horizon = horizon.unwrap_or_else(|| default_horizon(&spec));
            let drawn = sample_pasting_many(&spec, gamma, samples, seed, horizon).map_err(domain)?;
            let censored = drawn.iter().filter(|s| s.base.censored).count();
            eprintln!(
                "censoring: {} of {} samples at horizon {}",
                censored,
                drawn.len(),
                fmt_g12(horizon)
            );
            write_output(&out, &pasting_samples_to_csv(&drawn))
        }
        Command::Compare {
            model,
            gamma,
            n_max,
            x_grid,
            y_grid,
            samples,
            seed,
            horizon,
            allow_truncation,
            se_band,
            out,
        } => {
            let spec = load_model(&model)?;
            let horizon = horizon.unwrap_or_else(|| default_horizon(&spec));
            let req = JointLawRequest {
                spec: spec.clone(),
                gamma,
                x_grid: x_grid.clone(),
                y_grid: y_grid.clone(),
                n_max,
                allow_truncation,
            };
            let law = joint_cdf(&req).map_err(domain)?;
            let paths = sample_exact_many(&spec, samples, seed, horizon).map_err(domain)?;
            let emp = empirical_joint_cdf(&paths, &x_grid, &y_grid).map_err(domain)?;
            let m = samples as f64;
            let mut csv = String::from("x,y,total,empirical,se,defect,diff,within\n");
            let mut all_within = true;
            for (xi, &x) in x_grid.iter().enumerate() {
                for (yi, &y) in y_grid.iter().enumerate() {
                    let total = law.total[(xi, yi)];
                    let e = emp.total[(xi, yi)];
                    // Guard the band against empirical cells with zero hits.
                    let se = emp.se[(xi, yi)].max((total * (1.0 - total) / m).sqrt());
                    let defect = law.truncation_defect[(xi, yi)];
                    let diff = (total - e).abs();
                    let within = diff <= se_band * se + defect;
                    all_within &= within;
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        fmt_g12(x),
                        fmt_g12(y),
                        fmt_g12(total),
                        fmt_g12(e),
                        fmt_g12(se),
                        fmt_g12(defect),
                        fmt_g12(diff),
                        u8::from(within),
                    ));
                }
            }
            eprintln!(
                "compare: censoring fraction {}",
                fmt_g12(emp.censoring_fraction)
            );
            write_output(&out, &csv)?;
            if all_within {
                Ok(())
            } else {
                Err(CliError::ToleranceExceeded)
            }
        }
        Command::Convergence { model, gammas, epsilon, q, samples, seed, horizon, out } => {
            let spec = load_model(&model)?;
            let horizon = horizon.unwrap_or_else(|| default_horizon(&spec));
            let budget = ConvergenceBudget { epsilon, q, gammas };
            let reports = convergence_report(&spec, &budget, samples, seed, horizon).map_err(domain)?;
            write_output(&out, &convergence_reports_to_csv(&reports))
        }
    }
}

/// Row index of the coordinate's initial state in the positive-rate ordering.
fn initial_plus_row(spec: &ModelSpec, k: usize) -> usize {
    let part = fluidruin::model::partition_signs(&spec.coord[k]);
    let idx = spec.coord[k].initial_index();
    part.plus_pre
        .iter()
        .position(|&i| i == idx)
        .expect("validated models have a positive-rate initial state")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::ToleranceExceeded) => {
            eprintln!("error: at least one cell outside the tolerance band");
            ExitCode::from(1)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
