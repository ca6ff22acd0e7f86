use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use heatlab::experiments::{run_scenario, ScenarioParams, TimeGrid, SCENARIOS};
use heatlab::heat_kernel::evaluate;
use heatlab::model_spaces::spectrum;
use heatlab::{Error, ModelSpace, Point};

/// Certified heat kernels and heat-kernel immersions on model spaces.
///
/// Series budgets are capped by HEATLAB_MAX_LEVELS (default 100000).
#[derive(Parser)]
#[command(name = "heatlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its JSON report (stdout without --out).
    Run {
        /// One of: ihki-sphere, ihki-product, example-4-5, cone-flatness,
        /// asymptotics, trace-identity, takahashi, halfspace, theta-table, s1xr.
        scenario: String,
        /// Model-space expression, e.g. `product(sphere(2,1.0),circle(0.5))`.
        #[arg(long)]
        space: Option<ModelSpace>,
        /// `lo:hi:n` (log-spaced), `lo:hi:n:lin`, or a comma list.
        #[arg(long = "t-grid")]
        t_grid: Option<TimeGrid>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Circle radius for example-4-5, theta-table and s1xr.
        #[arg(long)]
        r: Option<f64>,
        /// Dimension for halfspace.
        #[arg(long)]
        n: Option<usize>,
        /// Time for halfspace.
        #[arg(long)]
        t: Option<f64>,
        /// Top level for takahashi, pair count for cone-flatness.
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate ρ(x, y, t) and print it with its certificate as JSON.
    Eval {
        #[arg(long)]
        space: ModelSpace,
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[arg(long, allow_hyphen_values = true)]
        y: String,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Print eigenvalue levels 0 through --levels with multiplicities.
    Spectrum {
        #[arg(long)]
        space: ModelSpace,
        #[arg(long, default_value_t = 10)]
        levels: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Error>().is_some_and(|e| matches!(e, Error::UnknownScenario(_)));
            if usage {
                eprintln!("known scenarios: {}", SCENARIOS.join(", "));
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run { scenario, space, t_grid, tol, out, csv, r, n, t, levels, seed } => {
            let params = ScenarioParams { space, grid: t_grid, tol, r, n, t, levels, seed };
            let report = run_scenario(&scenario, &params)?;
            match &out {
                Some(path) => report.write_json(path).with_context(|| format!("writing {}", path.display()))?,
                None => writeln!(stdout, "{}", report.to_json()?)?,
            }
            if let Some(path) = &csv {
                report.write_csv(path).with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(w) = &report.witness {
                eprintln!("invariant failed: {} (observed {}, bound {})", w.name, w.observed.text(), w.bound.text());
            }
            eprintln!("{}: {}", report.scenario, report.verdict);
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Eval { space, x, y, t, tol } => {
            let x = Point::parse(&space, &x)?;
            let y = Point::parse(&space, &y)?;
            let v = evaluate(&space, &x, &y, t, tol)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&v)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Spectrum { space, levels } => {
            writeln!(stdout, "level\tmu\tmultiplicity")?;
            for s in spectrum(&space, levels)? {
                writeln!(stdout, "{}\t{:?}\t{}", s.level, s.mu, s.multiplicity)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
