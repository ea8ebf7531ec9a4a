//! `nullheat` command-line front end.
//!
//! Exit codes: 0 converged, 2 divergence or non-convergence classified,
//! 3 configuration error, 4 solver failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nullheat::scenario::{self, Scenario, ScenarioError, EXIT_CONFIG, EXIT_SOLVER};

#[derive(Parser, Debug)]
#[command(name = "nullheat", version, about = "Null controls for the 1D semilinear heat equation")]
struct Cli {
    /// Single-threaded, order-fixed reductions; reruns match bit for bit.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (ignored with --deterministic).
    #[arg(long, global = true, env = "NULLHEAT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its artifacts.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory (default: the scenario's `output`, else runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario's solver.
        #[arg(long)]
        solver: Option<String>,
    },
    /// Merge completed run directories into one table.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
    /// Rerun a scenario on nx = nt = n for each level.
    Refine {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        levels: Vec<usize>,
        #[arg(long, default_value = "refinement")]
        out: PathBuf,
    },
    /// Write the weight table of a scenario's grid as CSV.
    WeightsDump {
        #[arg(long)]
        scenario: PathBuf,
        /// Weight parameter s (default: the solver's initial s).
        #[arg(long)]
        s: Option<f64>,
        #[arg(long, default_value = "weights.csv")]
        out: PathBuf,
    },
}

fn setup_threads(cli: &Cli) -> Result<()> {
    nullheat::par::set_deterministic(cli.deterministic);
    let n = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<i32> {
    setup_threads(&cli)?;
    match cli.cmd {
        Command::Run { scenario, out, solver } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(s) = solver {
                sc.solver = s;
            }
            let rep = scenario::run(&sc, out.as_deref())?;
            let s = &rep.summary;
            println!(
                "{} [{}]: {} after {} iteration(s), E = {:.3e}, |y(T)|/|u0| = {:.3e}, s = {}, {:.2} s -> {}",
                s.scenario,
                s.method,
                s.outcome,
                s.iterations,
                s.e_final,
                s.terminal_ratio,
                s.s_final,
                rep.seconds,
                rep.dir.display()
            );
            if !s.reason.is_empty() {
                println!("  {}", s.reason);
            }
            Ok(s.exit_code)
        }
        Command::Compare { runs, out } => {
            let rows = scenario::compare(&runs, &out)?;
            for r in &rows {
                println!(
                    "{:<24} {:<20} {:<14} {:>4} {:>11.3e} {:>11.3e} {:>8.2}",
                    r.run, r.method, r.outcome, r.iterations, r.sqrt_e_final, r.terminal_norm, r.seconds
                );
            }
            println!("-> {}", out.join("comparison.csv").display());
            Ok(0)
        }
        Command::Refine { scenario, levels, out } => {
            let sc = Scenario::load(&scenario)?;
            let rows = scenario::refine(&sc, &levels, &out)?;
            for r in &rows {
                println!(
                    "nx = {:>4}: terminal {:.3e} (x{:.2}), E {:.3e}, diff to finest {:.3e}",
                    r.nx, r.terminal_norm, r.terminal_reduction, r.e_final, r.diff_to_finest
                );
            }
            println!("-> {}", out.join("refinement.csv").display());
            Ok(0)
        }
        Command::WeightsDump { scenario, s, out } => {
            let sc = Scenario::load(&scenario)?;
            scenario::weights_dump(&sc, s, &out)?;
            println!("-> {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<ScenarioError>().map_or(EXIT_SOLVER, |s| s.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
