//! Command-line interface: scenario-driven simulation, optimization, sweeps
//! and the randomized property suite, with CSV/JSON outputs for plotting and
//! regression.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use crate::optimize::{
    bergman_required_bolus, brute_force_oracle, optimize_magdelaine, sweep, OptimizationResult,
};
use crate::scenario::{ModelConfig, Scenario};
use crate::signals::PulseInput;
use crate::simulate::{extrema, simulate, Grid, Trajectory};
use crate::verify::run_verify;

#[derive(Debug, Parser)]
#[command(
    name = "bolusopt",
    about = "Constrained bolus-input optimization for glucose-insulin models",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write the trajectory as CSV with an extrema
    /// summary as JSON.
    Simulate {
        /// Scenario file (TOML).
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for trajectory.csv and extrema.json.
        #[arg(long)]
        out: PathBuf,
        /// Bolus start time, minutes. Without it the bolus-free response is
        /// simulated.
        #[arg(long)]
        start: Option<f64>,
        /// Bolus duration, minutes; zero means an impulse.
        #[arg(long, default_value_t = 0.0)]
        duration: f64,
        /// Total bolus amount; defaults to the scenario's amount.
        #[arg(long)]
        amount: Option<f64>,
    },
    /// Solve the scenario's constrained peak-minimization problem.
    Optimize {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for optimal.json and trajectory.csv; JSON goes
        /// to standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cross-check the solution against the brute-force grid oracle.
        #[arg(long)]
        oracle: bool,
        /// Damp the duration iteration through a running average of the
        /// midpoint proposals instead of plain bisection.
        #[arg(long)]
        averaging: bool,
    },
    /// Evaluate the peak over the scenario's (duration, start) sweep grid.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for sweep.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the randomized property suite.
    Verify {
        /// Scenario file; a built-in scenario is used when absent.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Seed for the randomized batches.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let code = match cli.command {
        Command::Simulate {
            scenario,
            out,
            start,
            duration,
            amount,
        } => run_simulate(&scenario, &out, start, duration, amount),
        Command::Optimize {
            scenario,
            out,
            oracle,
            averaging,
        } => run_optimize(&scenario, out.as_deref(), oracle, averaging),
        Command::Sweep { scenario, out } => run_sweep(&scenario, &out),
        Command::Verify { scenario, seed } => return run_verify_cmd(scenario.as_deref(), seed),
    };
    match code {
        Ok(()) => 0,
        Err(e) => {
            if let Error::Infeasible { lambda, bound } = &e {
                eprintln!("error: lower bound {lambda} is infeasible; the achievable bound is {bound}");
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}

fn write_trajectory_csv(path: &Path, traj: &Trajectory, u: &PulseInput, scenario: &Scenario) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let n_states = traj.n_states;
    let mut header = String::from("t,g");
    for i in 1..=n_states {
        header.push_str(&format!(",x{i}"));
    }
    header.push_str(",u,d");
    writeln!(f, "{header}")?;
    for i in 0..traj.len() {
        let t = traj.times[i];
        let mut line = format!("{t},{}", traj.g[i]);
        for &x in traj.state(i) {
            line.push_str(&format!(",{x}"));
        }
        line.push_str(&format!(
            ",{},{}",
            u.value_at(t),
            scenario.disturbance.value_at(t)
        ));
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

fn simulate_scenario(scenario: &Scenario, u: &PulseInput) -> Result<Trajectory> {
    let grid = Grid::new(
        scenario.grid.t_end.unwrap_or(scenario.horizon()?),
        scenario.grid.h,
    )?;
    simulate(&scenario.model_spec(), u, &scenario.disturbance, &grid)
}

fn run_simulate(
    scenario_path: &Path,
    out: &Path,
    start: Option<f64>,
    duration: f64,
    amount: Option<f64>,
) -> Result<()> {
    let scenario = Scenario::load(scenario_path)?;
    let u = match start {
        Some(tp) => {
            PulseInput::with_amount(tp, duration, amount.unwrap_or(scenario.default_amount()))
        }
        None => PulseInput::zero(),
    }
    .with_basal(scenario.basal);
    u.validate()?;
    let traj = simulate_scenario(&scenario, &u)?;
    let report = extrema(&traj, scenario.tolerances.noise);

    fs::create_dir_all(out)?;
    write_trajectory_csv(&out.join("trajectory.csv"), &traj, &u, &scenario)?;
    let summary = json!({
        "scenario": scenario.name,
        "input": u,
        "extrema": report,
    });
    fs::write(
        out.join("extrema.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    println!(
        "wrote {} points; peak {:.6}, minimum {:.6}",
        traj.len(),
        report.gamma,
        report.lambda_attained
    );
    Ok(())
}

fn solve(scenario: &Scenario, averaging: bool) -> Result<OptimizationResult> {
    match scenario.model {
        ModelConfig::Magdelaine(_) => {
            let mut prob = scenario.magdelaine_problem()?;
            prob.averaging = averaging || prob.averaging;
            optimize_magdelaine(&prob)
        }
        ModelConfig::Bergman(_) => {
            if averaging {
                return Err(Error::Validation(
                    "the averaging iteration applies to the five-state duration search".into(),
                ));
            }
            bergman_required_bolus(&scenario.bergman_problem()?)
        }
    }
}

fn run_optimize(
    scenario_path: &Path,
    out: Option<&Path>,
    oracle: bool,
    averaging: bool,
) -> Result<()> {
    let scenario = Scenario::load(scenario_path)?;
    let mut result = solve(&scenario, averaging)?;

    let oracle_outcome = if oracle {
        if !matches!(scenario.model, ModelConfig::Magdelaine(_)) {
            return Err(Error::Validation(
                "the oracle cross-check applies to the five-state peak minimization".into(),
            ));
        }
        let cfg = scenario.oracle_config()?;
        let outcome = brute_force_oracle(
            &scenario.model_spec(),
            &scenario.disturbance,
            scenario.lambda,
            &cfg,
            &scenario.tolerances,
        )?;
        result.oracle_gap = Some(outcome.gamma - result.gamma);
        Some(outcome)
    } else {
        None
    };

    let summary = json!({
        "scenario": scenario.name,
        "result": result,
        "oracle": oracle_outcome,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("optimal.json"), &text)?;
            let traj = simulate_scenario(&scenario, &result.input)?;
            write_trajectory_csv(&dir.join("trajectory.csv"), &traj, &result.input, &scenario)?;
            println!(
                "optimal input: start {:.4}, duration {:.4}, amount {:.6}; peak {:.6}",
                result.input.start,
                result.input.duration,
                result.input.amount(),
                result.gamma
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run_sweep(scenario_path: &Path, out: &Path) -> Result<()> {
    let scenario = Scenario::load(scenario_path)?;
    let cfg = scenario.sweep_config()?;

    if matches!(scenario.model, ModelConfig::Bergman(_)) {
        let required = bergman_required_bolus(&scenario.bergman_problem()?)?
            .input
            .impulse_amount;
        if cfg.amount >= required {
            return Err(Error::Validation(format!(
                "sweep amount {} is not strictly below the required bolus {required:.4}; \
                 use the optimize command for the required-bolus solution",
                cfg.amount
            )));
        }
    }

    let grid = Grid::new(
        scenario.grid.t_end.unwrap_or(scenario.horizon()?),
        scenario.grid.h,
    )?;
    let result = sweep(
        &scenario.model_spec(),
        &scenario.disturbance,
        scenario.lambda,
        &grid,
        &scenario.tolerances,
        &cfg,
    )?;

    fs::create_dir_all(out)?;
    let mut f = std::io::BufWriter::new(fs::File::create(out.join("sweep.csv"))?);
    writeln!(f, "tau,t_prime,gamma,lambda_attained,feasible")?;
    for p in &result.points {
        writeln!(
            f,
            "{},{},{},{},{}",
            p.duration, p.start, p.gamma, p.lambda_attained, p.feasible
        )?;
    }
    f.flush()?;

    if result.points.iter().all(|p| !p.feasible) {
        return Err(Error::EmptyFeasibleSet);
    }
    let summary = json!({
        "scenario": scenario.name,
        "best": result.best,
        "points": result.points.len(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?
    );
    Ok(())
}

fn run_verify_cmd(scenario_path: Option<&Path>, seed: u64) -> i32 {
    let scenario = match scenario_path.map(Scenario::load).transpose() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match run_verify(scenario.as_ref(), seed) {
        Ok(report) => {
            for r in &report.results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            if report.all_passed() {
                println!("all {} properties passed (seed {})", report.results.len(), seed);
                0
            } else {
                eprintln!("verification failed");
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
