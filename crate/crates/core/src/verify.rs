//! Randomized property suite backing the `verify` command.
//!
//! Each check simulates batches of randomly drawn problems and measures an
//! invariant the solvers and the integrator are supposed to satisfy. The
//! batches are driven by a seeded generator, so a report is reproducible
//! from its seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::MagdelaineParams;
use crate::optimize::{
    incidence_floor, min_start_at_duration, optimize_magdelaine, required_amount,
    MagdelaineProblem,
};
use crate::scenario::{ModelConfig, Scenario};
use crate::signals::{Disturbance, PulseInput};
use crate::simulate::{crossing_count, extrema, simulate, Grid, ModelSpec};

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    /// Measured values backing the verdict.
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub scenario: String,
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// Random five-state problem in a regime where the solvers are exercised but
/// not degenerate: the bound sits well inside the achievable range.
fn random_problem(rng: &mut ChaCha8Rng) -> MagdelaineProblem {
    let a = rng.gen_range(0.4..1.5);
    let ratio = rng.gen_range(0.04..0.10);
    let alpha3 = rng.gen_range(0.02..0.08);
    let alpha5 = rng.gen_range(0.03..0.12);
    let params = MagdelaineParams::new(a, alpha3, ratio * a, alpha5, 0.0).unwrap();
    let start = rng.gen_range(80.0..200.0);
    let width = rng.gen_range(2.0..60.0);
    let area = rng.gen_range(20.0..80.0);
    let d = Disturbance::rectangular(area / width, start, start + width);
    let floor = incidence_floor(&params, &d);
    let lambda = rng.gen_range(0.25..0.70) * floor;
    let mut prob = MagdelaineProblem::new(params, d, lambda);
    prob.h = 0.5;
    prob
}

fn check(name: &str, passed: bool, detail: String) -> PropertyResult {
    PropertyResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// An adequate bolus returns the response to the set point, and the plasma
/// insulin integral reproduces the delivered amount.
fn restoring_amount(rng: &mut ChaCha8Rng, n: usize) -> Result<PropertyResult> {
    let mut worst_settle: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..n {
        let prob = random_problem(rng);
        let amount = required_amount(&prob.params, &prob.disturbance);
        let tail = 16.0 / prob.params.alpha3.min(prob.params.alpha5);
        let t_end = prob.disturbance.active_end() + tail;
        let grid = Grid::new(t_end, 0.25)?;
        let spec = ModelSpec::magdelaine(prob.params);
        let tau = rng.gen_range(0.0..40.0);
        let tp = rng.gen_range(0.0..120.0);
        let u = PulseInput::with_amount(tp, tau, amount);
        let traj = simulate(&spec, &u, &prob.disturbance, &grid)?;
        worst_settle = worst_settle.max(traj.g.last().unwrap().abs());
        let mut integral = 0.0;
        for i in 0..traj.len() - 1 {
            let x = traj.state(i)[1];
            let x_next = traj.state(i + 1)[1];
            integral += 0.5 * (x + x_next) * (traj.times[i + 1] - traj.times[i]);
        }
        worst_rel = worst_rel.max((integral - amount).abs() / amount);
    }
    Ok(check(
        "restoring-amount identity",
        worst_settle < 1e-2 && worst_rel < 1e-3,
        format!("worst |g(t_end)| = {worst_settle:.2e}, worst insulin-integral error = {worst_rel:.2e}"),
    ))
}

/// The deepest reachable minimum is -b * (disturbance area): a bound just
/// above it admits an incident impulse, a bound just below it is rejected.
fn feasibility_boundary(rng: &mut ChaCha8Rng, n: usize) -> Result<PropertyResult> {
    let eps = 1e-3;
    for _ in 0..n {
        let mut prob = random_problem(rng);
        // A bound just above the floor is only reachable when the bolus can
        // absorb completely before the meal starts; push the meal out far
        // enough for the insulin chain's tail to be negligible.
        if let Disturbance::Rectangular { magnitude, start, end } = prob.disturbance {
            let margin = 18.0 / prob.params.alpha3;
            prob.disturbance = Disturbance::rectangular(magnitude, margin, margin + (end - start));
        }
        let floor = incidence_floor(&prob.params, &prob.disturbance);
        prob.lambda = floor + eps;
        min_start_at_duration(&prob, 0.0)?;
        prob.lambda = floor - eps;
        match optimize_magdelaine(&prob) {
            Err(Error::Infeasible { .. }) => {}
            other => {
                return Ok(check(
                    "feasibility boundary",
                    false,
                    format!("bound below the floor was not rejected: {other:?}"),
                ))
            }
        }
    }
    Ok(check(
        "feasibility boundary",
        true,
        format!("{n} problems accepted at floor + {eps} and rejected at floor - {eps}"),
    ))
}

/// Responses to equal-amount pulses cross at most twice when one pulse is
/// nested in the other and at most once when they are staggered.
fn crossing_bounds(rng: &mut ChaCha8Rng, n: usize) -> Result<PropertyResult> {
    let mut worst_nested = 0usize;
    let mut worst_staggered = 0usize;
    for _ in 0..n {
        let prob = random_problem(rng);
        let spec = ModelSpec::magdelaine(prob.params);
        let amount = rng.gen_range(5.0..40.0);
        let outer_start = rng.gen_range(20.0..100.0);
        let outer_tau = rng.gen_range(40.0..160.0);
        let t_end = outer_start + outer_tau + 14.0 / prob.params.alpha3.min(prob.params.alpha5);
        let grid = Grid::new(t_end, 0.5)?;
        let d = Disturbance::none();

        let inner_start = outer_start + rng.gen_range(0.01..0.4) * outer_tau;
        let inner_tau = rng.gen_range(0.1..0.5) * outer_tau;
        let outer = PulseInput::with_amount(outer_start, outer_tau, amount);
        let inner = PulseInput::with_amount(inner_start, inner_tau, amount);
        let cr = crossing_count(
            &simulate(&spec, &inner, &d, &grid)?,
            &simulate(&spec, &outer, &d, &grid)?,
            prob.tolerances.crossing_band,
        )?;
        worst_nested = worst_nested.max(cr.count);

        let shift = rng.gen_range(5.0..60.0);
        let second = PulseInput::with_amount(outer_start + shift, outer_tau, amount);
        let cr = crossing_count(
            &simulate(&spec, &outer, &d, &grid)?,
            &simulate(&spec, &second, &d, &grid)?,
            prob.tolerances.crossing_band,
        )?;
        worst_staggered = worst_staggered.max(cr.count);
    }
    Ok(check(
        "response-crossing bounds",
        worst_nested <= 2 && worst_staggered <= 1,
        format!("{n} pairs: worst nested = {worst_nested} (bound 2), worst staggered = {worst_staggered} (bound 1)"),
    ))
}

/// Loosening the lower bound never raises the optimal peak.
fn bound_monotonicity(rng: &mut ChaCha8Rng, n: usize) -> Result<PropertyResult> {
    let slack = 1e-4;
    let mut worst_jump: f64 = f64::NEG_INFINITY;
    for _ in 0..n {
        let mut prob = random_problem(rng);
        let floor = incidence_floor(&prob.params, &prob.disturbance);
        let mut prev = f64::INFINITY;
        for frac in [0.25, 0.40, 0.55, 0.70] {
            prob.lambda = frac * floor;
            let u = min_start_at_duration(&prob, 0.0)?;
            let spec = ModelSpec::magdelaine(prob.params);
            let grid = Grid::new(prob.default_horizon(), prob.h)?;
            let gamma = extrema(
                &simulate(&spec, &u, &prob.disturbance, &grid)?,
                prob.tolerances.noise,
            )
            .gamma;
            worst_jump = worst_jump.max(gamma - prev);
            prev = gamma;
        }
    }
    Ok(check(
        "peak monotone in the bound",
        worst_jump <= slack,
        format!("worst peak increase under a loosened bound = {worst_jump:.2e} (slack {slack:.0e})"),
    ))
}

/// Halving the step changes the reported peak only marginally, and an
/// impulse agrees with a very narrow pulse of the same amount.
fn grid_robustness(scenario: &Scenario) -> Result<PropertyResult> {
    let spec = scenario.model_spec();
    let d = scenario.disturbance;
    let amount = scenario.default_amount();
    let t_end = scenario.horizon()?;
    let h = scenario.grid.h;
    let start = 0.5 * d.active_end();
    let basal = scenario.basal;

    let impulse = PulseInput::impulse(start, amount).with_basal(basal);
    let narrow = PulseInput::with_amount(start, 1e-2, amount).with_basal(basal);
    let g_h = extrema(
        &simulate(&spec, &impulse, &d, &Grid::new(t_end, h)?)?,
        scenario.tolerances.noise,
    )
    .gamma;
    let g_h2 = extrema(
        &simulate(&spec, &impulse, &d, &Grid::new(t_end, 0.5 * h)?)?,
        scenario.tolerances.noise,
    )
    .gamma;
    // The narrow pulse needs a step below its width to be simulated at all.
    let h_fine = 0.005;
    let g_imp_fine = extrema(
        &simulate(&spec, &impulse, &d, &Grid::new(t_end, h_fine)?)?,
        scenario.tolerances.noise,
    )
    .gamma;
    let g_narrow = extrema(
        &simulate(&spec, &narrow, &d, &Grid::new(t_end, h_fine)?)?,
        scenario.tolerances.noise,
    )
    .gamma;
    let halving = (g_h - g_h2).abs();
    let pulse_gap = (g_imp_fine - g_narrow).abs();
    Ok(check(
        "grid robustness",
        halving < 1e-3 && pulse_gap < 1e-3,
        format!("step-halving peak change = {halving:.2e}, impulse vs 0.01-min pulse = {pulse_gap:.2e}"),
    ))
}

/// The scenario's own optimization converges with a certificate.
fn scenario_solves(scenario: &Scenario) -> Result<PropertyResult> {
    match scenario.model {
        ModelConfig::Magdelaine(_) => {
            let prob = scenario.magdelaine_problem()?;
            let res = optimize_magdelaine(&prob)?;
            Ok(check(
                "scenario optimization",
                res.converged,
                format!(
                    "shape {:?}, start {:.2}, duration {:.2}, peak {:.4}",
                    res.certificate.shape, res.input.start, res.input.duration, res.gamma
                ),
            ))
        }
        ModelConfig::Bergman(_) => {
            let prob = scenario.bergman_problem()?;
            let res = crate::optimize::bergman_required_bolus(&prob)?;
            // More insulin than the required bolus must break the bound.
            let spec = scenario.model_spec();
            let grid = Grid::new(prob.default_horizon(), prob.h)?;
            let doubled = PulseInput::impulse(res.input.start, 2.0 * res.input.impulse_amount)
                .with_basal(scenario.basal);
            let min_doubled = simulate(&spec, &doubled, &scenario.disturbance, &grid)?
                .g
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            Ok(check(
                "scenario optimization",
                res.converged && min_doubled < scenario.lambda,
                format!(
                    "required bolus {:.3} at {:.1}, peak {:.4}; doubled bolus dips to {:.3}",
                    res.input.impulse_amount, res.input.start, res.gamma, min_doubled
                ),
            ))
        }
    }
}

/// Built-in five-state scenario used when none is supplied.
pub fn default_scenario() -> Scenario {
    Scenario {
        name: "builtin-short-meal".into(),
        description: "default verification scenario".into(),
        lambda: -1.5,
        basal: 0.0,
        amount: None,
        model: ModelConfig::Magdelaine(
            MagdelaineParams::new(1.5, 0.0332, 0.0885, 0.1, 0.0).unwrap(),
        ),
        disturbance: Disturbance::rectangular(20.0, 200.0, 202.0),
        grid: crate::scenario::GridConfig { h: 0.25, t_end: None },
        tolerances: Default::default(),
        solver: Default::default(),
        sweep: None,
        oracle: None,
    }
}

/// Runs the full property suite.
pub fn run_verify(scenario: Option<&Scenario>, seed: u64) -> Result<VerifyReport> {
    let builtin = default_scenario();
    let scenario = scenario.unwrap_or(&builtin);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let results = vec![
        restoring_amount(&mut rng, 10)?,
        feasibility_boundary(&mut rng, 5)?,
        crossing_bounds(&mut rng, 100)?,
        bound_monotonicity(&mut rng, 3)?,
        grid_robustness(scenario)?,
        scenario_solves(scenario)?,
    ];
    Ok(VerifyReport {
        seed,
        scenario: scenario.name.clone(),
        results,
    })
}
