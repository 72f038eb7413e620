//! End-to-end acceptance suite: one test per criterion, each printing a
//! single PASS/FAIL line (visible under `--nocapture`; a failing criterion
//! fails its test with the same detail).
//!
//! Tolerances are pinned here, next to the checks they guard.

use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bolusopt::models::MagdelaineParams;
use bolusopt::optimize::{
    bergman_required_bolus, brute_force_oracle, incidence_floor, min_duration_at_start,
    min_start_at_duration,
    optimize_magdelaine, required_amount, sweep, MagdelaineProblem, OracleConfig, SweepConfig,
};
use bolusopt::scenario::Scenario;
use bolusopt::signals::{Disturbance, PulseInput};
use bolusopt::simulate::{
    crossing_count, extrema, simulate, Grid, ModelSpec, ShapeKind, Trajectory,
};
use bolusopt::Error;

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "{} {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "{criterion}: {detail}");
}

/// Per-case check: silent on success so each criterion prints exactly one
/// line, loud on failure.
fn ensure(criterion: &str, passed: bool, detail: &str) {
    if !passed {
        report(criterion, false, detail);
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

fn trapezoid_state(traj: &Trajectory, idx: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..traj.len() - 1 {
        acc += 0.5
            * (traj.state(i)[idx] + traj.state(i + 1)[idx])
            * (traj.times[i + 1] - traj.times[i]);
    }
    acc
}

/// Criterion 1: an adequate bolus carries amount (b/a) * (disturbance area),
/// and the simulated plasma-insulin integral reproduces it.
#[test]
fn adequacy_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_sim: f64 = 0.0;
    for _ in 0..100 {
        let prob = random_problem(&mut rng);
        let p = prob.params;
        let d = prob.disturbance;
        let area = d.transient_integral();
        let amount = required_amount(&p, &d);
        worst_ratio = worst_ratio.max((amount / area - p.b() / p.a()).abs() / (p.b() / p.a()));

        let mut tau = rng.gen_range(0.0..40.0);
        if tau < 0.1 {
            tau = 0.0; // below one grid step: deliver as an impulse
        }
        let tp = rng.gen_range(0.0..120.0);
        let u = PulseInput::with_amount(tp, tau, amount);
        let tail = 18.0 / p.alpha3.min(p.alpha5);
        let t_end = d.active_end().max(u.end()) + tail;
        let traj = simulate(
            &ModelSpec::magdelaine(p),
            &u,
            &d,
            &Grid::new(t_end, 0.1).unwrap(),
        )
        .unwrap();
        let insulin_integral = trapezoid_state(&traj, 1);
        let target = p.b() / p.a() * area;
        worst_sim = worst_sim.max((insulin_integral - target).abs() / target);
    }
    report(
        "adequacy-identity",
        worst_ratio < 1e-9 && worst_sim < 1e-4,
        &format!(
            "100 random disturbances: worst analytic ratio error {worst_ratio:.2e} (tol 1e-9), \
             worst simulated insulin-integral error {worst_sim:.2e} (tol 1e-4)"
        ),
    );
}

/// Criterion 2: the deepest reachable minimum is -b * (disturbance area); a
/// bound just above it is solvable and a bound just below it is rejected.
#[test]
fn feasibility_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let eps = 1e-3;
    for i in 0..20 {
        let mut prob = random_problem(&mut rng);
        // The floor is only approached when the bolus absorbs completely
        // before the meal starts; push the meal out far enough for the
        // insulin chain's tail to be negligible.
        if let Disturbance::Rectangular {
            magnitude,
            start,
            end,
        } = prob.disturbance
        {
            let margin = 18.0 / prob.params.alpha3;
            prob.disturbance =
                Disturbance::rectangular(magnitude, margin, margin + (end - start));
        }
        let floor = incidence_floor(&prob.params, &prob.disturbance);
        prob.lambda = floor + eps;
        let above = min_start_at_duration(&prob, 0.0);
        ensure(
            "feasibility-bound",
            above.is_ok(),
            &format!("scenario {i}: bound floor + {eps} rejected: {above:?}"),
        );
        prob.lambda = floor - eps;
        let below = optimize_magdelaine(&prob);
        if !matches!(below, Err(Error::Infeasible { .. })) {
            ensure(
                "feasibility-bound",
                false,
                &format!("scenario {i}: bound floor - {eps} not rejected: {below:?}"),
            );
        }
    }
    report(
        "feasibility-bound",
        true,
        &format!("20 scenarios solvable at floor + {eps} and infeasible at floor - {eps}"),
    );
}

/// Criterion 3: responses to equal-amount pulses cross at most twice when
/// nested and at most once when staggered.
#[test]
fn crossing_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_nested = 0usize;
    let mut worst_staggered = 0usize;
    let pairs_per_kind = 600;
    for _ in 0..pairs_per_kind {
        let prob = random_problem(&mut rng);
        let spec = ModelSpec::magdelaine(prob.params);
        let amount = rng.gen_range(5.0..40.0);
        let outer_start = rng.gen_range(20.0..100.0);
        let outer_tau = rng.gen_range(40.0..160.0);
        let t_end = outer_start + outer_tau + 14.0 / prob.params.alpha3.min(prob.params.alpha5);
        let grid = Grid::new(t_end, 0.5).unwrap();
        let d = Disturbance::none();

        let inner_start = outer_start + rng.gen_range(0.01..0.4) * outer_tau;
        let inner_tau = rng.gen_range(0.1..0.5) * outer_tau;
        let outer = PulseInput::with_amount(outer_start, outer_tau, amount);
        let inner = PulseInput::with_amount(inner_start, inner_tau, amount);
        assert!(inner.is_nested(&outer));
        let cr = crossing_count(
            &simulate(&spec, &inner, &d, &grid).unwrap(),
            &simulate(&spec, &outer, &d, &grid).unwrap(),
            prob.tolerances.crossing_band,
        )
        .unwrap();
        worst_nested = worst_nested.max(cr.count);

        let shift = rng.gen_range(5.0..60.0);
        let second = PulseInput::with_amount(outer_start + shift, outer_tau, amount);
        assert!(!second.is_nested(&outer) && !outer.is_nested(&second));
        let cr = crossing_count(
            &simulate(&spec, &outer, &d, &grid).unwrap(),
            &simulate(&spec, &second, &d, &grid).unwrap(),
            prob.tolerances.crossing_band,
        )
        .unwrap();
        worst_staggered = worst_staggered.max(cr.count);
    }
    report(
        "crossing-bounds",
        worst_nested <= 2 && worst_staggered <= 1,
        &format!(
            "{} pairs: worst nested crossings {worst_nested} (bound 2), \
             worst staggered crossings {worst_staggered} (bound 1), zero violations",
            2 * pairs_per_kind
        ),
    );
}

/// Criterion 4: loosening the lower bound never raises the optimal peak
/// (impulse placement at fixed duration 0).
#[test]
fn peak_monotone_in_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let slack = 1e-4;
    let mut worst_jump: f64 = f64::NEG_INFINITY;
    for _ in 0..10 {
        let mut prob = random_problem(&mut rng);
        // Bounds near the floor are only reachable when the bolus can mostly
        // absorb before the meal; give the insulin chain room.
        if let Disturbance::Rectangular {
            magnitude,
            start,
            end,
        } = prob.disturbance
        {
            let margin = (4.5 / prob.params.alpha3).max(start);
            prob.disturbance =
                Disturbance::rectangular(magnitude, margin, margin + (end - start));
        }
        let floor = incidence_floor(&prob.params, &prob.disturbance);
        let spec = ModelSpec::magdelaine(prob.params);
        let grid = Grid::new(prob.default_horizon(), prob.h).unwrap();
        let mut prev = f64::INFINITY;
        // Fractions of the floor in decreasing-bound (loosening) order.
        for frac in [0.20, 0.35, 0.50, 0.65, 0.80] {
            prob.lambda = frac * floor;
            let u = min_start_at_duration(&prob, 0.0).unwrap();
            let gamma = extrema(
                &simulate(&spec, &u, &prob.disturbance, &grid).unwrap(),
                prob.tolerances.noise,
            )
            .gamma;
            worst_jump = worst_jump.max(gamma - prev);
            prev = gamma;
        }
    }
    report(
        "peak-monotone-in-bound",
        worst_jump <= slack,
        &format!(
            "10 scenarios x 5 bounds: worst peak increase under a loosened bound \
             {worst_jump:.2e} (slack {slack:.0e}), zero violations"
        ),
    );
}

/// Criterion 5: the five-state solver converges on randomized disturbances,
/// certifies every optimum, and matches an exhaustive oracle on a 1-minute
/// grid within the grid's own resolution.
#[test]
fn certification_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_fwd: f64 = f64::NEG_INFINITY; // oracle above solver
    let mut worst_back: f64 = f64::NEG_INFINITY; // solver above oracle
    let mut i = 0usize;
    let mut draws = 0usize;
    while i < 50 {
        draws += 1;
        assert!(draws < 300, "too many degenerate draws");
        let prob = random_problem(&mut rng);
        // A peak driven onto the resting level carries no scale to certify
        // against (the gap bound is relative to the peak); redraw those.
        let res = match optimize_magdelaine(&prob) {
            Ok(res) if res.gamma >= 1e-2 => res,
            Ok(_) => continue,
            Err(Error::AmbiguousShape(_)) => continue,
            Err(e) => panic!("solver failed: {e}"),
        };
        ensure(
            "certification",
            res.converged,
            &format!("scenario {i}: solver did not converge"),
        );
        let certified = match res.certificate.shape {
            ShapeKind::Type1 => res.input.duration == 0.0,
            ShapeKind::Type2 => {
                res.certificate.equal_max_gap < 1e-3 * res.gamma.abs().max(1e-6)
            }
            ShapeKind::Infeasible => false,
        };
        ensure(
            "certification",
            certified,
            &format!(
                "scenario {i}: uncertified optimum: shape {:?}, duration {}, gap {:.2e}, peak {:.4}",
                res.certificate.shape, res.input.duration, res.certificate.equal_max_gap, res.gamma
            ),
        );

        // Exhaustive oracle over integer start times and a duration grid that
        // brackets the solver's answer.
        let spec = ModelSpec::magdelaine(prob.params);
        let t_end = prob.default_horizon();
        let grid = Grid::new(t_end, prob.h).unwrap();
        let tau = res.input.duration;
        let mut durations: Vec<f64> = vec![0.0, 2.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0];
        for delta in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let cand = (tau.round() + delta).max(0.0);
            if !durations.iter().any(|&x| x == cand) {
                durations.push(cand);
            }
        }
        let amount = required_amount(&prob.params, &prob.disturbance);
        let cfg = OracleConfig {
            sweep: SweepConfig {
                amount,
                basal: 0.0,
                durations,
                start_min: 0.0,
                start_max: prob.disturbance.active_end() + 60.0,
                start_step: 1.0,
            },
            h: prob.h,
            t_end,
            tie_tol: 1e-6,
        };
        let oracle =
            brute_force_oracle(&spec, &prob.disturbance, prob.lambda, &cfg, &prob.tolerances)
                .unwrap();

        // Grid slack: how much the peak moves under one oracle grid cell of
        // input perturbation, measured around the solver's optimum.
        let mut slack: f64 = 0.0;
        for (dt, dtau) in [(-0.5, 0.0), (0.5, 0.0), (0.0, -1.0), (0.0, 1.0)] {
            let start = (res.input.start + dt).max(0.0);
            let tau_p = (res.input.duration + dtau).max(0.0);
            let u = PulseInput::with_amount(start, tau_p, amount);
            let pert = extrema(
                &simulate(&spec, &u, &prob.disturbance, &grid).unwrap(),
                prob.tolerances.noise,
            )
            .gamma;
            slack = slack.max(pert - res.gamma);
        }
        let fwd = oracle.gamma - res.gamma; // > 0: oracle (coarser) above solver
        let back = res.gamma - oracle.gamma; // > 0: oracle beat the solver
        worst_fwd = worst_fwd.max(fwd - (2.0 * slack + 2e-3));
        worst_back = worst_back.max(back - 2e-3);
        ensure(
            "certification",
            fwd <= 2.0 * slack + 2e-3 && back <= 2e-3,
            &format!(
                "scenario {i}: solver peak {:.5} vs oracle peak {:.5} (grid slack {slack:.2e})",
                res.gamma, oracle.gamma
            ),
        );
        i += 1;
    }
    report(
        "certification",
        true,
        &format!(
            "50 randomized disturbances converged with Type1/Type2 certificates; \
             worst oracle margin fwd {worst_fwd:.2e}, back {worst_back:.2e} (both <= 0)"
        ),
    );
}

/// Criterion 6: the bundled five-state scenarios reproduce the reference
/// optima: an impulse of 2.36 at t = 158 and a 315-minute pulse of total
/// 23.625 starting at t = 133 with its minimum of -1.5 between equal maxima.
#[test]
fn bundled_five_state_examples() {
    let short = Scenario::load(&scenario_path("short_meal.toml")).unwrap();
    let prob = short.magdelaine_problem().unwrap();
    let res = optimize_magdelaine(&prob).unwrap();
    let ok = res.converged
        && res.certificate.shape == ShapeKind::Type1
        && res.input.duration == 0.0
        && (res.input.start - 158.0).abs() <= 2.0
        && (res.input.amount() - 2.36).abs() <= 0.02 * 2.36;
    report(
        "bundled-examples",
        ok,
        &format!(
            "short meal: shape {:?}, start {:.2} (158 +/- 2), duration {:.2} (0), \
             amount {:.4} (2.36 +/- 2%)",
            res.certificate.shape,
            res.input.start,
            res.input.duration,
            res.input.amount()
        ),
    );

    let long = Scenario::load(&scenario_path("long_meal.toml")).unwrap();
    let prob = long.magdelaine_problem().unwrap();
    let res = optimize_magdelaine(&prob).unwrap();
    let band = prob.tolerances.incident;
    let ok = res.converged
        && res.certificate.shape == ShapeKind::Type2
        && (res.input.start - 133.0).abs() <= 2.0
        && (res.input.duration - 315.0).abs() <= 2.0
        && (res.input.amount() - 23.625).abs() <= 0.02 * 23.625
        && (res.lambda_attained + 1.5).abs() <= 2.0 * band;
    report(
        "bundled-examples",
        ok,
        &format!(
            "long meal: shape {:?}, start {:.2} (133 +/- 2), duration {:.2} (315 +/- 2), \
             amount {:.4} (23.625 +/- 2%), minimum {:.5} (-1.5), equal-maxima gap {:.2e}",
            res.certificate.shape,
            res.input.start,
            res.input.duration,
            res.input.amount(),
            res.lambda_attained,
            res.certificate.equal_max_gap
        ),
    );
}

/// Criterion 7: on the bundled minimal-model scenario a fixed 20-unit dose
/// below the required bolus is best delivered as an impulse: the swept peak
/// has its argmin at duration 0 and never improves as the dose is spread.
#[test]
fn minimal_model_duration_sweep() {
    let scenario = Scenario::load(&scenario_path("minimal_model_meal.toml")).unwrap();
    let prob = scenario.bergman_problem().unwrap();
    let req = bergman_required_bolus(&prob).unwrap();
    let cfg = scenario.sweep_config().unwrap();
    ensure(
        "minimal-model-sweep",
        req.converged && cfg.amount < req.input.amount(),
        &format!(
            "required bolus {:.3} at t = {:.1} (peak {:.4}), swept dose {}",
            req.input.amount(),
            res_start(&req),
            req.gamma,
            cfg.amount
        ),
    );

    let spec = scenario.model_spec();
    let grid = Grid::new(scenario.horizon().unwrap(), scenario.grid.h).unwrap();
    let result = sweep(
        &spec,
        &scenario.disturbance,
        scenario.lambda,
        &grid,
        &scenario.tolerances,
        &cfg,
    )
    .unwrap();
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for &tau in &cfg.durations {
        let best = result
            .points
            .iter()
            .filter(|p| p.feasible && p.duration == tau)
            .map(|p| p.gamma)
            .fold(f64::INFINITY, f64::min);
        curve.push((tau, best));
    }
    curve.sort_by(|x, y| x.0.total_cmp(&y.0));
    let impulse_best = curve[0].1;
    let argmin_at_zero = curve.iter().all(|&(_, g)| g >= impulse_best);
    let non_decreasing = curve.windows(2).all(|w| w[1].1 >= w[0].1);
    report(
        "minimal-model-sweep",
        argmin_at_zero && non_decreasing,
        &format!("peak by duration: {curve:?} (argmin at 0, non-decreasing)"),
    );
}

fn res_start(res: &bolusopt::optimize::OptimizationResult) -> f64 {
    res.input.start
}

/// Criterion 8: scanning durations from an incident input at a fixed start,
/// the peak and the response integral pick the same duration.
#[test]
fn peak_and_integral_argmin_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut done = 0usize;
    let mut draws = 0usize;
    while done < 10 {
        draws += 1;
        assert!(draws < 100, "too many degenerate draws");
        let prob = random_problem(&mut rng);
        let spec = ModelSpec::magdelaine(prob.params);
        let grid = Grid::new(prob.default_horizon(), prob.h).unwrap();
        let start = rng.gen_range(0.0..prob.disturbance.active_end());
        // Anchor the scan at the shortest bound-touching duration; longer
        // pulses at the same start stay feasible.
        let anchor = match min_duration_at_start(&prob, start) {
            Ok(u) => u,
            Err(_) => continue,
        };
        let amount = anchor.amount();
        let mut scan: Vec<(f64, f64, f64)> = Vec::new(); // (tau, gamma, integral)
        let mut all_positive = true;
        let tau0 = if anchor.duration > 0.0 {
            anchor.duration.max(prob.h)
        } else {
            0.0
        };
        for k in 0..=12 {
            let tau = tau0 + 10.0 * k as f64;
            let u = PulseInput::with_amount(start, tau, amount);
            let rep = extrema(
                &simulate(&spec, &u, &prob.disturbance, &grid).unwrap(),
                prob.tolerances.noise,
            );
            all_positive &= rep.gamma > 0.0;
            scan.push((tau, rep.gamma, rep.gamma_integral));
        }
        // The agreement is only claimed when every scanned peak clears the
        // resting level g(0) = 0.
        if !all_positive {
            continue;
        }
        // First-minimal argmin: exact peak ties (a peak attained before the
        // input acts) resolve to the shortest duration on both sides.
        let argmin_first = |key: fn(&(f64, f64, f64)) -> f64| -> f64 {
            let mut best = &scan[0];
            for p in &scan[1..] {
                if key(p) < key(best) {
                    best = p;
                }
            }
            best.0
        };
        let argmin_gamma = argmin_first(|p| p.1);
        let argmin_integral = argmin_first(|p| p.2);
        ensure(
            "peak-integral-argmin",
            argmin_gamma == argmin_integral,
            &format!(
                "scenario {done}: peak argmin {argmin_gamma} vs integral argmin \
                 {argmin_integral} over scan {scan:?}"
            ),
        );
        done += 1;
    }
    report(
        "peak-integral-argmin",
        true,
        "10 scenarios: peak argmin equals integral argmin on every duration scan",
    );
}

/// Criterion 9: the reported peak is grid-robust on every bundled scenario:
/// step halving moves it by less than 1e-3 and an impulse agrees with a
/// 0.01-minute pulse of the same amount.
#[test]
fn numerical_hygiene() {
    for name in [
        "short_meal.toml",
        "long_meal.toml",
        "minimal_model_meal.toml",
    ] {
        let scenario = Scenario::load(&scenario_path(name)).unwrap();
        let spec = scenario.model_spec();
        let d = scenario.disturbance;
        let amount = match scenario.default_amount() {
            a if a > 0.0 => a,
            _ => 20.0,
        };
        let t_end = scenario.horizon().unwrap();
        let h = scenario.grid.h;
        let start = 0.5 * d.active_end();
        let basal = scenario.basal;
        let gamma_at = |u: &PulseInput, step: f64| -> f64 {
            extrema(
                &simulate(&spec, u, &d, &Grid::new(t_end, step).unwrap()).unwrap(),
                scenario.tolerances.noise,
            )
            .gamma
        };

        let impulse = PulseInput::impulse(start, amount).with_basal(basal);
        let narrow = PulseInput::with_amount(start, 1e-2, amount).with_basal(basal);
        let halving = (gamma_at(&impulse, h) - gamma_at(&impulse, 0.5 * h)).abs();
        // The narrow pulse needs a step below its own width.
        let h_fine = 0.005;
        let pulse_gap = (gamma_at(&impulse, h_fine) - gamma_at(&narrow, h_fine)).abs();
        report(
            "numerical-hygiene",
            halving < 1e-3 && pulse_gap < 1e-3,
            &format!(
                "{name}: step-halving peak change {halving:.2e} (tol 1e-3), \
                 impulse vs 0.01-min pulse {pulse_gap:.2e} (tol 1e-3)"
            ),
        );
    }
}
