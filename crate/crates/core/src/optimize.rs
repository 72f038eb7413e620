//! Constrained bolus optimization.
//!
//! The peak-minimizing solvers exploit two monotonicity facts about the
//! glucose response to a fixed-amount bolus:
//!
//! * at fixed duration, delaying the bolus raises the response minimum, so
//!   the earliest input whose response stays at or above the lower bound is
//!   found by bisection and touches the bound ("incident" input);
//! * along incident inputs, widening the bolus trades the early peak against
//!   the late one, so the duration that equalizes the two flanking maxima is
//!   also found by bisection.
//!
//! The optimum is certified by the shape of its own response: either every
//! bound touch happens no later than the last peak (the bound is what stops
//! further improvement), or the bound touch sits between two equal maxima
//! (lowering either peak would raise the other). An independent brute-force
//! grid search over (duration, start) is provided for verification.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{BergmanParams, MagdelaineParams};
use crate::signals::{Disturbance, PulseInput};
use crate::simulate::{
    extrema_series, scan_extremes, shape_data, simulate_unchecked, touch_band, Grid, ModelSpec,
    ShapeCertificate, ShapeData, ShapeKind, Tolerances, Trajectory,
};

/// Outcome of a solver run.
#[derive(Debug, Clone, Serialize)]
pub struct OptimizationResult {
    /// The optimizing input.
    pub input: PulseInput,
    /// Peak of the optimal response.
    pub gamma: f64,
    /// Minimum attained by the optimal response.
    pub lambda_attained: f64,
    /// Evidence that the response has an optimality-certifying shape.
    pub certificate: ShapeCertificate,
    /// Simulations spent.
    pub iterations: usize,
    pub converged: bool,
    /// `oracle_gamma - gamma` when an oracle cross-check was run.
    pub oracle_gap: Option<f64>,
}

/// One point of a duration/start sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub duration: f64,
    pub start: f64,
    pub gamma: f64,
    pub lambda_attained: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Best feasible point, if any: smallest peak, ties broken by smaller
    /// (duration, start).
    pub best: Option<SweepPoint>,
}

/// Total bolus amount that restores the set point for the five-state model:
/// the insulin and meal chains have unit static gain, so the glucose balance
/// forces `amount = (b/a) * integral(d)`.
pub fn required_amount(params: &MagdelaineParams, d: &Disturbance) -> f64 {
    params.b() / params.a() * d.transient_integral()
}

/// Deepest response minimum any adequate bolus can cause: delivering the full
/// amount long before the meal drops glucose by the meal's total rise,
/// `-b * integral(d)`. Lower bounds below this are never touched.
pub fn incidence_floor(params: &MagdelaineParams, d: &Disturbance) -> f64 {
    -params.b() * d.transient_integral()
}

/// Peak-minimization problem for the five-state model, posed in normalized
/// coordinates (response starts at the set point, zero).
#[derive(Debug, Clone)]
pub struct MagdelaineProblem {
    pub params: MagdelaineParams,
    pub disturbance: Disturbance,
    /// Hard lower bound on the response.
    pub lambda: f64,
    /// Integration step, minutes.
    pub h: f64,
    /// Simulation horizon; chosen from the disturbance and the slowest time
    /// constant when absent.
    pub t_end: Option<f64>,
    pub tolerances: Tolerances,
    /// Damp the duration iteration through a running average of the
    /// proposals instead of taking each midpoint directly.
    pub averaging: bool,
}

impl MagdelaineProblem {
    pub fn new(params: MagdelaineParams, disturbance: Disturbance, lambda: f64) -> Self {
        MagdelaineProblem {
            params,
            disturbance,
            lambda,
            h: 0.1,
            t_end: None,
            tolerances: Tolerances::default(),
            averaging: false,
        }
    }

    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.disturbance.validate()?;
        if self.disturbance.offset() > 0.0 {
            return Err(Error::Validation(
                "the five-state solver requires a disturbance that settles to zero; \
                 a constant baseline belongs in the endogenous production term"
                    .into(),
            ));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Validation("lower bound must be finite".into()));
        }
        Ok(())
    }

    pub fn default_horizon(&self) -> f64 {
        self.t_end.unwrap_or_else(|| {
            let ltc = self.params.longest_time_constant();
            let act = self.disturbance.active_end();
            act + 12.0 * ltc + duration_cap(&self.disturbance, ltc)
        })
    }
}

fn duration_cap(d: &Disturbance, ltc: f64) -> f64 {
    (d.active_end() + 2.0 * ltc).max(60.0)
}

/// Shared simulation context with an iteration counter.
struct Ctx<'a> {
    spec: ModelSpec,
    d: &'a Disturbance,
    grid: Grid,
    lambda: f64,
    tols: Tolerances,
    basal: f64,
    sims: Cell<usize>,
}

impl Ctx<'_> {
    fn min_g(&self, u: &PulseInput, abort_below: Option<f64>) -> Result<(f64, bool)> {
        self.sims.set(self.sims.get() + 1);
        let out = scan_extremes(&self.spec, u, self.d, &self.grid, abort_below, None)?;
        Ok((out.min_g, out.aborted))
    }

    fn traj(&self, u: &PulseInput) -> Result<Trajectory> {
        self.sims.set(self.sims.get() + 1);
        simulate_unchecked(&self.spec, u, self.d, &self.grid)
    }

    fn input(&self, start: f64, duration: f64, amount: f64) -> PulseInput {
        PulseInput::with_amount(start, duration, amount).with_basal(self.basal)
    }

    /// Earliest start at the given duration whose response stays at or above
    /// the bound; its minimum touches the bound within the incidence
    /// tolerance. Relies on the response minimum increasing with the start.
    fn incident_start(&self, duration: f64, amount: f64) -> Result<(f64, f64)> {
        let band = self.tols.incident;
        let mut lo = 0.0;
        let mut hi = (self.grid.effective_end() - duration - 1.0).max(1.0);

        let (m_lo, ab_lo) = self.min_g(&self.input(lo, duration, amount), Some(self.lambda))?;
        if !ab_lo && m_lo >= self.lambda {
            return if m_lo - self.lambda <= band {
                Ok((lo, m_lo))
            } else {
                // Even the earliest start in range never reaches the bound.
                Err(Error::NoIncidentInput)
            };
        }
        let (m_hi, ab_hi) = self.min_g(&self.input(hi, duration, amount), Some(self.lambda))?;
        if ab_hi || m_hi < self.lambda {
            return Err(Error::NoIncidentInput);
        }
        let mut best = (hi, m_hi);
        for _ in 0..90 {
            let mid = 0.5 * (lo + hi);
            let (m, ab) = self.min_g(&self.input(mid, duration, amount), Some(self.lambda))?;
            if ab || m < self.lambda {
                lo = mid;
            } else {
                best = (mid, m);
                if m - self.lambda <= 0.05 * band {
                    return Ok(best);
                }
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        if best.1 - self.lambda <= band {
            Ok(best)
        } else {
            Err(Error::NoIncidentInput)
        }
    }

    fn shape(&self, u: &PulseInput) -> Result<(Trajectory, ShapeData)> {
        let traj = self.traj(u)?;
        let sd = shape_data(&traj.times, &traj.g, self.lambda, &self.tols);
        Ok((traj, sd))
    }
}

fn cert_from_data(shape: ShapeKind, sd: &ShapeData) -> ShapeCertificate {
    ShapeCertificate {
        shape,
        gamma: sd.gamma,
        lambda_attained: sd.lambda_attained,
        t_min: sd.t_min,
        last_lambda_touch: sd.last_lambda_touch,
        last_gamma_touch: sd.last_gamma_touch,
        pre_min_max: sd.pre_min_max,
        post_min_max: sd.post_min_max,
        equal_max_gap: sd.equal_max_gap,
    }
}

/// True when every bound touch happens no later than the last peak, i.e. the
/// input already has the bound-first optimal shape.
fn bound_before_peak(sd: &ShapeData) -> bool {
    match sd.last_lambda_touch {
        None => true,
        Some(tl) => tl <= sd.last_gamma_touch + 1e-9,
    }
}

/// Minimizes the response peak over single boluses of the restoring amount,
/// subject to the response staying at or above `lambda`.
///
/// Tries the incident impulse first; if its peak precedes its bound touch the
/// impulse is optimal. Otherwise the bolus is widened until the two maxima
/// flanking the bound touch are equal.
pub fn optimize_magdelaine(prob: &MagdelaineProblem) -> Result<OptimizationResult> {
    prob.validate()?;
    let amount = required_amount(&prob.params, &prob.disturbance);
    let floor = incidence_floor(&prob.params, &prob.disturbance);
    if prob.lambda > 0.0 {
        return Err(Error::Infeasible {
            lambda: prob.lambda,
            bound: 0.0,
        });
    }
    if amount > 0.0 && prob.lambda <= floor + prob.tolerances.incident {
        return Err(Error::Infeasible {
            lambda: prob.lambda,
            bound: floor,
        });
    }

    let ctx = Ctx {
        spec: ModelSpec::magdelaine(prob.params),
        d: &prob.disturbance,
        grid: Grid::new(prob.default_horizon(), prob.h)?,
        lambda: prob.lambda,
        tols: prob.tolerances,
        basal: 0.0,
        sims: Cell::new(0),
    };

    if amount <= 0.0 {
        // No meal: doing nothing is optimal and the response is flat.
        let u = PulseInput::zero();
        let (_, sd) = ctx.shape(&u)?;
        return Ok(OptimizationResult {
            input: u,
            gamma: sd.gamma,
            lambda_attained: sd.lambda_attained,
            certificate: cert_from_data(ShapeKind::Type1, &sd),
            iterations: ctx.sims.get(),
            converged: true,
            oracle_gap: None,
        });
    }

    // Impulse branch.
    let (t0, _) = ctx.incident_start(0.0, amount)?;
    let u0 = ctx.input(t0, 0.0, amount);
    let (traj0, sd0) = ctx.shape(&u0)?;
    if bound_before_peak(&sd0) {
        let cert = crate::simulate::classify(&traj0, prob.lambda, &prob.tolerances)?;
        return Ok(OptimizationResult {
            input: u0,
            gamma: sd0.gamma,
            lambda_attained: sd0.lambda_attained,
            certificate: cert,
            iterations: ctx.sims.get(),
            converged: true,
        oracle_gap: None,
        });
    }

    // Two-peak branch: along incident inputs, find the duration that
    // equalizes the maxima flanking the bound touch. The sign of
    // (pre-touch max) - (post-touch max) flips across the optimum. The gap
    // tolerance keeps an absolute floor for the degenerate regime where the
    // optimal peak is itself near zero (the bolus cancels the meal outright).
    let balance = |sd: &ShapeData| sd.pre_min_max - sd.post_min_max;
    let gap_tol =
        |sd: &ShapeData| touch_band(sd.gamma, &prob.tolerances).max(0.1 * prob.tolerances.incident);
    let tau_max = duration_cap(&prob.disturbance, prob.params.longest_time_constant());

    let mut best: Option<(PulseInput, ShapeData)> = None;
    // Evaluates one duration: Some(balance) when an incident start exists,
    // None when the bound is inactive there (only happens past the optimum).
    let probe = |tau: f64,
                     best: &mut Option<(PulseInput, ShapeData)>|
     -> Result<Option<(PulseInput, Trajectory, ShapeData)>> {
        match ctx.incident_start(tau, amount) {
            Ok((tp, _)) => {
                let u = ctx.input(tp, tau, amount);
                let (traj, sd) = ctx.shape(&u)?;
                if best
                    .as_ref()
                    .map_or(true, |(_, b)| sd.equal_max_gap < b.equal_max_gap)
                {
                    *best = Some((u, sd));
                }
                Ok(Some((u, traj, sd)))
            }
            Err(Error::NoIncidentInput) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let finish = |u: PulseInput, traj: &Trajectory, sd: &ShapeData, sims: usize| -> Result<OptimizationResult> {
        let cert = crate::simulate::classify(traj, prob.lambda, &prob.tolerances)?;
        Ok(OptimizationResult {
            input: u,
            gamma: sd.gamma,
            lambda_attained: sd.lambda_attained,
            certificate: cert,
            iterations: sims,
            converged: true,
            oracle_gap: None,
        })
    };

    // Bracket the sign change by doubling the duration.
    let mut lo = 0.0; // balance > 0 side (early peak dominates)
    let mut hi = None;
    let mut tau = 4.0_f64.min(tau_max);
    while hi.is_none() {
        match probe(tau, &mut best)? {
            Some((u, traj, sd)) => {
                if sd.equal_max_gap <= gap_tol(&sd) {
                    return finish(u, &traj, &sd, ctx.sims.get());
                }
                if balance(&sd) > 0.0 {
                    lo = tau;
                } else {
                    hi = Some(tau);
                }
            }
            None => hi = Some(tau),
        }
        if hi.is_none() {
            if tau >= tau_max {
                break;
            }
            tau = (tau * 2.0).min(tau_max);
        }
    }
    let Some(mut hi) = hi else {
        let iterations = ctx.sims.get();
        let best = best.map(|(u, sd)| OptimizationResult {
            input: u,
            gamma: sd.gamma,
            lambda_attained: sd.lambda_attained,
            certificate: cert_from_data(ShapeKind::Type2, &sd),
            iterations,
            converged: false,
            oracle_gap: None,
        });
        return match best {
            Some(b) => Err(Error::NotConverged {
                iterations,
                best: Box::new(b),
            }),
            None => Err(Error::NoIncidentInput),
        };
    };

    let mut avg = 0.0;
    let mut n_avg = 0usize;
    for _ in 0..80 {
        let omega = 0.5 * (lo + hi);
        match probe(omega, &mut best)? {
            Some((u, traj, sd)) => {
                if sd.equal_max_gap <= gap_tol(&sd) {
                    return finish(u, &traj, &sd, ctx.sims.get());
                }
                if balance(&sd) > 0.0 {
                    lo = omega;
                } else {
                    hi = omega;
                }
            }
            None => hi = omega,
        }
        if prob.averaging {
            // Damped companion iterate: the running average of the midpoint
            // proposals. Checked as an extra candidate; it tightens the
            // bracket when it lands inside, and never drives it.
            n_avg += 1;
            avg = (avg * (n_avg as f64 - 1.0) + omega) / n_avg as f64;
            if avg > lo + 1e-12 && avg < hi - 1e-12 {
                match probe(avg, &mut best)? {
                    Some((u, traj, sd)) => {
                        if sd.equal_max_gap <= gap_tol(&sd) {
                            return finish(u, &traj, &sd, ctx.sims.get());
                        }
                        if balance(&sd) > 0.0 {
                            lo = avg;
                        } else {
                            hi = avg;
                        }
                    }
                    None => hi = avg,
                }
            }
        }
        if hi - lo < 1e-12 {
            break;
        }
    }

    let iterations = ctx.sims.get();
    let best = best.map(|(u, sd)| OptimizationResult {
        input: u,
        gamma: sd.gamma,
        lambda_attained: sd.lambda_attained,
        certificate: cert_from_data(ShapeKind::Type2, &sd),
        iterations,
        converged: false,
        oracle_gap: None,
    });
    match best {
        Some(b) => Err(Error::NotConverged {
            iterations,
            best: Box::new(b),
        }),
        None => Err(Error::NoIncidentInput),
    }
}

/// Earliest feasible start at a fixed duration (with the restoring amount).
pub fn min_start_at_duration(prob: &MagdelaineProblem, duration: f64) -> Result<PulseInput> {
    prob.validate()?;
    let amount = required_amount(&prob.params, &prob.disturbance);
    let ctx = Ctx {
        spec: ModelSpec::magdelaine(prob.params),
        d: &prob.disturbance,
        grid: Grid::new(prob.default_horizon(), prob.h)?,
        lambda: prob.lambda,
        tols: prob.tolerances,
        basal: 0.0,
        sims: Cell::new(0),
    };
    let (tp, _) = ctx.incident_start(duration, amount)?;
    Ok(ctx.input(tp, duration, amount))
}

/// Shortest feasible duration at a fixed start (with the restoring amount).
/// Relies on the response minimum increasing as the bolus is spread out.
pub fn min_duration_at_start(prob: &MagdelaineProblem, start: f64) -> Result<PulseInput> {
    prob.validate()?;
    let amount = required_amount(&prob.params, &prob.disturbance);
    let ctx = Ctx {
        spec: ModelSpec::magdelaine(prob.params),
        d: &prob.disturbance,
        grid: Grid::new(prob.default_horizon(), prob.h)?,
        lambda: prob.lambda,
        tols: prob.tolerances,
        basal: 0.0,
        sims: Cell::new(0),
    };
    let band = prob.tolerances.incident;
    let (m0, ab0) = ctx.min_g(&ctx.input(start, 0.0, amount), Some(prob.lambda))?;
    if !ab0 && m0 >= prob.lambda {
        return Ok(ctx.input(start, 0.0, amount));
    }
    let cap = duration_cap(&prob.disturbance, prob.params.longest_time_constant());
    let (mc, abc) = ctx.min_g(&ctx.input(start, cap, amount), Some(prob.lambda))?;
    if abc || mc < prob.lambda {
        return Err(Error::NoIncidentInput);
    }
    let (mut lo, mut hi) = (0.0, cap);
    let mut best = hi;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let (m, ab) = ctx.min_g(&ctx.input(start, mid, amount), Some(prob.lambda))?;
        if ab || m < prob.lambda {
            lo = mid;
        } else {
            best = mid;
            if m - prob.lambda <= 0.5 * band {
                break;
            }
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(ctx.input(start, best, amount))
}

/// Peak-minimization / required-bolus problem for the minimal model.
#[derive(Debug, Clone)]
pub struct BergmanProblem {
    pub params: BergmanParams,
    /// Constant infusion the system is in equilibrium with at t = 0.
    pub basal: f64,
    pub disturbance: Disturbance,
    pub lambda: f64,
    pub h: f64,
    pub t_end: Option<f64>,
    pub tolerances: Tolerances,
}

impl BergmanProblem {
    pub fn new(params: BergmanParams, basal: f64, disturbance: Disturbance, lambda: f64) -> Self {
        BergmanProblem {
            params,
            basal,
            disturbance,
            lambda,
            h: 0.1,
            t_end: None,
            tolerances: Tolerances::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.disturbance.validate()?;
        if self.basal < 0.0 || !self.basal.is_finite() {
            return Err(Error::Validation(format!(
                "basal must be nonnegative, got {}",
                self.basal
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Validation("lower bound must be finite".into()));
        }
        Ok(())
    }

    pub fn default_horizon(&self) -> f64 {
        self.t_end.unwrap_or_else(|| {
            let ltc = self
                .params
                .longest_time_constant()
                .max(1.0 / self.params.g_uptake);
            self.disturbance.active_end() + 10.0 * ltc
        })
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::bergman_at_equilibrium(self.params, self.basal, self.disturbance.offset())
    }
}

/// The two dips flanking the meal: minimum before and after `split_time`.
/// The split is taken at the peak of the bolus-free response so it does not
/// move with the bolus, keeping both dips continuous in the bolus time and
/// amount.
fn flanking_dips(traj: &Trajectory, split_time: f64) -> (f64, f64) {
    let split = traj
        .times
        .partition_point(|&t| t < split_time)
        .clamp(1, traj.len());
    let m1 = traj.g[..split].iter().cloned().fold(f64::INFINITY, f64::min);
    let m2 = traj.g[split - 1..]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    (m1, m2)
}

/// Smallest instantaneous bolus whose best placement keeps the response at or
/// above the bound while letting it touch the bound on both sides of the
/// meal peak.
///
/// Inner bisection balances the two dips over the bolus time (earlier bolus
/// deepens the pre-peak dip); outer bisection drives the balanced dip onto
/// the bound over the amount (more insulin deepens both dips).
pub fn bergman_required_bolus(prob: &BergmanProblem) -> Result<OptimizationResult> {
    prob.validate()?;
    let g0 = prob
        .params
        .equilibrium_glucose(prob.basal, prob.disturbance.offset());
    if prob.lambda >= g0 {
        return Err(Error::Infeasible {
            lambda: prob.lambda,
            bound: g0,
        });
    }
    let ctx = Ctx {
        spec: prob.spec(),
        d: &prob.disturbance,
        grid: Grid::new(prob.default_horizon(), prob.h)?,
        lambda: prob.lambda,
        tols: prob.tolerances,
        basal: prob.basal,
        sims: Cell::new(0),
    };
    let t_hi = prob.disturbance.active_end();

    // Meal peak of the bolus-free response; fixed split between the dips.
    let free = ctx.traj(&PulseInput::zero().with_basal(prob.basal))?;
    let split_time = free
        .times
        .iter()
        .zip(&free.g)
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(&t, _)| t)
        .unwrap();

    // Balanced placement of a fixed amount; returns (start, balanced dip).
    let balanced = |amount: f64| -> Result<(f64, f64)> {
        let eval = |tp: f64| -> Result<(f64, f64)> {
            let traj = ctx.traj(&ctx.input(tp, 0.0, amount))?;
            Ok(flanking_dips(&traj, split_time))
        };
        let (mut lo, mut hi) = (0.0, t_hi);
        let (m1, m2) = eval(lo)?;
        if m1 >= m2 {
            return Ok((lo, m1.min(m2)));
        }
        let (m1, m2) = eval(hi)?;
        if m1 <= m2 {
            return Ok((hi, m1.min(m2)));
        }
        let mut best = (hi, m1.min(m2));
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let (m1, m2) = eval(mid)?;
            best = (mid, m1.min(m2));
            if (m1 - m2).abs() <= 1e-9 * g0 {
                break;
            }
            if m1 < m2 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-10 {
                break;
            }
        }
        Ok(best)
    };

    // Outer bisection on the amount: the balanced dip decreases with it.
    let band = prob.tolerances.incident;
    let mut u_lo = 0.0; // dip above the bound
    let mut u_hi = 1.0;
    let mut dip_hi;
    loop {
        let (_, m) = balanced(u_hi)?;
        dip_hi = m;
        if m < prob.lambda {
            break;
        }
        u_lo = u_hi;
        u_hi *= 2.0;
        if u_hi > 1e6 {
            return Err(Error::NoIncidentInput);
        }
    }
    let _ = dip_hi;
    let mut best: Option<(f64, f64, f64)> = None; // (amount, start, dip)
    for _ in 0..80 {
        let mid = 0.5 * (u_lo + u_hi);
        let (tp, m) = balanced(mid)?;
        if m >= prob.lambda {
            best = Some((mid, tp, m));
            if m - prob.lambda <= 0.5 * band {
                break;
            }
            u_lo = mid;
        } else {
            u_hi = mid;
        }
        if u_hi - u_lo < 1e-10 * u_hi.max(1.0) {
            break;
        }
    }
    let (amount, start, dip) = best.ok_or(Error::NoIncidentInput)?;
    if dip - prob.lambda > band {
        return Err(Error::NotConverged {
            iterations: ctx.sims.get(),
            best: Box::new(result_for_bergman(&ctx, amount, start, split_time, prob, false)?),
        });
    }
    result_for_bergman(&ctx, amount, start, split_time, prob, true)
}

fn result_for_bergman(
    ctx: &Ctx,
    amount: f64,
    start: f64,
    split_time: f64,
    prob: &BergmanProblem,
    converged: bool,
) -> Result<OptimizationResult> {
    let u = ctx.input(start, 0.0, amount);
    let traj = ctx.traj(&u)?;
    let sd = shape_data(&traj.times, &traj.g, prob.lambda, &prob.tolerances);
    let (m1, m2) = flanking_dips(&traj, split_time);
    let rep = extrema_series(&traj.times, &traj.g, prob.tolerances.noise);
    let peak_t = rep
        .maxima
        .iter()
        .cloned()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(t, _)| t)
        .unwrap_or(split_time);
    // Dip-peak-dip interlacing with both dips on the bound: the bound, not
    // the peak, limits further improvement, so this is the bound-first shape.
    let mut cert = cert_from_data(ShapeKind::Type1, &sd);
    cert.last_gamma_touch = peak_t;
    cert.equal_max_gap = (m1 - m2).abs();
    Ok(OptimizationResult {
        input: u,
        gamma: sd.gamma,
        lambda_attained: sd.lambda_attained,
        certificate: cert,
        iterations: ctx.sims.get(),
        converged,
        oracle_gap: None,
    })
}

/// Exhaustive sweep over a (duration, start) grid at a fixed bolus amount.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub amount: f64,
    pub basal: f64,
    pub durations: Vec<f64>,
    pub start_min: f64,
    pub start_max: f64,
    pub start_step: f64,
}

impl SweepConfig {
    pub fn starts(&self) -> Result<Vec<f64>> {
        if !(self.start_step > 0.0) || self.start_max < self.start_min {
            return Err(Error::Validation(format!(
                "bad start range [{}, {}] step {}",
                self.start_min, self.start_max, self.start_step
            )));
        }
        let n = ((self.start_max - self.start_min) / self.start_step + 1e-9).floor() as usize;
        Ok((0..=n)
            .map(|i| self.start_min + i as f64 * self.start_step)
            .collect())
    }
}

pub fn sweep(
    spec: &ModelSpec,
    d: &Disturbance,
    lambda: f64,
    grid: &Grid,
    tols: &Tolerances,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    let starts = cfg.starts()?;
    let cands: Vec<(f64, f64)> = cfg
        .durations
        .iter()
        .flat_map(|&tau| starts.iter().map(move |&tp| (tau, tp)))
        .collect();
    let points: Vec<SweepPoint> = cands
        .par_iter()
        .map(|&(tau, tp)| -> Result<SweepPoint> {
            let u = PulseInput::with_amount(tp, tau, cfg.amount).with_basal(cfg.basal);
            let out = scan_extremes(spec, &u, d, grid, None, None)?;
            Ok(SweepPoint {
                duration: tau,
                start: tp,
                gamma: out.max_g,
                lambda_attained: out.min_g,
                feasible: out.min_g >= lambda - tols.incident,
            })
        })
        .collect::<Result<_>>()?;
    let best = points
        .iter()
        .filter(|p| p.feasible)
        .min_by(|a, b| {
            (a.gamma, a.duration, a.start)
                .partial_cmp(&(b.gamma, b.duration, b.start))
                .unwrap()
        })
        .cloned();
    Ok(SweepResult { points, best })
}

/// Brute-force verification oracle.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub sweep: SweepConfig,
    /// Integration step for the oracle's own simulations.
    pub h: f64,
    pub t_end: f64,
    /// Peaks within this of the best tie; ties resolve to the smallest
    /// (duration, start).
    pub tie_tol: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleOutcome {
    pub input: PulseInput,
    pub gamma: f64,
    pub lambda_attained: f64,
    pub candidates: usize,
    /// Candidates fully simulated (not pruned, not infeasible).
    pub evaluated: usize,
    pub pruned: usize,
    pub infeasible: usize,
}

/// Exhaustively minimizes the peak over the candidate grid.
///
/// Candidates are pruned as soon as their running maximum exceeds the best
/// known peak plus `tie_tol`, or abandoned as soon as they violate the bound.
/// A pruned candidate's final peak strictly exceeds every later best, so
/// pruning can change neither the winner nor the tie set: the result is
/// deterministic under any parallel schedule.
pub fn brute_force_oracle(
    spec: &ModelSpec,
    d: &Disturbance,
    lambda: f64,
    cfg: &OracleConfig,
    tols: &Tolerances,
) -> Result<OracleOutcome> {
    let grid = Grid::new(cfg.t_end, cfg.h)?;
    let starts = cfg.sweep.starts()?;
    let cands: Vec<(f64, f64)> = cfg
        .sweep
        .durations
        .iter()
        .flat_map(|&tau| starts.iter().map(move |&tp| (tau, tp)))
        .collect();

    let best_bits = AtomicU64::new(f64::INFINITY.to_bits());
    let pruned = AtomicUsize::new(0);
    let infeasible = AtomicUsize::new(0);

    let results: Vec<Option<(f64, f64)>> = cands
        .par_iter()
        .map(|&(tau, tp)| -> Result<Option<(f64, f64)>> {
            let u = PulseInput::with_amount(tp, tau, cfg.sweep.amount).with_basal(cfg.sweep.basal);
            let bound = f64::from_bits(best_bits.load(AtomicOrdering::Relaxed)) + cfg.tie_tol;
            let out = scan_extremes(spec, &u, d, &grid, Some(lambda - tols.incident), Some(bound))?;
            if out.aborted {
                if out.min_g < lambda - tols.incident {
                    infeasible.fetch_add(1, AtomicOrdering::Relaxed);
                } else {
                    pruned.fetch_add(1, AtomicOrdering::Relaxed);
                }
                return Ok(None);
            }
            // Monotone atomic min over the peak (nonnegative, so the bit
            // patterns order like the floats).
            let mut cur = best_bits.load(AtomicOrdering::Relaxed);
            let new = out.max_g.to_bits();
            while f64::from_bits(cur) > out.max_g {
                match best_bits.compare_exchange_weak(
                    cur,
                    new,
                    AtomicOrdering::Relaxed,
                    AtomicOrdering::Relaxed,
                ) {
                    Ok(_) => break,
                    Err(seen) => cur = seen,
                }
            }
            Ok(Some((out.max_g, out.min_g)))
        })
        .collect::<Result<_>>()?;

    let best_gamma = results
        .iter()
        .flatten()
        .map(|&(g, _)| g)
        .fold(f64::INFINITY, f64::min);
    if !best_gamma.is_finite() {
        return Err(Error::EmptyFeasibleSet);
    }
    let winner = cands
        .iter()
        .zip(&results)
        .filter_map(|(&(tau, tp), r)| r.map(|(g, m)| (tau, tp, g, m)))
        .filter(|&(_, _, g, _)| g <= best_gamma + cfg.tie_tol)
        .min_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap())
        .unwrap();
    let evaluated = results.iter().flatten().count();
    Ok(OracleOutcome {
        input: PulseInput::with_amount(winner.1, winner.0, cfg.sweep.amount)
            .with_basal(cfg.sweep.basal),
        gamma: winner.2,
        lambda_attained: winner.3,
        candidates: cands.len(),
        evaluated,
        pruned: pruned.load(AtomicOrdering::Relaxed),
        infeasible: infeasible.load(AtomicOrdering::Relaxed),
    })
}
