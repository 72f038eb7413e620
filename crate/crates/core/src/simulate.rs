//! Fixed-step integration of both models with exact handling of pulse edges
//! and impulse state jumps, plus trajectory analytics: extrema extraction,
//! response-shape classification, incidence testing and pairwise crossing
//! counts.
//!
//! The integrator is a classical 4th-order Runge-Kutta scheme on a uniform
//! grid. Steps containing a rate discontinuity (pulse or rectangular
//! disturbance edge) are split at the exact edge time so piecewise-constant
//! inputs are represented without smearing; an impulse is an instantaneous
//! state jump applied exactly at its time. Simulation is pure and
//! deterministic for identical arguments.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    bergman_vector_field, magdelaine_vector_field, BergmanParams, MagdelaineParams,
};
use crate::signals::{Disturbance, PulseInput};

/// Uniform time grid: `t = 0, h, 2h, ..` up to (at least) `t_end` minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub t_end: f64,
    pub h: f64,
}

impl Grid {
    pub fn new(t_end: f64, h: f64) -> Result<Self> {
        let g = Grid { t_end, h };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Validation(format!(
                "grid step must be positive, got {}",
                self.h
            )));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::Validation(format!(
                "grid horizon must be positive, got {}",
                self.t_end
            )));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.h - 1e-9).ceil().max(1.0) as usize
    }

    /// Horizon rounded up to a whole number of steps.
    pub fn effective_end(&self) -> f64 {
        self.n_steps() as f64 * self.h
    }
}

/// A model together with its parameters and initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Magdelaine {
        params: MagdelaineParams,
        initial: [f64; 5],
    },
    Bergman {
        params: BergmanParams,
        initial: [f64; 4],
    },
}

impl ModelSpec {
    /// Normalized five-state model starting at its set point.
    pub fn magdelaine(params: MagdelaineParams) -> Self {
        ModelSpec::Magdelaine {
            params,
            initial: [0.0; 5],
        }
    }

    /// Minimal model starting at the equilibrium of the given basal and
    /// baseline disturbance.
    pub fn bergman_at_equilibrium(params: BergmanParams, basal: f64, w_bar: f64) -> Self {
        let z = params.k * basal;
        let x = params.steady_effectiveness(basal);
        ModelSpec::Bergman {
            params,
            initial: [x, z, z, params.equilibrium_glucose(basal, w_bar)],
        }
    }

    pub fn model_id(&self) -> &'static str {
        match self {
            ModelSpec::Magdelaine { .. } => "magdelaine",
            ModelSpec::Bergman { .. } => "bergman",
        }
    }

    pub fn params_hash(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        match self {
            ModelSpec::Magdelaine { params, initial } => {
                0u8.hash(&mut hasher);
                for v in [
                    params.alpha2,
                    params.alpha3,
                    params.alpha4,
                    params.alpha5,
                    params.endogenous,
                ] {
                    v.to_bits().hash(&mut hasher);
                }
                for v in initial {
                    v.to_bits().hash(&mut hasher);
                }
            }
            ModelSpec::Bergman { params, initial } => {
                1u8.hash(&mut hasher);
                for v in [params.a, params.b, params.c, params.d, params.k, params.g_uptake] {
                    v.to_bits().hash(&mut hasher);
                }
                for v in initial {
                    v.to_bits().hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Magdelaine { params, .. } => params.validate(),
            ModelSpec::Bergman { params, .. } => params.validate(),
        }
    }
}

/// A simulated response on a uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Row-major state vectors, `n_states` per grid point.
    pub states: Vec<f64>,
    pub n_states: usize,
    pub g: Vec<f64>,
    pub u_values: Vec<f64>,
    pub d_values: Vec<f64>,
    pub meta: TrajectoryMeta,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryMeta {
    pub model: String,
    pub params_hash: u64,
    pub input: PulseInput,
    pub disturbance: Disturbance,
    pub h: f64,
}

impl Trajectory {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n_states..(i + 1) * self.n_states]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn same_grid(&self, other: &Trajectory) -> bool {
        self.len() == other.len()
            && self.meta.h == other.meta.h
            && self.times.last() == other.times.last()
    }
}

const TIME_EPS: f64 = 1e-9;

#[inline]
fn axpy<const N: usize>(y: &[f64; N], k: &[f64; N], s: f64) -> [f64; N] {
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = y[i] + s * k[i];
    }
    out
}

#[derive(Clone, Copy)]
enum DistEval<'a> {
    Const(f64),
    Smooth(&'a Disturbance),
}

impl DistEval<'_> {
    #[inline]
    fn at(&self, t: f64) -> f64 {
        match self {
            DistEval::Const(v) => *v,
            DistEval::Smooth(d) => d.value_at(t),
        }
    }
}

/// One RK4 substep over `[t0, t0 + dt]` with the insulin rate held at its
/// exact (constant) value on the substep.
#[inline]
fn rk4<const N: usize>(
    y: &[f64; N],
    t0: f64,
    dt: f64,
    u_val: f64,
    d: DistEval,
    f: &impl Fn(&[f64; N], f64, f64) -> [f64; N],
) -> [f64; N] {
    let k1 = f(y, u_val, d.at(t0));
    let d_mid = d.at(t0 + 0.5 * dt);
    let k2 = f(&axpy(y, &k1, 0.5 * dt), u_val, d_mid);
    let k3 = f(&axpy(y, &k2, 0.5 * dt), u_val, d_mid);
    let k4 = f(&axpy(y, &k3, dt), u_val, d.at(t0 + dt));
    let mut out = *y;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Drives the integration, calling `observe` at every grid point. Returns
/// `Ok(false)` if the observer requested an early stop.
fn integrate<const N: usize>(
    mut y: [f64; N],
    g_index: usize,
    u: &PulseInput,
    d: &Disturbance,
    grid: &Grid,
    f: impl Fn(&[f64; N], f64, f64) -> [f64; N],
    jump: Option<(f64, [f64; N])>,
    observe: &mut dyn FnMut(usize, f64, &[f64; N]) -> bool,
) -> Result<bool> {
    let h = grid.h;
    let n = grid.n_steps();
    let t_end = grid.effective_end();

    let mut events: Vec<f64> = u
        .edges()
        .into_iter()
        .chain(d.edges())
        .filter(|&e| e > TIME_EPS && e < t_end - TIME_EPS)
        .collect();
    if let Some((jt, _)) = jump {
        if jt > TIME_EPS && jt < t_end - TIME_EPS {
            events.push(jt);
        }
    }
    events.sort_by(|a, b| a.partial_cmp(b).unwrap());
    events.dedup_by(|a, b| (*a - *b).abs() < TIME_EPS);

    let mut jump_pending = jump;
    let mut apply_jump_at = |t: f64, y: &mut [f64; N]| {
        if let Some((jt, delta)) = jump_pending {
            if (t - jt).abs() < TIME_EPS || jt < t {
                for i in 0..N {
                    y[i] += delta[i];
                }
                jump_pending = None;
            }
        }
    };

    let smooth_d = matches!(d, Disturbance::Filtered { .. });
    let mut ev_idx = 0usize;

    apply_jump_at(0.0, &mut y);
    if !observe(0, 0.0, &y) {
        return Ok(false);
    }

    for i in 0..n {
        let t0 = i as f64 * h;
        let t1 = (i + 1) as f64 * h;
        let mut t = t0;
        while ev_idx < events.len() && events[ev_idx] < t1 - TIME_EPS {
            let ev = events[ev_idx];
            ev_idx += 1;
            if ev > t + TIME_EPS {
                let mid = 0.5 * (t + ev);
                let de = if smooth_d {
                    DistEval::Smooth(d)
                } else {
                    DistEval::Const(d.value_at(mid))
                };
                y = rk4(&y, t, ev - t, u.value_at(mid), de, &f);
                t = ev;
            }
            apply_jump_at(t, &mut y);
        }
        if t1 > t + TIME_EPS {
            let mid = 0.5 * (t + t1);
            let de = if smooth_d {
                DistEval::Smooth(d)
            } else {
                DistEval::Const(d.value_at(mid))
            };
            y = rk4(&y, t, t1 - t, u.value_at(mid), de, &f);
        }
        apply_jump_at(t1, &mut y);
        if !y.iter().all(|v| v.is_finite()) || !y[g_index].is_finite() {
            return Err(Error::NonFiniteState { t: t1 });
        }
        if !observe(i + 1, t1, &y) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn dispatch(
    spec: &ModelSpec,
    u: &PulseInput,
    d: &Disturbance,
    grid: &Grid,
    observe: &mut dyn FnMut(usize, f64, &[f64]) -> bool,
) -> Result<bool> {
    match spec {
        ModelSpec::Magdelaine { params, initial } => {
            let p = *params;
            let jump = if u.duration == 0.0 && u.impulse_amount > 0.0 {
                // The Dirac integrated through the first-order input stage.
                Some((u.start, [0.0, 0.0, p.alpha3 * u.impulse_amount, 0.0, 0.0]))
            } else {
                None
            };
            integrate(
                *initial,
                0,
                u,
                d,
                grid,
                move |y, uv, dv| magdelaine_vector_field(y, uv, dv, &p),
                jump,
                &mut |i, t, y: &[f64; 5]| observe(i, t, y),
            )
        }
        ModelSpec::Bergman { params, initial } => {
            let p = *params;
            let jump = if u.duration == 0.0 && u.impulse_amount > 0.0 {
                Some((u.start, [0.0, 0.0, p.d * p.k * u.impulse_amount, 0.0]))
            } else {
                None
            };
            integrate(
                *initial,
                3,
                u,
                d,
                grid,
                move |y, uv, dv| bergman_vector_field(y, uv, dv, &p),
                jump,
                &mut |i, t, y: &[f64; 4]| observe(i, t, y),
            )
        }
    }
}

fn validate_sim(spec: &ModelSpec, u: &PulseInput, d: &Disturbance, grid: &Grid) -> Result<()> {
    spec.validate()?;
    u.validate()?;
    d.validate()?;
    grid.validate()?;
    if u.duration == 0.0 && u.impulse_amount > 0.0 {
        let t_end = grid.effective_end();
        if u.start < -TIME_EPS || u.start > t_end + TIME_EPS {
            return Err(Error::Validation(format!(
                "impulse time {} outside the grid [0, {t_end}]",
                u.start
            )));
        }
    }
    Ok(())
}

/// Simulates a response and records the full trajectory.
///
/// Errors with `GridTooCoarse` when a nonzero pulse or rectangular
/// disturbance is narrower than one grid step, and `NonFiniteState` if the
/// state diverges.
pub fn simulate(
    spec: &ModelSpec,
    u: &PulseInput,
    d: &Disturbance,
    grid: &Grid,
) -> Result<Trajectory> {
    validate_sim(spec, u, d, grid)?;
    if u.duration > 0.0 && u.duration < grid.h {
        return Err(Error::GridTooCoarse(format!(
            "pulse width {} is below the grid step {}",
            u.duration, grid.h
        )));
    }
    if let Disturbance::Rectangular {
        magnitude,
        start,
        end,
    } = d
    {
        if *magnitude > 0.0 && end - start > 0.0 && end - start < grid.h {
            return Err(Error::GridTooCoarse(format!(
                "disturbance width {} is below the grid step {}",
                end - start,
                grid.h
            )));
        }
    }
    simulate_unchecked(spec, u, d, grid)
}

/// Same as [`simulate`] without the edge-width checks; the integrator splits
/// steps at edges exactly, so sub-step pulses are handled correctly. Used by
/// the solvers, whose bisection iterates may shrink below the grid step.
pub(crate) fn simulate_unchecked(
    spec: &ModelSpec,
    u: &PulseInput,
    d: &Disturbance,
    grid: &Grid,
) -> Result<Trajectory> {
    let n = grid.n_steps();
    let n_states = match spec {
        ModelSpec::Magdelaine { .. } => 5,
        ModelSpec::Bergman { .. } => 4,
    };
    let g_index = match spec {
        ModelSpec::Magdelaine { .. } => 0,
        ModelSpec::Bergman { .. } => 3,
    };
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity((n + 1) * n_states);
    let mut g = Vec::with_capacity(n + 1);
    dispatch(spec, u, d, grid, &mut |_, t, y| {
        times.push(t);
        states.extend_from_slice(y);
        g.push(y[g_index]);
        true
    })?;
    let u_values = times.iter().map(|&t| u.value_at(t)).collect();
    let d_values = times.iter().map(|&t| d.value_at(t)).collect();
    Ok(Trajectory {
        times,
        states,
        n_states,
        g,
        u_values,
        d_values,
        meta: TrajectoryMeta {
            model: spec.model_id().to_string(),
            params_hash: spec.params_hash(),
            input: *u,
            disturbance: *d,
            h: grid.h,
        },
    })
}

/// Streaming extremes of the glucose response without storing the trajectory.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScanOutcome {
    pub min_g: f64,
    pub max_g: f64,
    pub final_g: f64,
    /// True when the scan stopped early on one of the abort bounds.
    pub aborted: bool,
}

/// Runs a simulation keeping only min/max of `g`, aborting as soon as `g`
/// falls below `abort_below` or exceeds `abort_above` (when given). The
/// reported extremes are exact unless `aborted` is set.
pub(crate) fn scan_extremes(
    spec: &ModelSpec,
    u: &PulseInput,
    d: &Disturbance,
    grid: &Grid,
    abort_below: Option<f64>,
    abort_above: Option<f64>,
) -> Result<ScanOutcome> {
    let g_index = match spec {
        ModelSpec::Magdelaine { .. } => 0,
        ModelSpec::Bergman { .. } => 3,
    };
    let mut out = ScanOutcome {
        min_g: f64::INFINITY,
        max_g: f64::NEG_INFINITY,
        final_g: f64::NAN,
        aborted: false,
    };
    dispatch(spec, u, d, grid, &mut |_, _, y| {
        let g = y[g_index];
        out.min_g = out.min_g.min(g);
        out.max_g = out.max_g.max(g);
        out.final_g = g;
        if abort_below.is_some_and(|b| g < b) || abort_above.is_some_and(|b| g > b) {
            out.aborted = true;
            return false;
        }
        true
    })?;
    Ok(out)
}

/// Extrema and norms of a glucose response.
#[derive(Debug, Clone, Serialize)]
pub struct ExtremaReport {
    /// Interior local minima as `(t, value)`, endpoint appended when it
    /// realizes the global minimum.
    pub minima: Vec<(f64, f64)>,
    pub maxima: Vec<(f64, f64)>,
    /// Global maximum of the response.
    pub gamma: f64,
    /// Global minimum attained by the response.
    pub lambda_attained: f64,
    /// Time integral of the response over the horizon (trapezoid rule).
    pub gamma_integral: f64,
}

/// Extrema of a sampled series. Differences within `noise_tol` are treated as
/// flat, which merges plateaus; an extremum is reported at the extremal point
/// of the plateau between two opposite monotone runs.
pub fn extrema_series(times: &[f64], g: &[f64], noise_tol: f64) -> ExtremaReport {
    let n = g.len();
    assert_eq!(times.len(), n);
    assert!(n >= 1);

    let mut gamma = f64::NEG_INFINITY;
    let mut lambda_attained = f64::INFINITY;
    let mut arg_gamma = 0usize;
    let mut arg_lambda = 0usize;
    for (i, &v) in g.iter().enumerate() {
        if v > gamma {
            gamma = v;
            arg_gamma = i;
        }
        if v < lambda_attained {
            lambda_attained = v;
            arg_lambda = i;
        }
    }

    let mut gamma_integral = 0.0;
    for i in 0..n.saturating_sub(1) {
        gamma_integral += 0.5 * (g[i] + g[i + 1]) * (times[i + 1] - times[i]);
    }

    let mut minima: Vec<(f64, f64)> = Vec::new();
    let mut maxima: Vec<(f64, f64)> = Vec::new();
    let mut last_sign = 0i8;
    let mut run_end = 0usize;
    for i in 0..n.saturating_sub(1) {
        let dv = g[i + 1] - g[i];
        let s: i8 = if dv > noise_tol {
            1
        } else if dv < -noise_tol {
            -1
        } else {
            0
        };
        if s == 0 {
            continue;
        }
        if last_sign != 0 && s != last_sign {
            let lo = run_end.min(i);
            let hi = i;
            if last_sign == 1 {
                let j = (lo..=hi).max_by(|&a, &b| g[a].partial_cmp(&g[b]).unwrap()).unwrap();
                maxima.push((times[j], g[j]));
            } else {
                let j = (lo..=hi).min_by(|&a, &b| g[a].partial_cmp(&g[b]).unwrap()).unwrap();
                minima.push((times[j], g[j]));
            }
        }
        last_sign = s;
        run_end = i + 1;
    }

    // Endpoints count as candidates for the global extremes.
    let touch = 4.0 * noise_tol;
    if !maxima.iter().any(|&(_, v)| (v - gamma).abs() <= touch) && gamma > lambda_attained {
        maxima.push((times[arg_gamma], gamma));
        maxima.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    if !minima.iter().any(|&(_, v)| (v - lambda_attained).abs() <= touch)
        && gamma > lambda_attained
    {
        minima.push((times[arg_lambda], lambda_attained));
        minima.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }

    ExtremaReport {
        minima,
        maxima,
        gamma,
        lambda_attained,
        gamma_integral,
    }
}

pub fn extrema(traj: &Trajectory, noise_tol: f64) -> ExtremaReport {
    extrema_series(&traj.times, &traj.g, noise_tol)
}

/// Tolerances used by the analytics and solvers. Values are in normalized
/// glucose units unless noted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// `|g(t_end)|` below this counts as settled back to the set point.
    pub settle: f64,
    /// Band around the lower bound within which the response counts as
    /// touching it.
    pub incident: f64,
    /// Relative equal-maxima gap certifying the two-peak optimality shape.
    pub equal_max_rel: f64,
    /// Absolute floor for the equal-maxima gap; keeps certification of
    /// near-flat responses (peak close to the set point) from collapsing to
    /// the noise level.
    pub equal_max_abs: f64,
    /// Absolute band for response-crossing detection.
    pub crossing_band: f64,
    /// Differences below this are flat for extrema detection.
    pub noise: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            settle: 1e-3,
            incident: 1e-3,
            equal_max_rel: 1e-3,
            equal_max_abs: 1e-6,
            crossing_band: 1e-6,
            noise: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    /// All global minima occur at or before the last global maximum.
    Type1,
    /// The global minimum is flanked by two equal maxima.
    Type2,
    /// The response drops below the lower bound.
    Infeasible,
}

/// Evidence-carrying classification of a constrained response.
#[derive(Debug, Clone, Serialize)]
pub struct ShapeCertificate {
    pub shape: ShapeKind,
    pub gamma: f64,
    pub lambda_attained: f64,
    /// Time of the witnessing global minimum.
    pub t_min: f64,
    /// Last time the response touches the lower bound, if it does.
    pub last_lambda_touch: Option<f64>,
    /// Last time the response touches its global maximum.
    pub last_gamma_touch: f64,
    /// Largest value before / after the witnessing minimum.
    pub pre_min_max: f64,
    pub post_min_max: f64,
    /// `|pre_min_max - post_min_max|`; the certified gap for the two-peak
    /// shape.
    pub equal_max_gap: f64,
}

pub(crate) fn touch_band(gamma: f64, tols: &Tolerances) -> f64 {
    (tols.equal_max_rel * gamma.abs())
        .max(tols.equal_max_abs)
        .max(16.0 * tols.noise)
}

/// Last touch times of the lower bound and of the global maximum.
pub fn touch_times(times: &[f64], g: &[f64], lambda: f64, tols: &Tolerances) -> (Option<f64>, f64) {
    let gamma = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gb = touch_band(gamma, tols);
    let mut last_lambda = None;
    let mut last_gamma = times[0];
    for (i, &v) in g.iter().enumerate() {
        if v <= lambda + tols.incident {
            last_lambda = Some(times[i]);
        }
        if v >= gamma - gb {
            last_gamma = times[i];
        }
    }
    (last_lambda, last_gamma)
}

/// Raw shape measurements shared by the classifier and the solvers.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ShapeData {
    pub gamma: f64,
    pub lambda_attained: f64,
    pub t_min: f64,
    pub pre_min_max: f64,
    pub post_min_max: f64,
    pub equal_max_gap: f64,
    pub last_lambda_touch: Option<f64>,
    pub last_gamma_touch: f64,
}

pub(crate) fn shape_data(times: &[f64], g: &[f64], lambda: f64, tols: &Tolerances) -> ShapeData {
    let rep = extrema_series(times, g, tols.noise);
    let gamma = rep.gamma;
    let lam = rep.lambda_attained;
    let (last_lambda, last_gamma) = touch_times(times, g, lambda, tols);

    // Best equal-maxima witness over all global-minimum candidates.
    let min_band = (16.0 * tols.noise).max(1e-12);
    let mut best: Option<(f64, f64, f64, f64)> = None; // (gap, t_min, pre, post)
    for (i, &v) in g.iter().enumerate() {
        if v <= lam + min_band {
            let pre = g[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let post = g[i..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let gap = (pre - post).abs();
            if best.map_or(true, |(bg, ..)| gap < bg) {
                best = Some((gap, times[i], pre, post));
            }
        }
    }
    let (gap, t_min, pre, post) = best.expect("nonempty series");
    ShapeData {
        gamma,
        lambda_attained: lam,
        t_min,
        pre_min_max: pre,
        post_min_max: post,
        equal_max_gap: gap,
        last_lambda_touch: last_lambda,
        last_gamma_touch: last_gamma,
    }
}

/// Classifies a response against the lower bound `lambda`.
///
/// Returns `AmbiguousShape` when the response fits neither optimality shape
/// within tolerance; the caller decides what to do, the classifier never
/// guesses.
pub fn classify_series(
    times: &[f64],
    g: &[f64],
    lambda: f64,
    tols: &Tolerances,
) -> Result<ShapeCertificate> {
    let data = shape_data(times, g, lambda, tols);
    let ShapeData {
        gamma,
        lambda_attained: lam,
        t_min,
        pre_min_max: pre,
        post_min_max: post,
        equal_max_gap: gap,
        last_lambda_touch: last_lambda,
        last_gamma_touch: last_gamma,
    } = data;

    let mut cert = ShapeCertificate {
        shape: ShapeKind::Type1,
        gamma,
        lambda_attained: lam,
        t_min,
        last_lambda_touch: last_lambda,
        last_gamma_touch: last_gamma,
        pre_min_max: pre,
        post_min_max: post,
        equal_max_gap: gap,
    };

    if lam < lambda - tols.incident {
        cert.shape = ShapeKind::Infeasible;
        return Ok(cert);
    }
    // A genuine interior minimum flanked by two equal maxima.
    if gamma > lam + tols.incident && gap <= touch_band(gamma, tols) {
        cert.shape = ShapeKind::Type2;
        return Ok(cert);
    }
    match last_lambda {
        None => Ok(cert), // never touches the bound; the ordering is vacuous
        Some(tl) if tl <= last_gamma + TIME_EPS => Ok(cert),
        Some(tl) => Err(Error::AmbiguousShape(format!(
            "bound touched last at t = {tl:.3} after the last maximum at t = {last_gamma:.3}, \
             but the flanking maxima differ by {gap:.3e}"
        ))),
    }
}

pub fn classify(traj: &Trajectory, lambda: f64, tols: &Tolerances) -> Result<ShapeCertificate> {
    classify_series(&traj.times, &traj.g, lambda, tols)
}

/// True iff the response stays at or above `lambda` and touches it, both
/// within `tol`.
pub fn is_incident(traj: &Trajectory, lambda: f64, tol: f64) -> bool {
    let min_g = traj.g.iter().cloned().fold(f64::INFINITY, f64::min);
    min_g >= lambda - tol && min_g <= lambda + tol
}

/// Crossings of two responses simulated on identical grids.
#[derive(Debug, Clone, Serialize)]
pub struct Crossings {
    pub count: usize,
    pub times: Vec<f64>,
}

/// Counts sign changes of `g(u) - g(v)` outside the tolerance band, merging
/// excursions that only touch the band.
pub fn crossing_count(
    traj_u: &Trajectory,
    traj_v: &Trajectory,
    band: f64,
) -> Result<Crossings> {
    if !traj_u.same_grid(traj_v) {
        return Err(Error::GridMismatch);
    }
    if traj_u.meta.params_hash != traj_v.meta.params_hash {
        return Err(Error::Validation(
            "crossing count requires identical model parameters".into(),
        ));
    }
    let mut count = 0usize;
    let mut times = Vec::new();
    let mut last_sign = 0i8;
    let mut last_time = traj_u.times[0];
    for i in 0..traj_u.len() {
        let diff = traj_u.g[i] - traj_v.g[i];
        let s: i8 = if diff > band {
            1
        } else if diff < -band {
            -1
        } else {
            0
        };
        if s == 0 {
            continue;
        }
        if last_sign != 0 && s != last_sign {
            count += 1;
            times.push(0.5 * (last_time + traj_u.times[i]));
        }
        last_sign = s;
        last_time = traj_u.times[i];
    }
    Ok(Crossings { count, times })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BergmanParams, MagdelaineParams};
    use crate::signals::{Disturbance, PulseInput};

    fn magd() -> MagdelaineParams {
        MagdelaineParams::new(0.7, 0.05, 0.0413, 0.1, 0.0).unwrap()
    }

    #[test]
    fn normalized_rest_stays_at_zero() {
        let spec = ModelSpec::magdelaine(magd());
        let traj = simulate(
            &spec,
            &PulseInput::zero(),
            &Disturbance::none(),
            &Grid::new(200.0, 0.1).unwrap(),
        )
        .unwrap();
        assert!(traj.g.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn marginal_integrator_holds_offset() {
        // With no input and no disturbance, g stays wherever it starts.
        let spec = ModelSpec::Magdelaine {
            params: magd(),
            initial: [0.7, 0.0, 0.0, 0.0, 0.0],
        };
        let traj = simulate(
            &spec,
            &PulseInput::zero(),
            &Disturbance::none(),
            &Grid::new(300.0, 0.1).unwrap(),
        )
        .unwrap();
        assert!(traj.g.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn adequate_input_returns_to_set_point() {
        let p = magd();
        let d = Disturbance::rectangular(1.0, 150.0, 400.0);
        let amount = p.b() / p.a() * d.transient_integral();
        let u = PulseInput::with_amount(133.0, 315.0, amount);
        let spec = ModelSpec::magdelaine(p);
        let grid = Grid::new(400.0 + 14.0 * p.longest_time_constant(), 0.1).unwrap();
        let traj = simulate(&spec, &u, &d, &grid).unwrap();
        assert!(
            traj.g.last().unwrap().abs() < 1e-3,
            "g(t_end) = {}",
            traj.g.last().unwrap()
        );
    }

    #[test]
    fn offset_equivalence_of_physiological_and_normalized_systems() {
        let raw_e = 0.6;
        let p_phys = MagdelaineParams::new(0.7, 0.05, 0.0413, 0.1, raw_e).unwrap();
        let p_norm = MagdelaineParams::new(0.7, 0.05, 0.0413, 0.1, 0.0).unwrap();
        let basal = crate::models::basal_for_steady_state(&p_phys);

        let bolus = PulseInput::pulse(100.0, 40.0, 0.05);
        let d = Disturbance::rectangular(0.5, 200.0, 240.0);
        let grid = Grid::new(600.0, 0.1).unwrap();

        let spec_phys = ModelSpec::Magdelaine {
            params: p_phys,
            initial: [5.5, basal, basal, 0.0, 0.0],
        };
        let spec_norm = ModelSpec::magdelaine(p_norm);
        let t_phys = simulate(&spec_phys, &bolus.with_basal(basal), &d, &grid).unwrap();
        let t_norm = simulate(&spec_norm, &bolus, &d, &grid).unwrap();

        let offset0 = t_phys.g[0] - t_norm.g[0];
        let max_dev = t_phys
            .g
            .iter()
            .zip(&t_norm.g)
            .map(|(a, b)| ((a - b) - offset0).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-9, "offset drift {max_dev}");
    }

    fn berg() -> BergmanParams {
        BergmanParams::new(0.035, 0.9, 0.09, 0.045, 1.0, 0.12).unwrap()
    }

    #[test]
    fn bergman_relaxes_to_basal_equilibrium() {
        let p = berg();
        let basal = 0.05;
        let w_bar = 1.0;
        let g_star = p.equilibrium_glucose(basal, w_bar);
        // Start away from equilibrium.
        let spec = ModelSpec::Bergman {
            params: p,
            initial: [0.0, 0.0, 0.0, 2.0 * g_star],
        };
        let grid = Grid::new(2000.0, 0.1).unwrap();
        let traj = simulate(
            &spec,
            &PulseInput::zero().with_basal(basal),
            &Disturbance::rectangular(w_bar, 0.0, 2000.0),
            &grid,
        )
        .unwrap();
        let g_end = *traj.g.last().unwrap();
        assert!((g_end - g_star).abs() < 1e-4, "g_end {g_end} vs {g_star}");
        // After a burn-in the distance to the equilibrium shrinks monotonically.
        let burn = traj.len() / 4;
        let mut prev = f64::INFINITY;
        for i in (burn..traj.len()).step_by(500) {
            let dist = (traj.g[i] - g_star).abs();
            assert!(dist <= prev + 1e-12);
            prev = dist;
        }
    }

    #[test]
    fn bergman_positivity() {
        let p = berg();
        let spec = ModelSpec::bergman_at_equilibrium(p, 0.0, 1.0);
        let u = PulseInput::impulse(100.0, 50.0);
        let d = Disturbance::rectangular(1.0, 0.0, 1500.0);
        let traj = simulate(&spec, &u, &d, &Grid::new(1500.0, 0.1).unwrap()).unwrap();
        assert!(traj.g.iter().all(|&v| v > 0.0));
        for i in 0..traj.len() {
            let s = traj.state(i);
            assert!(s[..3].iter().all(|&v| v >= -1e-12));
        }
    }

    #[test]
    fn bergman_long_horizon_reaches_analytic_equilibrium() {
        let p = berg();
        let basal = 0.04;
        let w_bar = 1.2;
        let spec = ModelSpec::bergman_at_equilibrium(p, basal, w_bar);
        let traj = simulate(
            &spec,
            &PulseInput::zero().with_basal(basal),
            &Disturbance::rectangular(w_bar, 0.0, 500.0),
            &Grid::new(500.0, 0.1).unwrap(),
        )
        .unwrap();
        let g_star = p.equilibrium_glucose(basal, w_bar);
        assert!((traj.g.last().unwrap() - g_star).abs() < 1e-8);
    }

    #[test]
    fn impulse_matches_narrow_pulse() {
        let p = magd();
        let d = Disturbance::rectangular(20.0, 200.0, 202.0);
        let amount = p.b() / p.a() * d.transient_integral();
        let spec = ModelSpec::magdelaine(p);
        let grid = Grid::new(600.0, 0.01).unwrap();
        let imp = simulate(&spec, &PulseInput::impulse(158.0, amount), &d, &grid).unwrap();
        let nar = simulate(
            &spec,
            &PulseInput::with_amount(158.0, 0.01, amount),
            &d,
            &grid,
        )
        .unwrap();
        let max_dev = imp
            .g
            .iter()
            .zip(&nar.g)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-3, "impulse vs narrow pulse deviation {max_dev}");
    }

    #[test]
    fn grid_too_coarse_on_narrow_pulse() {
        let spec = ModelSpec::magdelaine(magd());
        let err = simulate(
            &spec,
            &PulseInput::pulse(10.0, 0.05, 1.0),
            &Disturbance::none(),
            &Grid::new(100.0, 0.1).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::GridTooCoarse(_)));
    }

    #[test]
    fn extrema_of_flat_response() {
        let times: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let g = vec![0.0; 100];
        let rep = extrema_series(&times, &g, 1e-9);
        assert_eq!(rep.gamma, 0.0);
        assert_eq!(rep.lambda_attained, 0.0);
        assert_eq!(rep.gamma_integral, 0.0);
        assert!(rep.minima.is_empty() && rep.maxima.is_empty());
    }

    #[test]
    fn extrema_single_hump() {
        let times: Vec<f64> = (0..=200).map(|i| i as f64 * 0.5).collect();
        let g: Vec<f64> = times
            .iter()
            .map(|&t| (-((t - 50.0) / 20.0).powi(2)).exp())
            .collect();
        let rep = extrema_series(&times, &g, 1e-12);
        assert_eq!(rep.maxima.len(), 1);
        assert!((rep.maxima[0].0 - 50.0).abs() <= 0.5);
        assert!((rep.gamma - 1.0).abs() < 1e-6);
    }

    #[test]
    fn extrema_two_peaks_with_valley() {
        let times: Vec<f64> = (0..=600).map(|i| i as f64).collect();
        let g: Vec<f64> = times
            .iter()
            .map(|&t| {
                (-((t - 150.0) / 60.0).powi(2)).exp() + (-((t - 450.0) / 60.0).powi(2)).exp()
                    - 1.5 * (-((t - 300.0) / 50.0).powi(2)).exp()
            })
            .collect();
        let rep = extrema_series(&times, &g, 1e-12);
        assert_eq!(rep.maxima.len(), 2);
        assert_eq!(rep.minima.len(), 1);
        // Minima and maxima interleave.
        assert!(rep.maxima[0].0 < rep.minima[0].0 && rep.minima[0].0 < rep.maxima[1].0);
        let tols = Tolerances::default();
        let cert = classify_series(&times, &g, rep.lambda_attained, &tols).unwrap();
        assert_eq!(cert.shape, ShapeKind::Type2);
        assert!(cert.equal_max_gap < 1e-3 * cert.gamma);
    }

    #[test]
    fn classify_infeasible_when_dipping_below_bound() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let g: Vec<f64> = times.iter().map(|&t| -(t / 100.0)).collect();
        let cert = classify_series(&times, &g, -0.5, &Tolerances::default()).unwrap();
        assert_eq!(cert.shape, ShapeKind::Infeasible);
    }

    #[test]
    fn incidence_band() {
        let spec = ModelSpec::magdelaine(magd());
        let traj = simulate(
            &spec,
            &PulseInput::zero(),
            &Disturbance::none(),
            &Grid::new(10.0, 0.1).unwrap(),
        )
        .unwrap();
        assert!(is_incident(&traj, 0.0, 1e-3));
        assert!(!is_incident(&traj, -1.5, 1e-3));
    }

    #[test]
    fn identical_inputs_never_cross() {
        let p = magd();
        let d = Disturbance::rectangular(1.0, 150.0, 400.0);
        let spec = ModelSpec::magdelaine(p);
        let grid = Grid::new(600.0, 0.1).unwrap();
        let u = PulseInput::with_amount(133.0, 315.0, 10.0);
        let a = simulate(&spec, &u, &d, &grid).unwrap();
        let b = simulate(&spec, &u, &d, &grid).unwrap();
        let c = crossing_count(&a, &b, 1e-6).unwrap();
        assert_eq!(c.count, 0);
    }

    #[test]
    fn crossing_rejects_mismatched_grids() {
        let spec = ModelSpec::magdelaine(magd());
        let d = Disturbance::none();
        let u = PulseInput::zero();
        let a = simulate(&spec, &u, &d, &Grid::new(100.0, 0.1).unwrap()).unwrap();
        let b = simulate(&spec, &u, &d, &Grid::new(100.0, 0.2).unwrap()).unwrap();
        assert!(matches!(
            crossing_count(&a, &b, 1e-6),
            Err(Error::GridMismatch)
        ));
    }

    #[test]
    fn step_halving_changes_peak_by_fourth_order() {
        let p = magd();
        let d = Disturbance::rectangular(1.0, 150.0, 400.0);
        let amount = p.b() / p.a() * d.transient_integral();
        let u = PulseInput::with_amount(133.0, 315.0, amount);
        let spec = ModelSpec::magdelaine(p);
        let gamma_of = |h: f64| {
            let traj = simulate(&spec, &u, &d, &Grid::new(700.0, h).unwrap()).unwrap();
            extrema(&traj, 1e-9).gamma
        };
        let coarse = gamma_of(0.2);
        let mid = gamma_of(0.1);
        let fine = gamma_of(0.05);
        assert!((mid - fine).abs() < 1e-3);
        // 4th-order scaling: the change from halving shrinks fast.
        assert!((mid - fine).abs() <= (coarse - mid).abs().max(1e-12) * 4.0 + 1e-12);
    }
}
