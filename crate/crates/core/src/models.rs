//! The two dynamical systems: the affine five-state compartment model and the
//! nonlinear minimal model, with their parameter records and equilibrium
//! algebra.
//!
//! Vector fields are pure functions of their arguments. Parameter and state
//! records are plain `Copy` values and safe to share across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the affine five-state (Magdelaine) model.
///
/// The glucose equation is kept in its normalized form
/// `g' = -a*x + b*(x4 + E)` where `a` aliases `alpha2`, `b` aliases `alpha4`
/// and `E` is the endogenous production already divided by `b`. The raw
/// (pre-normalization) value is retained so configs round-trip exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagdelaineParams {
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    /// Endogenous glucose production before normalization.
    #[serde(default)]
    pub endogenous: f64,
}

impl MagdelaineParams {
    pub fn new(alpha2: f64, alpha3: f64, alpha4: f64, alpha5: f64, endogenous: f64) -> Result<Self> {
        let p = MagdelaineParams {
            alpha2,
            alpha3,
            alpha4,
            alpha5,
            endogenous,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
            ("alpha5", self.alpha5),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if self.endogenous < 0.0 || !self.endogenous.is_finite() {
            return Err(Error::Validation(format!(
                "endogenous production must be nonnegative, got {}",
                self.endogenous
            )));
        }
        Ok(())
    }

    /// Glucose-lowering gain; alias of `alpha2`.
    #[inline]
    pub fn a(&self) -> f64 {
        self.alpha2
    }

    /// Glucose-raising gain; alias of `alpha4`.
    #[inline]
    pub fn b(&self) -> f64 {
        self.alpha4
    }

    /// Endogenous production normalized by `b`, the value that enters the
    /// glucose equation as part of `w`.
    #[inline]
    pub fn endogenous_normalized(&self) -> f64 {
        self.endogenous / self.alpha4
    }

    /// Longest time constant of the input and disturbance chains, in minutes.
    pub fn longest_time_constant(&self) -> f64 {
        (1.0 / self.alpha3).max(1.0 / self.alpha5)
    }
}

/// State of the five-state model: `[x1, x2, x3, x4, x5]` with glucose `g = x1`,
/// insulin effectiveness `x = x2`, subcutaneous compartment `x3`, absorption
/// compartment `x4` and its transitional stage `x5`.
pub type MagdelaineState = [f64; 5];

/// Derivative of the five-state model at one point.
///
/// `u_value` is the insulin infusion rate and `d_value` the raw disturbance
/// rate feeding the absorption chain.
#[inline]
pub fn magdelaine_vector_field(
    state: &MagdelaineState,
    u_value: f64,
    d_value: f64,
    params: &MagdelaineParams,
) -> MagdelaineState {
    let [_, x2, x3, x4, x5] = *state;
    let w = x4 + params.endogenous_normalized();
    [
        -params.a() * x2 + params.b() * w,
        -params.alpha3 * x2 + params.alpha3 * x3,
        -params.alpha3 * x3 + params.alpha3 * u_value,
        -params.alpha5 * x4 + params.alpha5 * x5,
        -params.alpha5 * x5 + params.alpha5 * d_value,
    ]
}

/// Basal infusion keeping the glucose derivative at zero absent disturbances:
/// `(b/a) * E` in normalized units. Zero for the normalized system (`E = 0`).
#[inline]
pub fn basal_for_steady_state(params: &MagdelaineParams) -> f64 {
    params.b() / params.a() * params.endogenous_normalized()
}

/// Parameters of the nonlinear minimal (Bergman) model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BergmanParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub k: f64,
    /// Insulin-independent glucose uptake rate, 1/min.
    pub g_uptake: f64,
}

impl BergmanParams {
    pub fn new(a: f64, b: f64, c: f64, d: f64, k: f64, g_uptake: f64) -> Result<Self> {
        let p = BergmanParams {
            a,
            b,
            c,
            d,
            k,
            g_uptake,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("d", self.d),
            ("k", self.k),
            ("g_uptake", self.g_uptake),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Steady insulin effectiveness produced by a constant infusion.
    #[inline]
    pub fn steady_effectiveness(&self, basal: f64) -> f64 {
        self.b * self.k * basal
    }

    /// Equilibrium glucose under constant infusion and constant disturbance.
    #[inline]
    pub fn equilibrium_glucose(&self, basal: f64, w_bar: f64) -> f64 {
        w_bar / (self.steady_effectiveness(basal) + self.g_uptake)
    }

    pub fn longest_time_constant(&self) -> f64 {
        (1.0 / self.a).max(1.0 / self.c).max(1.0 / self.d)
    }
}

/// State of the minimal model: `[x, y, z, g]` — insulin effectiveness, plasma
/// insulin, subcutaneous insulin and plasma glucose.
pub type BergmanState = [f64; 4];

/// Derivative of the minimal model at one point. The insulin chain
/// `z -> y -> x` is linear; glucose is governed by
/// `g' = -(x + G) g + w`.
#[inline]
pub fn bergman_vector_field(
    state: &BergmanState,
    u_value: f64,
    w_value: f64,
    params: &BergmanParams,
) -> BergmanState {
    let [x, y, z, g] = *state;
    [
        -params.a * x + params.a * params.b * y,
        -params.c * y + params.c * z,
        -params.d * z + params.d * params.k * u_value,
        -(x + params.g_uptake) * g + w_value,
    ]
}
