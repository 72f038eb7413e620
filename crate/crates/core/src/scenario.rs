//! Scenario configuration files.
//!
//! A scenario bundles everything one run needs: the model and its parameters,
//! the meal disturbance, the hard lower bound on the response, the
//! integration grid, solver tolerances and optional sweep/oracle grids. The
//! on-disk format is TOML with times in minutes; glucose is in normalized
//! units (set point at zero) for the five-state model and in mmol/L for the
//! minimal model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BergmanParams, MagdelaineParams};
use crate::optimize::{
    required_amount, BergmanProblem, MagdelaineProblem, OracleConfig, SweepConfig,
};
use crate::signals::Disturbance;
use crate::simulate::{Grid, ModelSpec, Tolerances};

/// Model selector plus its parameter record; the TOML table key picks the
/// model, so the id and the parameter shape cannot disagree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    /// Affine five-state compartment model, normalized coordinates.
    Magdelaine(MagdelaineParams),
    /// Nonlinear minimal model, physical units.
    Bergman(BergmanParams),
}

impl ModelConfig {
    pub fn id(&self) -> &'static str {
        match self {
            ModelConfig::Magdelaine(_) => "magdelaine",
            ModelConfig::Bergman(_) => "bergman",
        }
    }
}

/// Integration grid section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Fixed integration step, minutes.
    pub h: f64,
    /// Simulation horizon; derived from the disturbance and the slowest time
    /// constant when absent.
    pub t_end: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { h: 0.1, t_end: None }
    }
}

/// Solver options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SolverConfig {
    /// Damp the duration iteration through a running average of the
    /// midpoint proposals instead of plain bisection.
    pub averaging: bool,
}

/// Fixed-amount sweep grid over (duration, start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    /// Total bolus amount held fixed across the sweep.
    pub amount: f64,
    pub durations: Vec<f64>,
    pub start_min: f64,
    pub start_max: f64,
    #[serde(default = "default_start_step")]
    pub start_step: f64,
}

fn default_start_step() -> f64 {
    1.0
}

/// Brute-force oracle grid; defaults mirror the sweep section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSection {
    /// Integration step for the oracle's own simulations.
    pub h: f64,
    pub t_end: Option<f64>,
    /// Peaks within this of the best count as ties; ties resolve to the
    /// smallest (duration, start).
    pub tie_tol: f64,
    pub durations: Option<Vec<f64>>,
    pub start_min: Option<f64>,
    pub start_max: Option<f64>,
    pub start_step: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            h: 0.5,
            t_end: None,
            tie_tol: 1e-6,
            durations: None,
            start_min: None,
            start_max: None,
            start_step: 1.0,
        }
    }
}

/// A complete, self-describing run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Hard lower bound on the glucose response.
    pub lambda: f64,
    /// Constant infusion the system starts in equilibrium with (minimal
    /// model only; the five-state model is posed around its set point).
    #[serde(default)]
    pub basal: f64,
    /// Fixed total bolus amount. Defaults to the restoring amount for the
    /// five-state model; the minimal-model optimizer computes the required
    /// bolus itself.
    #[serde(default)]
    pub amount: Option<f64>,
    pub model: ModelConfig,
    pub disturbance: Disturbance,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match &self.model {
            ModelConfig::Magdelaine(p) => {
                p.validate()?;
                if self.basal != 0.0 {
                    return Err(Error::Validation(
                        "the five-state model is posed around its set point; \
                         a nonzero basal has no meaning there"
                            .into(),
                    ));
                }
            }
            ModelConfig::Bergman(p) => p.validate()?,
        }
        self.disturbance.validate()?;
        if !self.lambda.is_finite() {
            return Err(Error::Validation("lower bound must be finite".into()));
        }
        if !(self.grid.h > 0.0) || !self.grid.h.is_finite() {
            return Err(Error::Validation(format!(
                "integration step must be positive, got {}",
                self.grid.h
            )));
        }
        if let Some(t_end) = self.grid.t_end {
            Grid::new(t_end, self.grid.h)?.validate()?;
        }
        if let Disturbance::Rectangular { start, end, .. } = self.disturbance {
            let width = end - start;
            if width > 0.0 && width < self.grid.h {
                return Err(Error::GridTooCoarse(format!(
                    "step {} exceeds the disturbance width {width}",
                    self.grid.h
                )));
            }
        }
        if let Some(a) = self.amount {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::Validation(format!(
                    "bolus amount must be nonnegative, got {a}"
                )));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.durations.is_empty() {
                return Err(Error::Validation("sweep needs at least one duration".into()));
            }
            if sw.durations.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
                return Err(Error::Validation("sweep durations must be nonnegative".into()));
            }
            let _ = self.sweep_config()?.starts()?;
        }
        Ok(())
    }

    /// Simulation-ready model: the minimal model starts at equilibrium with
    /// the basal infusion and the disturbance baseline.
    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelConfig::Magdelaine(p) => ModelSpec::magdelaine(p),
            ModelConfig::Bergman(p) => {
                ModelSpec::bergman_at_equilibrium(p, self.basal, self.disturbance.offset())
            }
        }
    }

    /// Default bolus amount for plain simulation: the explicit override, or
    /// the restoring amount for the five-state model (zero for the minimal
    /// model, whose required bolus is a solver output).
    pub fn default_amount(&self) -> f64 {
        self.amount.unwrap_or(match self.model {
            ModelConfig::Magdelaine(p) => required_amount(&p, &self.disturbance),
            ModelConfig::Bergman(_) => 0.0,
        })
    }

    pub fn magdelaine_problem(&self) -> Result<MagdelaineProblem> {
        let ModelConfig::Magdelaine(p) = self.model else {
            return Err(Error::Validation(format!(
                "operation needs the five-state model, scenario `{}` uses `{}`",
                self.name,
                self.model.id()
            )));
        };
        let mut prob = MagdelaineProblem::new(p, self.disturbance, self.lambda);
        prob.h = self.grid.h;
        prob.t_end = self.grid.t_end;
        prob.tolerances = self.tolerances;
        prob.averaging = self.solver.averaging;
        Ok(prob)
    }

    pub fn bergman_problem(&self) -> Result<BergmanProblem> {
        let ModelConfig::Bergman(p) = self.model else {
            return Err(Error::Validation(format!(
                "operation needs the minimal model, scenario `{}` uses `{}`",
                self.name,
                self.model.id()
            )));
        };
        let mut prob = BergmanProblem::new(p, self.basal, self.disturbance, self.lambda);
        prob.h = self.grid.h;
        prob.t_end = self.grid.t_end;
        prob.tolerances = self.tolerances;
        Ok(prob)
    }

    /// Horizon used for plain simulation and sweeps.
    pub fn horizon(&self) -> Result<f64> {
        Ok(match self.model {
            ModelConfig::Magdelaine(_) => self.magdelaine_problem()?.default_horizon(),
            ModelConfig::Bergman(_) => self.bergman_problem()?.default_horizon(),
        })
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let sw = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("scenario `{}` has no [sweep] section", self.name)))?;
        Ok(SweepConfig {
            amount: sw.amount,
            basal: self.basal,
            durations: sw.durations.clone(),
            start_min: sw.start_min,
            start_max: sw.start_max,
            start_step: sw.start_step,
        })
    }

    /// Oracle grid: explicit section values, falling back to an
    /// integer-minute start grid over the whole horizon and integer-minute
    /// durations up to twice the disturbance span.
    pub fn oracle_config(&self) -> Result<OracleConfig> {
        let o = self.oracle.clone().unwrap_or_default();
        let t_end = match o.t_end {
            Some(t) => t,
            None => self.horizon()?,
        };
        let span = self.disturbance.active_end();
        let durations = o.durations.unwrap_or_else(|| {
            let max_tau = (2.0 * span).min(t_end);
            (0..=max_tau as usize).map(|i| i as f64).collect()
        });
        let start_min = o.start_min.unwrap_or(0.0);
        let start_max = o.start_max.unwrap_or(t_end - 1.0);
        Ok(OracleConfig {
            sweep: SweepConfig {
                amount: self.default_amount(),
                basal: self.basal,
                durations,
                start_min,
                start_max,
                start_step: o.start_step,
            },
            h: o.h,
            t_end,
            tie_tol: o.tie_tol,
        })
    }
}
