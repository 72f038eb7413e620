//! Insulin inputs (basal plus one rectangular bolus, with the zero-duration
//! impulse limit) and meal disturbances (rectangular, or driven through a
//! second-order low-pass filter).
//!
//! All types are immutable values and evaluation is pure. The filtered
//! disturbance is evaluated from the closed-form solution of its 2x2
//! lower-triangular system so values are exact on any grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A basal infusion plus a single rectangular bolus.
///
/// `u(t) = basal + magnitude` on `[start, start + duration]` and `basal`
/// elsewhere. A zero duration means an instantaneous bolus of
/// `impulse_amount`, realized by the simulator as a state jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseInput {
    #[serde(default)]
    pub basal: f64,
    #[serde(default)]
    pub magnitude: f64,
    pub start: f64,
    #[serde(default)]
    pub duration: f64,
    #[serde(default)]
    pub impulse_amount: f64,
}

impl PulseInput {
    /// A finite-duration rectangular bolus.
    pub fn pulse(start: f64, duration: f64, magnitude: f64) -> Self {
        PulseInput {
            basal: 0.0,
            magnitude,
            start,
            duration,
            impulse_amount: 0.0,
        }
    }

    /// An instantaneous bolus of the given amount.
    pub fn impulse(start: f64, amount: f64) -> Self {
        PulseInput {
            basal: 0.0,
            magnitude: 0.0,
            start,
            duration: 0.0,
            impulse_amount: amount,
        }
    }

    /// A bolus of fixed total amount: rectangular with magnitude
    /// `amount / duration` when `duration > 0`, an impulse otherwise.
    pub fn with_amount(start: f64, duration: f64, amount: f64) -> Self {
        if duration > 0.0 {
            PulseInput::pulse(start, duration, amount / duration)
        } else {
            PulseInput::impulse(start, amount)
        }
    }

    pub fn with_basal(mut self, basal: f64) -> Self {
        self.basal = basal;
        self
    }

    /// No bolus at all.
    pub fn zero() -> Self {
        PulseInput::pulse(0.0, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("basal", self.basal),
            ("magnitude", self.magnitude),
            ("duration", self.duration),
            ("impulse_amount", self.impulse_amount),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "input {name} must be nonnegative, got {v}"
                )));
            }
        }
        if !self.start.is_finite() {
            return Err(Error::Validation("input time must be finite".into()));
        }
        Ok(())
    }

    /// Total bolus amount (1-norm of the bolus component, basal excluded).
    pub fn amount(&self) -> f64 {
        if self.duration > 0.0 {
            self.magnitude * self.duration
        } else {
            self.impulse_amount
        }
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Rate at time `t`; the impulse component is not part of the rate.
    #[inline]
    pub fn value_at(&self, t: f64) -> f64 {
        if self.duration > 0.0 && t >= self.start && t <= self.end() {
            self.basal + self.magnitude
        } else {
            self.basal
        }
    }

    /// True iff this pulse's support lies strictly inside `other`'s.
    pub fn is_nested(&self, other: &PulseInput) -> bool {
        other.start < self.start && self.end() < other.end()
    }

    /// Discontinuity times of the rate, for exact integration.
    pub(crate) fn edges(&self) -> Vec<f64> {
        if self.duration > 0.0 && self.magnitude > 0.0 {
            vec![self.start, self.end()]
        } else {
            Vec::new()
        }
    }
}

/// Total bolus amount constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmountConstraint {
    pub amount: f64,
}

impl AmountConstraint {
    pub fn new(amount: f64) -> Result<Self> {
        if amount < 0.0 || !amount.is_finite() {
            return Err(Error::Validation(format!(
                "amount constraint must be nonnegative, got {amount}"
            )));
        }
        Ok(AmountConstraint { amount })
    }
}

/// A meal disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    /// `d(t) = magnitude` on `[start, end]`, zero elsewhere.
    Rectangular { magnitude: f64, start: f64, end: f64 },
    /// `d(t) = scale * f1(t) + offset` where `(f1, f2)` is the cascade
    /// `f1' = rate (f2 - f1)`, `f2' = -rate f2 + drive` and the drive is the
    /// rectangle `drive_magnitude` on `[drive_start, drive_end]`.
    Filtered {
        rate: f64,
        drive_magnitude: f64,
        drive_start: f64,
        drive_end: f64,
        scale: f64,
        offset: f64,
    },
}

impl Disturbance {
    pub fn rectangular(magnitude: f64, start: f64, end: f64) -> Self {
        Disturbance::Rectangular {
            magnitude,
            start,
            end,
        }
    }

    pub fn none() -> Self {
        Disturbance::rectangular(0.0, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Disturbance::Rectangular {
                magnitude,
                start,
                end,
            } => {
                if magnitude < 0.0 || !magnitude.is_finite() {
                    return Err(Error::Validation(format!(
                        "disturbance magnitude must be nonnegative, got {magnitude}"
                    )));
                }
                if end < start {
                    return Err(Error::Validation(format!(
                        "disturbance interval [{start}, {end}] is empty"
                    )));
                }
                Ok(())
            }
            Disturbance::Filtered {
                rate,
                drive_magnitude,
                drive_start,
                drive_end,
                scale,
                offset,
            } => {
                if !(rate > 0.0) {
                    return Err(Error::Validation("filter rate must be positive".into()));
                }
                if drive_magnitude < 0.0 || scale < 0.0 || offset < 0.0 {
                    return Err(Error::Validation(
                        "filtered disturbance components must be nonnegative".into(),
                    ));
                }
                if drive_end < drive_start {
                    return Err(Error::Validation(format!(
                        "drive interval [{drive_start}, {drive_end}] is empty"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Constant baseline the disturbance settles to.
    pub fn offset(&self) -> f64 {
        match *self {
            Disturbance::Rectangular { .. } => 0.0,
            Disturbance::Filtered { offset, .. } => offset,
        }
    }

    /// Filter state `(f1, f2)` at time `t`; zero for rectangular disturbances.
    pub fn filter_state_at(&self, t: f64) -> (f64, f64) {
        match *self {
            Disturbance::Rectangular { .. } => (0.0, 0.0),
            Disturbance::Filtered {
                rate,
                drive_magnitude,
                drive_start,
                drive_end,
                ..
            } => filter_state(rate, drive_magnitude, drive_start, drive_end, t),
        }
    }

    #[inline]
    pub fn value_at(&self, t: f64) -> f64 {
        match *self {
            Disturbance::Rectangular {
                magnitude,
                start,
                end,
            } => {
                if t >= start && t <= end {
                    magnitude
                } else {
                    0.0
                }
            }
            Disturbance::Filtered { scale, offset, .. } => {
                let (f1, _) = self.filter_state_at(t);
                scale * f1 + offset
            }
        }
    }

    /// Integral of the transient component over `[0, up_to]`; the constant
    /// offset of a filtered disturbance is excluded (its integral diverges).
    /// `up_to` may be infinite.
    pub fn transient_integral_up_to(&self, up_to: f64) -> f64 {
        if up_to <= 0.0 {
            return 0.0;
        }
        match *self {
            Disturbance::Rectangular {
                magnitude,
                start,
                end,
            } => {
                let hi = up_to.min(end);
                magnitude * (hi - start.min(hi)).max(0.0)
            }
            Disturbance::Filtered {
                rate,
                drive_magnitude,
                drive_start,
                drive_end,
                scale,
                ..
            } => {
                // f1' + f2' = -rate*f1 + drive, so
                // int f1 = (int drive - f1(t) - f2(t)) / rate.
                let drive_area = drive_magnitude
                    * (up_to.min(drive_end) - drive_start.min(up_to)).max(0.0);
                if up_to.is_infinite() {
                    return scale * drive_area / rate;
                }
                let (f1, f2) = self.filter_state_at(up_to);
                scale * (drive_area - f1 - f2) / rate
            }
        }
    }

    /// Integral of the transient component over the whole half-line.
    pub fn transient_integral(&self) -> f64 {
        self.transient_integral_up_to(f64::INFINITY)
    }

    /// Last time the transient component is non-negligible; rectangle end, or
    /// drive end plus a generous settling multiple of the filter time constant.
    pub fn active_end(&self) -> f64 {
        match *self {
            Disturbance::Rectangular { end, .. } => end,
            Disturbance::Filtered {
                rate, drive_end, ..
            } => drive_end + 12.0 / rate,
        }
    }

    /// Rate discontinuity times, for exact integration.
    pub(crate) fn edges(&self) -> Vec<f64> {
        match *self {
            Disturbance::Rectangular {
                magnitude,
                start,
                end,
            } => {
                if magnitude > 0.0 && end > start {
                    vec![start, end]
                } else {
                    Vec::new()
                }
            }
            // The filtered output is C^1; no exact splitting required.
            Disturbance::Filtered { .. } => Vec::new(),
        }
    }
}

/// Closed-form cascade state for a rectangular drive.
fn filter_state(rate: f64, magnitude: f64, start: f64, end: f64, t: f64) -> (f64, f64) {
    if t <= start {
        return (0.0, 0.0);
    }
    // Response accumulated while the drive is on.
    let driven = |dt: f64| -> (f64, f64) {
        let e = (-rate * dt).exp();
        let f2 = magnitude * (1.0 - e) / rate;
        let f1 = magnitude * (1.0 - e * (1.0 + rate * dt)) / rate;
        (f1, f2)
    };
    if t <= end {
        driven(t - start)
    } else {
        let (f1e, f2e) = driven(end - start);
        let dt = t - end;
        let e = (-rate * dt).exp();
        // exp(A dt) = e^{-r dt} [[1, r dt], [0, 1]]
        (e * (f1e + rate * dt * f2e), e * f2e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn amount_of_rectangular_bolus() {
        let u = PulseInput::pulse(133.0, 315.0, 0.075);
        assert!((u.amount() - 23.625).abs() < 1e-12);
    }

    #[test]
    fn amount_of_impulse() {
        let u = PulseInput::impulse(158.0, 2.36);
        assert_eq!(u.amount(), 2.36);
    }

    #[test]
    fn zero_amount_impulse_ignores_magnitude() {
        let u = PulseInput {
            basal: 0.0,
            magnitude: 5.0,
            start: 10.0,
            duration: 0.0,
            impulse_amount: 0.0,
        };
        assert_eq!(u.amount(), 0.0);
    }

    #[test]
    fn evaluation_matches_indicator_form() {
        let u = PulseInput::pulse(10.0, 5.0, 2.0).with_basal(0.5);
        assert_eq!(u.value_at(9.9), 0.5);
        assert_eq!(u.value_at(10.0), 2.5);
        assert_eq!(u.value_at(15.0), 2.5);
        assert_eq!(u.value_at(15.1), 0.5);
    }

    #[test]
    fn nesting_is_strict_containment() {
        let p = |s: f64, e: f64| PulseInput::pulse(s, e - s, 1.0);
        assert!(p(10.0, 20.0).is_nested(&p(5.0, 30.0)));
        assert!(!p(10.0, 20.0).is_nested(&p(10.0, 20.0)));
        assert!(!p(10.0, 20.0).is_nested(&p(15.0, 30.0)));
        // An impulse inside a pulse's interior is nested.
        assert!(PulseInput::impulse(12.0, 1.0).is_nested(&p(5.0, 30.0)));
    }

    #[test]
    fn rectangular_integrals() {
        let d = Disturbance::rectangular(20.0, 200.0, 202.0);
        assert_eq!(d.transient_integral(), 40.0);
        let d2 = Disturbance::rectangular(1.0, 150.0, 400.0);
        assert_eq!(d2.transient_integral(), 250.0);
        assert_eq!(d2.transient_integral_up_to(0.0), 0.0);
        assert_eq!(d2.transient_integral_up_to(160.0), 10.0);
    }

    fn reference_filtered() -> Disturbance {
        Disturbance::Filtered {
            rate: 1.0 / 60.0,
            drive_magnitude: 4.0,
            drive_start: 200.0,
            drive_end: 202.0,
            scale: 1.0 / 263.0,
            offset: 1.0,
        }
    }

    #[test]
    fn filtered_total_integral_is_area_times_static_gain() {
        let d = reference_filtered();
        // Drive area 8, chain gain 1/rate = 60, output scale 1/263.
        let expected = 8.0 * 60.0 / 263.0;
        assert!((d.transient_integral() - expected).abs() < 1e-12);
    }

    #[test]
    fn filtered_closed_form_matches_quadrature() {
        let d = reference_filtered();
        // Simpson quadrature over the closed-form values as the independent
        // check of the running integral.
        let t_end = 1500.0;
        let n = 600_000usize;
        let h = t_end / n as f64;
        let f = |t: f64| d.filter_state_at(t).0 / 263.0;
        let mut acc = f(0.0) + f(t_end);
        for i in 1..n {
            let w = if i % 2 == 0 { 2.0 } else { 4.0 };
            acc += w * f(i as f64 * h);
        }
        let quad = acc * h / 3.0;
        let closed = d.transient_integral_up_to(t_end);
        assert!(
            ((quad - closed) / closed).abs() < 1e-6,
            "quad {quad} vs closed {closed}"
        );
        // The tail beyond t_end is negligible, so the total matches too.
        assert!(((quad - d.transient_integral()) / quad).abs() < 1e-6);
    }

    #[test]
    fn filter_states_nonnegative_and_continuous() {
        let d = reference_filtered();
        let mut prev = d.filter_state_at(0.0);
        for i in 1..=5000 {
            let t = i as f64 * 0.25;
            let (f1, f2) = d.filter_state_at(t);
            assert!(f1 >= 0.0 && f2 >= 0.0);
            // |f2'| <= drive magnitude (4) and |f1'| <= rate * max f2.
            assert!((f1 - prev.0).abs() < 0.1 && (f2 - prev.1).abs() < 4.0 * 0.25 + 1e-9);
            prev = (f1, f2);
        }
    }

    proptest! {
        #[test]
        fn amount_is_translation_invariant(
            start in -500.0..500.0f64,
            shift in -500.0..500.0f64,
            duration in 0.0..400.0f64,
            magnitude in 0.0..5.0f64,
        ) {
            let a = PulseInput::pulse(start, duration, magnitude);
            let b = PulseInput::pulse(start + shift, duration, magnitude);
            prop_assert_eq!(a.amount(), b.amount());
        }

        #[test]
        fn with_amount_round_trips(
            duration in 0.01..500.0f64,
            amount in 0.0..100.0f64,
        ) {
            let u = PulseInput::with_amount(50.0, duration, amount);
            prop_assert!((u.amount() - amount).abs() <= 1e-9 * amount.max(1.0));
        }
    }
}
