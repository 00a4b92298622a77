//! Variance-preserving noise schedule and the deterministic first-order
//! sampler step.
//!
//! Time arithmetic is always carried out in f64 regardless of the field
//! scalar type: schedule coefficients are cheap to compute and the endpoint
//! identities (`α_0 = 1`, `α_1 = 0`) must hold exactly, not merely to
//! single-precision roundoff. `cos(π/2)` is not exactly zero in floating
//! point, so the `t = 1` endpoint is branch-cased.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    CosineVp,
}

/// Noise schedule with `α_t² + σ_t² = 1`: data weight `α` decays from 1 to 0
/// while noise weight `σ` grows from 0 to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn cosine_vp() -> Self {
        Self { kind: ScheduleKind::CosineVp }
    }

    /// Data coefficient `α_t = cos(π t / 2)`; exactly 0 at `t = 1`.
    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::CosineVp => {
                if t >= 1.0 {
                    0.0
                } else {
                    (std::f64::consts::FRAC_PI_2 * t).cos()
                }
            }
        }
    }

    /// Noise coefficient `σ_t = sin(π t / 2)`; exactly 1 at `t = 1`.
    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::CosineVp => {
                if t >= 1.0 {
                    1.0
                } else {
                    (std::f64::consts::FRAC_PI_2 * t).sin()
                }
            }
        }
    }

    /// Draws from the forward perturbation kernel: `α_t·x0 + σ_t·eps`.
    pub fn perturb<T: Real>(&self, x0: &Field<T>, t: f64, eps: &Field<T>) -> Result<Field<T>> {
        check_unit_time(t)?;
        let a = T::of(self.alpha(t));
        let s = T::of(self.sigma(t));
        x0.zip(eps, |x, e| a * x + s * e)
    }

    /// Inverts the kernel around a data estimate: `(x_t − α_t·x0_hat)/σ_t`.
    pub fn data_to_noise<T: Real>(
        &self,
        x_t: &Field<T>,
        x0_hat: &Field<T>,
        t: f64,
    ) -> Result<Field<T>> {
        check_unit_time(t)?;
        let sigma = self.sigma(t);
        if sigma == 0.0 {
            return Err(CoreError::domain(
                "data_to_noise is undefined at t = 0 where sigma vanishes",
            ));
        }
        let a = T::of(self.alpha(t));
        let inv_s = T::of(1.0 / sigma);
        x_t.zip(x0_hat, |xt, x0| (xt - a * x0) * inv_s)
    }

    /// Deterministic update from time `s` down to `t < s`, holding the noise
    /// estimate fixed: reconstruct `x̂0 = (x_s − σ_s·eps_hat)/α_s`, then
    /// re-noise to `x_t = α_t·x̂0 + σ_t·eps_hat`.
    pub fn ode_step<T: Real>(
        &self,
        s: f64,
        t: f64,
        x_s: &Field<T>,
        eps_hat: &Field<T>,
    ) -> Result<Field<T>> {
        check_unit_time(s)?;
        check_unit_time(t)?;
        if s <= t {
            return Err(CoreError::contract(format!(
                "ode_step must move backward in time, got s = {s}, t = {t}"
            )));
        }
        self.ode_step_unchecked(s, t, x_s, eps_hat)
    }

    /// `ode_step` without the `t < s` ordering check, so the `t = s` fixed
    /// point stays expressible for internal consistency tests.
    pub(crate) fn ode_step_unchecked<T: Real>(
        &self,
        s: f64,
        t: f64,
        x_s: &Field<T>,
        eps_hat: &Field<T>,
    ) -> Result<Field<T>> {
        let alpha_s = self.alpha(s);
        if alpha_s == 0.0 {
            return Err(CoreError::domain(format!(
                "ode_step cannot start from s = {s} where alpha vanishes"
            )));
        }
        let inv_as = T::of(1.0 / alpha_s);
        let ss = T::of(self.sigma(s));
        let at = T::of(self.alpha(t));
        let st = T::of(self.sigma(t));
        x_s.zip(eps_hat, |xs, e| {
            let x0 = (xs - ss * e) * inv_as;
            at * x0 + st * e
        })
    }
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}
