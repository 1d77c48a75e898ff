use serde::{Deserialize, Serialize};

use crate::error::{check_time, Error, Result};

/// Forward noising process. `p_t(x | x0) = N(mean_coeff(t) x0, sigma(t)^2 I)`.
///
/// VE uses the geometric interpolation `sigma_min (sigma_max / sigma_min)^t`
/// with `g^2 = d sigma^2 / dt`, starting from the base noise level
/// `sigma_min` at t = 0. VP uses the linear rate
/// `beta(t) = beta_min + t (beta_max - beta_min)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DiffusionSchedule {
    Ve { sigma_min: f64, sigma_max: f64 },
    Vp { beta_min: f64, beta_max: f64 },
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::ve_default()
    }
}

impl DiffusionSchedule {
    pub fn ve_default() -> Self {
        DiffusionSchedule::Ve {
            sigma_min: 0.01,
            sigma_max: 10.0,
        }
    }

    pub fn vp_default() -> Self {
        DiffusionSchedule::Vp {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DiffusionSchedule::Ve {
                sigma_min,
                sigma_max,
            } => {
                if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "VE schedule needs 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
                    )));
                }
            }
            DiffusionSchedule::Vp { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "VP schedule needs 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_ve(&self) -> bool {
        matches!(self, DiffusionSchedule::Ve { .. })
    }

    /// Integer grid time (0..=999) to continuous time.
    pub fn from_grid_time(step: u32) -> f64 {
        f64::from(step) / 999.0
    }

    /// Closed form of `int_0^t beta(s) ds` (VP only; zero for VE).
    pub fn integrated_beta(&self, t: f64) -> f64 {
        match *self {
            DiffusionSchedule::Ve { .. } => 0.0,
            DiffusionSchedule::Vp { beta_min, beta_max } => {
                beta_min * t + 0.5 * t * t * (beta_max - beta_min)
            }
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match *self {
            DiffusionSchedule::Ve { .. } => 0.0,
            DiffusionSchedule::Vp { beta_min, beta_max } => beta_min + t * (beta_max - beta_min),
        }
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma_raw(t))
    }

    pub fn mean_coeff(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.mean_coeff_raw(t))
    }

    /// Unchecked `sigma(t)`; callers validate `t` once per batch.
    pub(crate) fn sigma_raw(&self, t: f64) -> f64 {
        match *self {
            DiffusionSchedule::Ve {
                sigma_min,
                sigma_max,
            } => sigma_min * (sigma_max / sigma_min).powf(t),
            DiffusionSchedule::Vp { .. } => (-(-self.integrated_beta(t)).exp_m1()).sqrt(),
        }
    }

    pub(crate) fn mean_coeff_raw(&self, t: f64) -> f64 {
        match *self {
            DiffusionSchedule::Ve { .. } => 1.0,
            DiffusionSchedule::Vp { .. } => (-0.5 * self.integrated_beta(t)).exp(),
        }
    }

    /// Linear drift coefficient: `f(x, t) = drift_coeff(t) * x`.
    pub fn drift_coeff(&self, t: f64) -> f64 {
        match self {
            DiffusionSchedule::Ve { .. } => 0.0,
            DiffusionSchedule::Vp { .. } => -0.5 * self.beta(t),
        }
    }

    /// Diffusion amplitude `g(t)`.
    pub fn diffusion(&self, t: f64) -> f64 {
        match *self {
            DiffusionSchedule::Ve {
                sigma_min,
                sigma_max,
            } => self.sigma_raw(t) * (2.0 * (sigma_max / sigma_min).ln()).sqrt(),
            DiffusionSchedule::Vp { .. } => self.beta(t).sqrt(),
        }
    }

    /// Time at which the x0-scale noise level `sigma(t) / mean_coeff(t)`
    /// equals `target`. For VE this is the plain inverse of `sigma`.
    pub fn time_for_scaled_sigma(&self, target: f64) -> Result<f64> {
        match *self {
            DiffusionSchedule::Ve {
                sigma_min,
                sigma_max,
            } => {
                if !(target >= sigma_min && target <= sigma_max) {
                    return Err(Error::Domain(format!(
                        "sigma {target} outside VE range [{sigma_min}, {sigma_max}]"
                    )));
                }
                Ok((target / sigma_min).ln() / (sigma_max / sigma_min).ln())
            }
            DiffusionSchedule::Vp { .. } => {
                // sigma^2 / m^2 = exp(B) - 1
                self.time_for_integrated_beta((target * target).ln_1p(), target)
            }
        }
    }

    /// Time at which the raw marginal stdev `sigma(t)` equals `target`.
    pub fn time_for_sigma(&self, target: f64) -> Result<f64> {
        match self {
            DiffusionSchedule::Ve { .. } => self.time_for_scaled_sigma(target),
            DiffusionSchedule::Vp { .. } => {
                if !(target > 0.0 && target < 1.0) {
                    return Err(Error::Domain(format!("VP sigma {target} outside (0, 1)")));
                }
                self.time_for_integrated_beta(-(-target * target).ln_1p(), target)
            }
        }
    }

    fn time_for_integrated_beta(&self, b: f64, target: f64) -> Result<f64> {
        let DiffusionSchedule::Vp { beta_min, beta_max } = *self else {
            unreachable!("VE schedules invert sigma directly")
        };
        let a = 0.5 * (beta_max - beta_min);
        let t = if a.abs() < 1e-15 {
            b / beta_min
        } else {
            (-beta_min + (beta_min * beta_min + 4.0 * a * b).sqrt()) / (2.0 * a)
        };
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::Domain(format!(
                "sigma {target} not attained by the VP schedule on [0, 1]"
            )));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
        h * (0.5 * (f(a) + f(b)) + inner)
    }

    #[test]
    fn ve_boundaries() {
        let s = DiffusionSchedule::ve_default();
        assert!((s.sigma(0.0).unwrap() - 0.01).abs() < 1e-15);
        assert!((s.sigma(1.0).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(s.mean_coeff(0.37).unwrap(), 1.0);
    }

    #[test]
    fn vp_terminal_sigma_matches_quadrature() {
        let s = DiffusionSchedule::vp_default();
        let closed = (1.0 - (-10.05f64).exp()).sqrt();
        assert!((s.sigma(1.0).unwrap() - closed).abs() < 1e-14);
        assert!((closed - 0.99998).abs() < 1e-5);
        let b = trapezoid(|u| s.beta(u), 0.0, 1.0, 10_000);
        assert!((b - s.integrated_beta(1.0)).abs() < 1e-9);
        assert!((s.sigma(1.0).unwrap() - (1.0 - (-b).exp()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let s = DiffusionSchedule::ve_default();
        assert!(matches!(s.sigma(1.5), Err(Error::TimeOutOfRange(_))));
        assert!(s.mean_coeff(-0.1).is_err());
    }

    #[test]
    fn sigma_is_monotone_and_vp_mean_decays() {
        for s in [DiffusionSchedule::ve_default(), DiffusionSchedule::vp_default()] {
            let mut prev = -1.0;
            for i in 0..=1000 {
                let t = i as f64 / 1000.0;
                let sg = s.sigma(t).unwrap();
                assert!(sg > prev);
                prev = sg;
            }
        }
        let vp = DiffusionSchedule::vp_default();
        assert_eq!(vp.mean_coeff(0.0).unwrap(), 1.0);
        assert!(vp.mean_coeff(0.5).unwrap() > vp.mean_coeff(0.6).unwrap());
    }

    #[test]
    fn diffusion_squared_is_variance_rate() {
        // g^2 = d sigma^2/dt - 2 f_coeff sigma^2 (the marginal-variance ODE)
        for s in [DiffusionSchedule::ve_default(), DiffusionSchedule::vp_default()] {
            for &t in &[0.1, 0.4, 0.8] {
                let h = 1e-6;
                let dvar = (s.sigma_raw(t + h).powi(2) - s.sigma_raw(t - h).powi(2)) / (2.0 * h);
                let rhs = dvar - 2.0 * s.drift_coeff(t) * s.sigma_raw(t).powi(2);
                let g2 = s.diffusion(t).powi(2);
                assert!((rhs - g2).abs() < 1e-5 * g2.max(1.0), "{s:?} t={t}");
            }
        }
    }

    #[test]
    fn sigma_inverses() {
        let ve = DiffusionSchedule::ve_default();
        let t = ve.time_for_sigma(0.5).unwrap();
        assert!((ve.sigma(t).unwrap() - 0.5).abs() < 1e-12);
        assert!(ve.time_for_sigma(20.0).is_err());

        let vp = DiffusionSchedule::vp_default();
        let t = vp.time_for_sigma(0.6).unwrap();
        assert!((vp.sigma(t).unwrap() - 0.6).abs() < 1e-12);
        let t = vp.time_for_scaled_sigma(0.5).unwrap();
        let ratio = vp.sigma(t).unwrap() / vp.mean_coeff(t).unwrap();
        assert!((ratio - 0.5).abs() < 1e-12);
        assert!(vp.time_for_scaled_sigma(1e4).is_err());
    }

    #[test]
    fn grid_time_mapping() {
        assert_eq!(DiffusionSchedule::from_grid_time(0), 0.0);
        assert_eq!(DiffusionSchedule::from_grid_time(999), 1.0);
    }

    #[test]
    fn serde_rejects_unknown_keys() {
        let ok: DiffusionSchedule =
            serde_json::from_str(r#"{"kind":"vp","beta_min":0.1,"beta_max":20}"#).unwrap();
        assert_eq!(ok, DiffusionSchedule::vp_default());
        let bad = serde_json::from_str::<DiffusionSchedule>(
            r#"{"kind":"ve","sigma_min":0.01,"sigma_max":10,"extra":1}"#,
        );
        assert!(bad.is_err());
    }
}
