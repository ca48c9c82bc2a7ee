//! DDPM noise schedule: per-step beta, alpha and running alpha-bar, plus the
//! collision-penalty weight w_tau.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Steps are indexed tau = 1..=t; arrays are 0-based at tau - 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Build a schedule satisfying the invariants: alpha-bar strictly decreasing,
/// alpha-bar(1) > 0.99, alpha-bar(T) < 0.01.
pub fn make_schedule(t: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t < 10 {
        return Err(Error::Config(format!("schedule needs T >= 10, got {t}")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            // Reference range (1e-4, 0.02) is calibrated for 1000 steps;
            // rescale so the terminal signal level is step-count invariant.
            let scale = 1000.0 / t as f64;
            (0..t)
                .map(|i| {
                    let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
                    ((1e-4 + frac * (0.02 - 1e-4)) * scale).min(0.999)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let bar = |tau: usize| f(tau as f64 / t as f64) / f(0.0);
            (1..=t)
                .map(|tau| (1.0 - bar(tau) / bar(tau - 1)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sched = NoiseSchedule {
        t,
        beta,
        alpha,
        alpha_bar,
    };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::Config("beta outside (0, 1)".into()));
        }
        for w in self.alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
            }
        }
        if self.alpha_bar[0] <= 0.99 {
            return Err(Error::Config(format!(
                "alpha_bar(1) = {} must exceed 0.99",
                self.alpha_bar[0]
            )));
        }
        if *self.alpha_bar.last().unwrap() >= 0.01 {
            return Err(Error::Config(format!(
                "alpha_bar(T) = {} must be below 0.01",
                self.alpha_bar.last().unwrap()
            )));
        }
        Ok(())
    }

    /// alpha_bar at step tau in 1..=T (alpha_bar(0) = 1).
    pub fn abar(&self, tau: usize) -> f64 {
        if tau == 0 {
            1.0
        } else {
            self.alpha_bar[tau - 1]
        }
    }

    /// Collision-penalty weight w_tau = 1 - sqrt(1 - alpha_bar), emphasizing
    /// high-signal steps.
    pub fn w_tau(&self, tau: usize) -> f64 {
        w_of_abar(self.abar(tau))
    }

    /// Posterior variance of the reverse step at tau.
    pub fn posterior_variance(&self, tau: usize) -> f64 {
        let ab_prev = self.abar(tau - 1);
        let ab = self.abar(tau);
        ((1.0 - ab_prev) / (1.0 - ab) * self.beta[tau - 1]).max(0.0)
    }
}

/// w(alpha_bar) = 1 - sqrt(1 - alpha_bar).
pub fn w_of_abar(abar: f64) -> f64 {
    1.0 - (1.0 - abar).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_kinds_are_monotone_and_bounded() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t in [50, 200, 1000] {
                let s = make_schedule(t, kind).unwrap();
                for w in s.alpha_bar.windows(2) {
                    assert!(w[1] < w[0]);
                }
                assert!(s.abar(1) > 0.99, "{kind:?} T={t}: abar1 {}", s.abar(1));
                assert!(s.abar(t) < 0.01, "{kind:?} T={t}: abarT {}", s.abar(t));
            }
        }
    }

    #[test]
    fn linear_1000_matches_direct_product() {
        // Direct evaluation oracle: product of alphas via a log-sum in f64,
        // for the reference 1e-4..2e-2 range at T = 1000.
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let log_sum: f64 = (0..1000)
            .map(|i| {
                let beta = 1e-4 + (i as f64 / 999.0) * (0.02 - 1e-4);
                (1.0f64 - beta).ln()
            })
            .sum();
        let direct = log_sum.exp();
        assert!(direct < 0.01);
        assert!((s.abar(1000) - direct).abs() < 1e-9);
    }

    #[test]
    fn first_step_is_one_minus_beta() {
        let s = make_schedule(200, ScheduleKind::Linear).unwrap();
        assert_eq!(s.abar(1), s.alpha[0]);
        assert_eq!(s.alpha[0], 1.0 - s.beta[0]);
    }

    #[test]
    fn too_few_steps_rejected() {
        assert!(make_schedule(5, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn w_tau_endpoints_and_midpoint() {
        assert_eq!(w_of_abar(1.0), 1.0);
        assert_eq!(w_of_abar(0.0), 0.0);
        assert!((w_of_abar(0.75) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn w_tau_strictly_increasing_in_abar() {
        let mut prev = -1.0;
        for i in 0..=100 {
            let ab = i as f64 / 100.0;
            let w = w_of_abar(ab);
            assert!(w > prev);
            prev = w;
        }
    }
}
