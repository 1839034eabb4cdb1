use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Functional form of the per-step noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    /// Straight line between the endpoints.
    Linear,
    /// `beta_1 + (beta_T - beta_1) * ln t / ln T`.
    Log,
    /// `a * exp(b t)`.
    #[default]
    Exp,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "log" | "logarithmic" => Ok(ScheduleKind::Log),
            "exp" | "exponential" => Ok(ScheduleKind::Exp),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Log => "log",
            ScheduleKind::Exp => "exp",
        }
    }
}

/// `b` such that `a * exp(b * steps) == beta_end`.
pub fn rate_for_endpoint(a: f64, beta_end: f64, steps: usize) -> f64 {
    (beta_end / a).ln() / steps as f64
}

/// Precomputed noise levels for steps `1..=T`. Arrays are stored 0-based
/// (`beta[t - 1]`); use the accessors for 1-based step indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub a: f64,
    pub b: f64,
    pub steps: usize,
    pub kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t = a * exp(b t)`.
    pub fn exponential(a: f64, b: f64, steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Exp, a, b, steps)
    }

    /// Schedule of the given form whose endpoints match the exponential
    /// schedule's `beta_1 = a e^b` and `beta_T = a e^{bT}`.
    pub fn new(kind: ScheduleKind, a: f64, b: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if !(a > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!("schedule requires a > 0 and finite b (a={a}, b={b})")));
        }
        let first = a * b.exp();
        let last = a * (b * steps as f64).exp();
        let beta: Vec<f64> = (1..=steps)
            .map(|t| {
                let tf = t as f64;
                match kind {
                    ScheduleKind::Exp => a * (b * tf).exp(),
                    _ if steps == 1 => first,
                    ScheduleKind::Linear => first + (last - first) * (tf - 1.0) / (steps as f64 - 1.0),
                    ScheduleKind::Log => first + (last - first) * tf.ln() / (steps as f64).ln(),
                }
            })
            .collect();
        for (i, &v) in beta.iter().enumerate() {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Schedule { t: i + 1, value: v });
            }
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &bt in &beta {
            acc *= 1.0 - bt;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            a,
            b,
            steps,
            kind,
            beta,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::StepRange {
                step: t,
                max: self.steps,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// Cumulative product of `alpha` up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance at step `t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    /// Coefficients `(on z0_hat, on z_t)` of the posterior mean at step `t`.
    pub fn posterior_mean_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }

    /// `t,beta,alpha_bar,beta_tilde` rows, one per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,beta_tilde\n");
        for t in 1..=self.steps {
            let _ = writeln!(out, "{t},{:e},{:e},{:e}", self.beta(t), self.alpha_bar(t), self.beta_tilde(t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_schedule_closed_form() {
        let s = NoiseSchedule::exponential(0.01, 0.0, 20).unwrap();
        for t in 1..=20 {
            assert_eq!(s.beta(t), 0.01);
            assert!((s.alpha_bar(t) - 0.99f64.powi(t as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn alpha_bar_matches_brute_force_product() {
        let s = NoiseSchedule::exponential(1e-4, 0.1, 50).unwrap();
        let mut oracle = 1.0;
        for t in 1..=50 {
            oracle *= 1.0 - 1e-4 * (0.1 * t as f64).exp();
        }
        assert!((s.alpha_bar(50) - oracle).abs() < 1e-15);
        // Same product evaluated independently in Python.
        assert!((s.alpha_bar(50) - 0.855_971_312_472_863_2).abs() < 1e-15, "{}", s.alpha_bar(50));
    }

    #[test]
    fn identities() {
        let s = NoiseSchedule::exponential(1e-4, rate_for_endpoint(1e-4, 0.02, 50), 50).unwrap();
        assert_eq!(s.beta_tilde(1), 0.0);
        assert!((1.0 - s.alpha_bar(1) - s.beta(1)).abs() < 1e-15);
        for t in 1..=50 {
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-15);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert!((s.beta(50) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_beta_names_step() {
        let err = NoiseSchedule::exponential(1e-4, 0.5, 50).unwrap_err();
        assert!(matches!(err, Error::Schedule { t: 19, .. }), "{err}");
        assert!(NoiseSchedule::exponential(0.0, 0.1, 5).is_err());
    }

    #[test]
    fn matched_endpoints() {
        let b = rate_for_endpoint(1e-4, 0.02, 50);
        let exp = NoiseSchedule::new(ScheduleKind::Exp, 1e-4, b, 50).unwrap();
        for kind in [ScheduleKind::Linear, ScheduleKind::Log] {
            let s = NoiseSchedule::new(kind, 1e-4, b, 50).unwrap();
            assert!((s.beta(1) - exp.beta(1)).abs() < 1e-15);
            assert!((s.beta(50) - exp.beta(50)).abs() < 1e-12);
        }
        assert_eq!(exp.to_csv().lines().count(), 51);
    }
}
