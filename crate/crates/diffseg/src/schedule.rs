//! Noise schedule: per-step variances and every derived coefficient.
//!
//! The schedule is built once from a [`ScheduleSpec`] and stored as plain
//! `f64` tables indexed by timestep, so every downstream module reads the
//! same values bit-for-bit.  The variance ramp is a sigmoid:
//!
//! ```text
//! beta_t = beta_min + (beta_max - beta_min) * logistic(sharpness * (2t/T - 1))
//! ```
//!
//! Conventions at the boundary: `alpha_bar[0] = 1` (empty product) and
//! `gamma[0] = 0`, which force `tilde_beta[1] = 0` — the final reverse
//! step is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters that define a sigmoid variance schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    /// Number of diffusion steps `T`.
    pub t_steps: usize,
    /// Variance at the low end of the ramp.
    pub beta_min: f64,
    /// Variance at the high end of the ramp.
    pub beta_max: f64,
    /// Steepness of the sigmoid ramp.
    pub sharpness: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t_steps: 500,
            beta_min: 1e-4,
            beta_max: 0.02,
            sharpness: 6.0,
        }
    }
}

impl ScheduleSpec {
    /// Default spec with a different number of steps.
    pub fn with_steps(t_steps: usize) -> Self {
        ScheduleSpec {
            t_steps,
            ..ScheduleSpec::default()
        }
    }

    /// Check the documented parameter ranges.
    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 {
            return Err(Error::InvalidConfig("t_steps must be >= 1".into()));
        }
        if !(self.beta_min > 0.0 && self.beta_max < 1.0 && self.beta_min <= self.beta_max) {
            return Err(Error::InvalidConfig(format!(
                "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.sharpness > 0.0) || !self.sharpness.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sharpness must be finite and > 0, got {}",
                self.sharpness
            )));
        }
        Ok(())
    }
}

/// Coefficients of the closed-form label posterior at one timestep.
///
/// The posterior over the previous state, given the clean label and the
/// shared noise draw, is `N(c_y0 * y0 + c_eps * eps, var * I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    /// Coefficient on the clean label: `sqrt(alpha_bar[t-1])`.
    pub c_y0: f64,
    /// Coefficient on the shared noise: `sqrt(alpha[t]) * gamma[t-1] / sqrt(gamma[t])`.
    pub c_eps: f64,
    /// Posterior variance `tilde_beta[t]`.
    pub var: f64,
}

/// One row of the schedule table, as shown by `inspect-schedule`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub t: usize,
    pub beta: f64,
    pub alpha_bar: f64,
    pub gamma: f64,
    pub tilde_beta: f64,
    pub snr: f64,
}

/// Immutable precomputed schedule tables for `t = 1..=T`.
///
/// Arrays are indexed directly by `t`; index 0 carries the boundary
/// conventions where defined (`alpha_bar[0] = 1`, `gamma[0] = 0`) and is
/// unused otherwise.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    gamma: Vec<f64>,
    tilde_beta: Vec<f64>,
}

/// Numerically stable logistic function.
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl NoiseSchedule {
    /// Build the sigmoid-ramp schedule defined by `spec`.
    pub fn build_sigmoid(spec: ScheduleSpec) -> Result<Self> {
        spec.validate()?;
        let t_steps = spec.t_steps;
        let mut beta = vec![0.0; t_steps + 1];
        let mut alpha = vec![0.0; t_steps + 1];
        let mut alpha_bar = vec![0.0; t_steps + 1];
        let mut gamma = vec![0.0; t_steps + 1];
        let mut tilde_beta = vec![0.0; t_steps + 1];

        alpha_bar[0] = 1.0;
        gamma[0] = 0.0;
        for t in 1..=t_steps {
            let x = spec.sharpness * (2.0 * t as f64 / t_steps as f64 - 1.0);
            beta[t] = spec.beta_min + (spec.beta_max - spec.beta_min) * logistic(x);
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            gamma[t] = 1.0 - alpha_bar[t];
            tilde_beta[t] = beta[t] * gamma[t - 1] / gamma[t];
        }

        let sched = NoiseSchedule {
            spec,
            beta,
            alpha,
            alpha_bar,
            gamma,
            tilde_beta,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// Number of diffusion steps `T`.
    pub fn t_steps(&self) -> usize {
        self.spec.t_steps
    }

    /// The spec this schedule was built from.
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Per-step variance `beta[t]`.
    ///
    /// # Panics
    /// If `t` is outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(
            (1..=self.spec.t_steps).contains(&t),
            "beta(t) requires 1 <= t <= {}, got {t}",
            self.spec.t_steps
        );
        self.beta[t]
    }

    /// Per-step retention `alpha[t] = 1 - beta[t]`.
    ///
    /// # Panics
    /// If `t` is outside `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(
            (1..=self.spec.t_steps).contains(&t),
            "alpha(t) requires 1 <= t <= {}, got {t}",
            self.spec.t_steps
        );
        self.alpha[t]
    }

    /// Cumulative signal coefficient `alpha_bar[t]`, with `alpha_bar[0] = 1`.
    ///
    /// # Panics
    /// If `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(
            t <= self.spec.t_steps,
            "alpha_bar(t) requires t <= {}, got {t}",
            self.spec.t_steps
        );
        self.alpha_bar[t]
    }

    /// Cumulative noise variance `gamma[t] = 1 - alpha_bar[t]`, with `gamma[0] = 0`.
    ///
    /// # Panics
    /// If `t > T`.
    pub fn gamma(&self, t: usize) -> f64 {
        assert!(
            t <= self.spec.t_steps,
            "gamma(t) requires t <= {}, got {t}",
            self.spec.t_steps
        );
        self.gamma[t]
    }

    /// Posterior variance `tilde_beta[t] = beta[t] * gamma[t-1] / gamma[t]`.
    ///
    /// `tilde_beta[1] = 0` exactly because `gamma[0] = 0`.
    ///
    /// # Panics
    /// If `t` is outside `1..=T`.
    pub fn tilde_beta(&self, t: usize) -> f64 {
        assert!(
            (1..=self.spec.t_steps).contains(&t),
            "tilde_beta(t) requires 1 <= t <= {}, got {t}",
            self.spec.t_steps
        );
        self.tilde_beta[t]
    }

    /// Signal-to-noise ratio `alpha_bar[t] / gamma[t]`.
    ///
    /// Rejects `t = 0`, where `gamma[0] = 0` makes the ratio undefined.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(self.alpha_bar[t] / self.gamma[t])
    }

    /// Closed-form posterior coefficients at step `t` (see [`PosteriorCoeffs`]).
    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t, 1)?;
        Ok(PosteriorCoeffs {
            c_y0: self.alpha_bar[t - 1].sqrt(),
            c_eps: self.alpha[t].sqrt() * self.gamma[t - 1] / self.gamma[t].sqrt(),
            var: self.tilde_beta[t],
        })
    }

    /// All table columns for one step, checked.
    pub fn row(&self, t: usize) -> Result<ScheduleRow> {
        self.check_t(t, 1)?;
        Ok(ScheduleRow {
            t,
            beta: self.beta[t],
            alpha_bar: self.alpha_bar[t],
            gamma: self.gamma[t],
            tilde_beta: self.tilde_beta[t],
            snr: self.alpha_bar[t] / self.gamma[t],
        })
    }

    /// Validate `t` against `min..=T`.
    pub fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.spec.t_steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min,
                max: self.spec.t_steps,
            });
        }
        Ok(())
    }

    /// Check every stored invariant; used after construction and by tests.
    pub fn validate(&self) -> Result<()> {
        let t_steps = self.spec.t_steps;
        if self.alpha_bar[0] != 1.0 || self.gamma[0] != 0.0 {
            return Err(Error::Internal("schedule boundary conventions broken".into()));
        }
        if self.tilde_beta[1] != 0.0 {
            return Err(Error::Internal("tilde_beta[1] must be exactly 0".into()));
        }
        let ramped = self.spec.beta_min < self.spec.beta_max;
        for t in 1..=t_steps {
            if !(self.beta[t] > 0.0 && self.beta[t] < 1.0) {
                return Err(Error::Internal(format!("beta[{t}] outside (0, 1)")));
            }
            if self.gamma[t] != 1.0 - self.alpha_bar[t] {
                return Err(Error::Internal(format!("gamma[{t}] != 1 - alpha_bar[{t}]")));
            }
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(Error::Internal(format!(
                    "alpha_bar not strictly decreasing at t = {t}"
                )));
            }
            if ramped && t > 1 && self.beta[t] <= self.beta[t - 1] {
                return Err(Error::Internal(format!(
                    "beta not strictly increasing at t = {t}"
                )));
            }
        }
        Ok(())
    }

    /// Column-aligned text table of every `stride`-th row plus the last.
    pub fn format_table(&self, stride: usize) -> String {
        let stride = stride.max(1);
        let mut out = String::new();
        out.push_str(&format!(
            "{:>5}  {:>13}  {:>13}  {:>13}  {:>13}  {:>13}\n",
            "t", "beta", "alpha_bar", "gamma", "tilde_beta", "snr"
        ));
        let t_steps = self.spec.t_steps;
        let mut t = 1;
        while t <= t_steps {
            let row = self.row(t).expect("t in range by construction");
            out.push_str(&format!(
                "{:>5}  {:>13.6e}  {:>13.6e}  {:>13.6e}  {:>13.6e}  {:>13.6e}\n",
                row.t, row.beta, row.alpha_bar, row.gamma, row.tilde_beta, row.snr
            ));
            if t == t_steps {
                break;
            }
            t = (t + stride).min(t_steps);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn default_100() -> NoiseSchedule {
        NoiseSchedule::build_sigmoid(ScheduleSpec::with_steps(100)).expect("valid spec")
    }

    #[test]
    fn default_spec_matches_reference_settings() {
        let spec = ScheduleSpec::default();
        assert_eq!(spec.t_steps, 500);
        assert_eq!(spec.beta_min, 1e-4);
        assert_eq!(spec.beta_max, 0.02);
        assert_eq!(spec.sharpness, 6.0);
        NoiseSchedule::build_sigmoid(spec).expect("default spec builds");
    }

    #[test]
    fn rejects_invalid_specs() {
        let bad = [
            ScheduleSpec { t_steps: 0, ..ScheduleSpec::default() },
            ScheduleSpec { beta_min: 0.0, ..ScheduleSpec::default() },
            ScheduleSpec { beta_min: -0.1, ..ScheduleSpec::default() },
            ScheduleSpec { beta_max: 1.0, ..ScheduleSpec::default() },
            ScheduleSpec { beta_min: 0.5, beta_max: 0.4, ..ScheduleSpec::default() },
            ScheduleSpec { sharpness: 0.0, ..ScheduleSpec::default() },
            ScheduleSpec { sharpness: f64::NAN, ..ScheduleSpec::default() },
        ];
        for spec in bad {
            assert!(
                NoiseSchedule::build_sigmoid(spec).is_err(),
                "spec should be rejected: {spec:?}"
            );
        }
    }

    #[test]
    fn constant_beta_degenerates_to_powers() {
        let b = 0.01;
        let spec = ScheduleSpec {
            t_steps: 4,
            beta_min: b,
            beta_max: b,
            sharpness: 3.0,
        };
        let sched = NoiseSchedule::build_sigmoid(spec).expect("valid spec");
        let mut expected_bar = 1.0;
        for t in 1..=4 {
            assert_eq!(sched.beta(t), b);
            expected_bar *= 1.0 - b;
            assert_eq!(sched.alpha_bar(t), expected_bar);
        }
    }

    #[test]
    fn sigmoid_formula_matches_direct_evaluation() {
        let spec = ScheduleSpec::with_steps(100);
        let sched = NoiseSchedule::build_sigmoid(spec).expect("valid spec");
        for t in [1usize, 17, 50, 83, 100] {
            let x = spec.sharpness * (2.0 * t as f64 / 100.0 - 1.0);
            let sig = 1.0 / (1.0 + (-x).exp());
            let expected = spec.beta_min + (spec.beta_max - spec.beta_min) * sig;
            let got = sched.beta(t);
            assert!(
                (got - expected).abs() <= 1e-15 * expected,
                "beta({t}): {got} vs {expected}"
            );
        }
        // Midpoint of an even ramp sits exactly halfway between the bounds.
        let mid = spec.beta_min + (spec.beta_max - spec.beta_min) * 0.5;
        assert_eq!(sched.beta(50), mid);
    }

    #[test]
    fn boundary_conventions_hold() {
        let sched = default_100();
        assert_eq!(sched.alpha_bar(0), 1.0);
        assert_eq!(sched.gamma(0), 0.0);
        assert_eq!(sched.tilde_beta(1), 0.0);
    }

    #[test]
    fn stored_tables_are_monotone() {
        let sched = default_100();
        for t in 1..=100 {
            assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
            assert!(sched.gamma(t) > sched.gamma(t - 1));
            if t > 1 {
                assert!(sched.beta(t) > sched.beta(t - 1));
                assert!(sched.snr(t).unwrap() < sched.snr(t - 1).unwrap());
            }
        }
    }

    #[test]
    fn gamma_is_complement_bit_for_bit() {
        let sched = default_100();
        for t in 0..=100 {
            assert_eq!(sched.gamma(t).to_bits(), (1.0 - sched.alpha_bar(t)).to_bits());
        }
    }

    #[test]
    fn alpha_bar_matches_exact_rational_product() {
        // Every stored beta is a dyadic rational, so the cumulative product
        // can be reproduced exactly with big rationals and compared to the
        // f64 table within accumulated rounding error.
        let sched = default_100();
        let mut product = BigRational::from_integer(BigInt::from(1));
        for t in 1..=100 {
            let alpha = BigRational::from_float(sched.alpha(t)).expect("finite");
            product *= alpha;
            let exact = rational_to_f64(&product);
            let got = sched.alpha_bar(t);
            let rel = ((got - exact) / exact).abs();
            assert!(rel <= 1e-13, "alpha_bar({t}): rel error {rel}");
        }
    }

    fn rational_to_f64(r: &BigRational) -> f64 {
        // 200 bits of scaling keeps full f64 precision through the division.
        let scale = BigInt::from(1u8) << 200;
        let scaled: BigInt = (r.numer() * &scale) / r.denom();
        let s: String = scaled.to_string();
        let v: f64 = s.parse().expect("integer parses as f64");
        v / 2f64.powi(200)
    }

    #[test]
    fn snr_matches_high_precision_recomputation() {
        let sched = default_100();
        let mut product = BigRational::from_integer(BigInt::from(1));
        for t in 1..=50 {
            product *= BigRational::from_float(sched.alpha(t)).expect("finite");
        }
        let bar = rational_to_f64(&product);
        let expected = bar / (1.0 - bar);
        let got = sched.snr(50).unwrap();
        assert!(
            ((got - expected) / expected).abs() <= 1e-12,
            "snr(50): {got} vs {expected}"
        );
    }

    #[test]
    fn posterior_coeffs_boundary_and_formula() {
        let sched = default_100();
        let first = sched.posterior_coeffs(1).unwrap();
        assert_eq!(first.c_y0, 1.0);
        assert_eq!(first.c_eps, 0.0);
        assert_eq!(first.var, 0.0);

        let last = sched.posterior_coeffs(100).unwrap();
        assert_eq!(last.var, sched.beta(100) * sched.gamma(99) / sched.gamma(100));
    }

    #[test]
    fn posterior_identity_collapses_the_substituted_mean() {
        // Substituting y_t = sqrt(alpha_bar[t]) y0 + sqrt(gamma[t]) eps into
        // the vicarious-posterior mean must reproduce the closed-form
        // coefficients: the y0 coefficient collapses to sqrt(alpha_bar[t-1])
        // and the eps coefficient to sqrt(alpha[t]) gamma[t-1] / sqrt(gamma[t]).
        for t_steps in [10usize, 100, 500] {
            let sched =
                NoiseSchedule::build_sigmoid(ScheduleSpec::with_steps(t_steps)).expect("valid");
            for t in 1..=t_steps {
                let coeff = sched.posterior_coeffs(t).unwrap();
                let c_y0_sub = sched.alpha_bar(t - 1).sqrt() * sched.beta(t) / sched.gamma(t)
                    + sched.alpha(t).sqrt() * sched.gamma(t - 1) / sched.gamma(t)
                        * sched.alpha_bar(t).sqrt();
                let c_eps_sub = sched.alpha(t).sqrt() * sched.gamma(t - 1) / sched.gamma(t)
                    * sched.gamma(t).sqrt();
                assert!(
                    (c_y0_sub - coeff.c_y0).abs() <= 1e-12,
                    "T={t_steps} t={t}: y0 coefficient {c_y0_sub} vs {}",
                    coeff.c_y0
                );
                assert!(
                    (c_eps_sub - coeff.c_eps).abs() <= 1e-12,
                    "T={t_steps} t={t}: eps coefficient {c_eps_sub} vs {}",
                    coeff.c_eps
                );
            }
        }
    }

    #[test]
    fn snr_unity_near_half_signal() {
        // Where alpha_bar crosses 0.5, snr crosses 1.
        let sched = default_100();
        let mut crossed = false;
        for t in 2..=100 {
            if sched.alpha_bar(t) <= 0.5 && sched.alpha_bar(t - 1) > 0.5 {
                assert!(sched.snr(t - 1).unwrap() > 1.0);
                assert!(sched.snr(t).unwrap() <= 1.0);
                crossed = true;
            }
        }
        assert!(crossed, "default schedule should cross snr = 1");
    }

    #[test]
    fn checked_ops_reject_out_of_range() {
        let sched = default_100();
        assert!(sched.snr(0).is_err());
        assert!(sched.snr(101).is_err());
        assert!(sched.posterior_coeffs(0).is_err());
        assert!(sched.posterior_coeffs(101).is_err());
        assert!(sched.row(0).is_err());
    }

    #[test]
    #[should_panic(expected = "beta(t)")]
    fn beta_accessor_panics_at_zero() {
        default_100().beta(0);
    }

    #[test]
    fn table_has_header_and_all_rows() {
        let sched = NoiseSchedule::build_sigmoid(ScheduleSpec::with_steps(10)).expect("valid");
        let table = sched.format_table(1);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 11);
        assert!(lines[0].contains("tilde_beta"));
        assert!(lines[1].trim_start().starts_with('1'));
        assert!(lines[10].trim_start().starts_with("10"));
    }

    #[test]
    fn table_stride_keeps_last_row() {
        let sched = default_100();
        let table = sched.format_table(7);
        let last = table.lines().last().unwrap();
        assert!(last.trim_start().starts_with("100"));
    }

    proptest! {
        #[test]
        fn random_specs_satisfy_invariants(
            t_steps in 1usize..64,
            beta_min in 1e-6f64..0.1,
            spread in 0.0f64..0.5,
            sharpness in 0.1f64..20.0,
        ) {
            let spec = ScheduleSpec {
                t_steps,
                beta_min,
                beta_max: (beta_min + spread).min(0.9),
                sharpness,
            };
            let sched = NoiseSchedule::build_sigmoid(spec).unwrap();
            prop_assert!(sched.validate().is_ok());
            for t in 1..=t_steps {
                let c = sched.posterior_coeffs(t).unwrap();
                prop_assert!(c.var >= 0.0 && c.var < 1.0);
                prop_assert!(c.c_y0 > 0.0 && c.c_y0 <= 1.0);
                prop_assert!(c.c_eps >= 0.0);
            }
        }
    }
}
