//! Supervised loss terms, their schedule-dependent weights, and the
//! composite objective.
//!
//! Each step trains on one sampled timestep: the reconstruction term
//! compares the label rebuilt from the two network outputs against the
//! clean label (weight `alpha_bar(t-1) / (2 sigma_t^2)`), the noise term
//! compares predicted and true noise (weight
//! `alpha_t gamma(t-1)^2 / (2 sigma_t^2 gamma_t)`, exactly zero at t=1),
//! a proximity term supervises the noisy-label stream inside a small
//! time window, and a dice term acts on the sigmoid of the rebuilt
//! label.  Signal-to-noise reweighting multiplies the two diffusion
//! terms.  Gradients with respect to both network outputs are produced
//! in closed form alongside every breakdown.
//!
//! Scalar accumulation runs in double precision in a fixed order;
//! gradient arrays stay in the caller's precision.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::diffusion::reconstruct_origin;
use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};
use crate::schedule::NoiseSchedule;

/// Choice of the posterior variance proxy sigma_t^2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sigma2Mode {
    /// sigma_t^2 = beta_t.
    Beta,
    /// sigma_t^2 = tilde_beta_t, falling back to beta_1 at t = 1 where
    /// tilde_beta_1 is exactly zero.
    #[default]
    TildeBeta,
}

/// Multipliers and switches of the composite objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sigma2_mode: Sigma2Mode,
    /// Multiplier of the dice term.
    pub lambda_dice: f64,
    /// Multiplier of the noisy-label proximity term.
    pub lambda_p: f64,
    /// Additive constant inside the SNR reweighting denominator.
    pub p2_k: f64,
    /// Exponent of the SNR reweighting denominator.
    pub p2_gamma: f64,
    /// The proximity term applies only when the sampled t is at most this.
    pub t_p: usize,
    /// Dice smoothing constant.
    pub dice_smooth: f64,
}

impl LossWeights {
    /// Defaults scaled to a schedule of `t_steps` steps (window = T/10).
    pub fn defaults_for(t_steps: usize) -> Self {
        LossWeights {
            sigma2_mode: Sigma2Mode::TildeBeta,
            lambda_dice: 1.0,
            lambda_p: 1.0,
            p2_k: 1.0,
            p2_gamma: 1.0,
            t_p: t_steps / 10,
            dice_smooth: 1.0,
        }
    }

    /// Check invariants against the schedule length the weights will run with.
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.t_p > t_steps {
            return Err(Error::InvalidConfig(format!(
                "proximity window {} exceeds schedule length {t_steps}",
                self.t_p
            )));
        }
        for (name, v) in [
            ("lambda_dice", self.lambda_dice),
            ("lambda_p", self.lambda_p),
            ("p2_k", self.p2_k),
            ("p2_gamma", self.p2_gamma),
            ("dice_smooth", self.dice_smooth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step loss values; `total` is the weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Reconstruction term (t >= 2), unweighted by the SNR factor.
    pub l_d1: f64,
    /// Noise-matching term, unweighted by the SNR factor.
    pub l_d2: f64,
    /// Noisy-label proximity term (0 outside the window).
    pub l_p: f64,
    /// Last-step reconstruction term (t = 1 only).
    pub l_d0: f64,
    /// Dice term on the sigmoid of the rebuilt label.
    pub l_dice: f64,
    /// p2 * (l_d1 + l_d2) + lambda_p * l_p + l_d0 + lambda_dice * l_dice.
    pub total: f64,
}

impl LossBreakdown {
    /// One machine-parsable training-log line.
    pub fn log_line(&self, step: usize, t: usize) -> String {
        format!(
            "step={step} t={t} l_d1={:.6e} l_d2={:.6e} l_p={:.6e} l_d0={:.6e} l_dice={:.6e} total={:.6e}",
            self.l_d1, self.l_d2, self.l_p, self.l_d0, self.l_dice, self.total
        )
    }
}

/// sigma_t^2 under the configured mode.
pub fn sigma2(sched: &NoiseSchedule, t: usize, mode: Sigma2Mode) -> Result<f64> {
    sched.check_t(t, 1)?;
    Ok(match mode {
        Sigma2Mode::Beta => sched.beta(t),
        // tilde_beta_1 = 0 would put a zero in the denominator of every
        // 1/(2 sigma^2) weight; beta_1 is the standard stand-in there.
        Sigma2Mode::TildeBeta if t == 1 => sched.beta(1),
        Sigma2Mode::TildeBeta => sched.tilde_beta(t),
    })
}

/// Weight of the reconstruction term: alpha_bar(t-1) / (2 sigma_t^2).
pub fn weight_d1(sched: &NoiseSchedule, t: usize, w: &LossWeights) -> Result<f64> {
    Ok(sched.alpha_bar(t - 1) / (2.0 * sigma2(sched, t, w.sigma2_mode)?))
}

/// Weight of the noise term: alpha_t gamma(t-1)^2 / (2 sigma_t^2 gamma_t).
/// Exactly zero at t = 1 because gamma(0) = 0.
pub fn weight_d2(sched: &NoiseSchedule, t: usize, w: &LossWeights) -> Result<f64> {
    let s2 = sigma2(sched, t, w.sigma2_mode)?;
    let g_prev = sched.gamma(t - 1);
    Ok(sched.alpha(t) * g_prev * g_prev / (2.0 * s2 * sched.gamma(t)))
}

/// SNR reweighting factor 1 / (p2_k + SNR_t)^p2_gamma.
pub fn p2_weight(sched: &NoiseSchedule, t: usize, w: &LossWeights) -> Result<f64> {
    let snr = sched.snr(t)?;
    Ok((w.p2_k + snr).powf(-w.p2_gamma))
}

fn check_same_shape<F: Real>(context: &str, a: &Array2<F>, b: &Array2<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shapes(
            context,
            &[a.dim().0, a.dim().1],
            &[b.dim().0, b.dim().1],
        ));
    }
    Ok(())
}

/// Mean squared difference accumulated in double precision.
fn mse<F: Real>(a: &Array2<F>, b: &Array2<F>) -> f64 {
    let mut acc = 0.0f64;
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = Real::to_f64(x) - Real::to_f64(y);
        acc += d * d;
    });
    acc / a.len() as f64
}

/// Weighted reconstruction loss against the clean label.
pub fn loss_d1<F: Real>(
    sched: &NoiseSchedule,
    y0: &Array2<F>,
    y0_hat: &Array2<F>,
    t: usize,
    w: &LossWeights,
) -> Result<f64> {
    check_same_shape("loss_d1: y0 vs y0_hat", y0, y0_hat)?;
    Ok(weight_d1(sched, t, w)? * mse(y0, y0_hat))
}

/// Weighted noise-matching loss.
pub fn loss_d2<F: Real>(
    sched: &NoiseSchedule,
    eps: &Array2<F>,
    eps_hat: &Array2<F>,
    t: usize,
    w: &LossWeights,
) -> Result<f64> {
    check_same_shape("loss_d2: eps vs eps_hat", eps, eps_hat)?;
    Ok(weight_d2(sched, t, w)? * mse(eps, eps_hat))
}

/// Proximity loss between the true and predicted noisy labels.
pub fn loss_p<F: Real>(y_t: &Array2<F>, y_hat_t: &Array2<F>) -> Result<f64> {
    check_same_shape("loss_p: y_t vs y_hat_t", y_t, y_hat_t)?;
    Ok(mse(y_t, y_hat_t))
}

/// Soft dice loss `1 - (2 sum(p g) + s) / (sum p + sum g + s)`.
pub fn dice_loss<F: Real>(prob: &Array2<F>, mask: &Array2<F>, smooth: f64) -> Result<f64> {
    check_same_shape("dice_loss: prob vs mask", prob, mask)?;
    if prob
        .iter()
        .any(|&p| !(0.0..=1.0).contains(&Real::to_f64(p)))
    {
        return Err(Error::InvalidData(
            "dice probabilities must lie in [0, 1]".into(),
        ));
    }
    let mut inter = 0.0f64;
    let mut p_sum = 0.0f64;
    let mut g_sum = 0.0f64;
    Zip::from(prob).and(mask).for_each(|&p, &g| {
        let (p, g) = (Real::to_f64(p), Real::to_f64(g));
        inter += p * g;
        p_sum += p;
        g_sum += g;
    });
    Ok(1.0 - (2.0 * inter + smooth) / (p_sum + g_sum + smooth))
}

/// Ground truth and network outputs entering one composite evaluation.
pub struct CompositeInputs<'a, F: Real> {
    /// Clean encoded label (positive = foreground).
    pub y0: &'a Array2<F>,
    /// Diffused label from the shared-noise forward process.
    pub y_t: &'a Array2<F>,
    /// The shared noise drawn for this step.
    pub eps: &'a Array2<F>,
    /// Noise-head output.
    pub eps_hat: &'a Array2<F>,
    /// Label-head output.
    pub y_hat_t: &'a Array2<F>,
}

/// Composite objective with closed-form cotangents for both network
/// outputs: returns `(breakdown, d total/d eps_hat, d total/d y_hat_t)`.
pub fn composite_with_grads<F: Real>(
    sched: &NoiseSchedule,
    inp: &CompositeInputs<'_, F>,
    t: usize,
    w: &LossWeights,
) -> Result<(LossBreakdown, Array2<F>, Array2<F>)> {
    sched.check_t(t, 1)?;
    check_same_shape("composite: y0 vs y_t", inp.y0, inp.y_t)?;
    check_same_shape("composite: y0 vs eps", inp.y0, inp.eps)?;
    check_same_shape("composite: y0 vs eps_hat", inp.y0, inp.eps_hat)?;
    check_same_shape("composite: y0 vs y_hat_t", inp.y0, inp.y_hat_t)?;

    let n = inp.y0.len() as f64;
    let p2 = p2_weight(sched, t, w)?;
    let wd1 = weight_d1(sched, t, w)?;
    let wd2 = weight_d2(sched, t, w)?;
    // Rebuilt-label coefficients: y0_hat = c1 * y_hat_t - c2 * eps_hat.
    let c1 = 1.0 / sched.alpha_bar(t).sqrt();
    let c2 = (sched.gamma(t) / sched.alpha_bar(t)).sqrt();

    let y0_hat = reconstruct_origin(sched, inp.y_hat_t, inp.eps_hat, t)?;

    // Scalar terms.
    let d1_val = wd1 * mse(inp.y0, &y0_hat);
    let (l_d1, l_d0) = if t == 1 { (0.0, d1_val) } else { (d1_val, 0.0) };
    let l_d2 = wd2 * mse(inp.eps, inp.eps_hat);
    let p_active = t <= w.t_p;
    let l_p = if p_active { mse(inp.y_t, inp.y_hat_t) } else { 0.0 };

    let prob = y0_hat.mapv(sigmoid);
    let mask = inp.y0.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
    let mut inter = 0.0f64;
    let mut p_sum = 0.0f64;
    let mut g_sum = 0.0f64;
    Zip::from(&prob).and(&mask).for_each(|&p, &g| {
        let (p, g) = (Real::to_f64(p), Real::to_f64(g));
        inter += p * g;
        p_sum += p;
        g_sum += g;
    });
    let dice_num = 2.0 * inter + w.dice_smooth;
    let dice_den = p_sum + g_sum + w.dice_smooth;
    let l_dice = 1.0 - dice_num / dice_den;

    let total = p2 * (l_d1 + l_d2) + w.lambda_p * l_p + l_d0 + w.lambda_dice * l_dice;

    // Cotangent of the rebuilt label: reconstruction term plus dice chain.
    // The t = 1 instance enters the total unreweighted (it is l_d0).
    let d1_outer = if t == 1 { wd1 } else { p2 * wd1 };
    let two_over_n = 2.0 / n;
    let mut g_y0_hat = Array2::<F>::zeros(inp.y0.raw_dim());
    Zip::from(&mut g_y0_hat)
        .and(&y0_hat)
        .and(inp.y0)
        .and(&prob)
        .and(&mask)
        .for_each(|slot, &yh, &y, &p, &g| {
            let diff = Real::to_f64(yh) - Real::to_f64(y);
            let mut acc = d1_outer * two_over_n * diff;
            let (pf, gf) = (Real::to_f64(p), Real::to_f64(g));
            let d_dice_dp = -(2.0 * gf * dice_den - dice_num) / (dice_den * dice_den);
            acc += w.lambda_dice * d_dice_dp * pf * (1.0 - pf);
            *slot = F::from_f64(acc);
        });

    // Map back through y0_hat = c1 * y_hat_t - c2 * eps_hat and add the
    // direct terms on each head.
    let c1f = F::from_f64(c1);
    let c2f = F::from_f64(c2);
    let mut d_eps_hat = Array2::<F>::zeros(inp.y0.raw_dim());
    Zip::from(&mut d_eps_hat)
        .and(&g_y0_hat)
        .and(inp.eps_hat)
        .and(inp.eps)
        .for_each(|slot, &gy, &eh, &e| {
            let noise_term =
                p2 * wd2 * two_over_n * (Real::to_f64(eh) - Real::to_f64(e));
            *slot = F::from_f64(noise_term) - c2f * gy;
        });
    let mut d_y_hat_t = Array2::<F>::zeros(inp.y0.raw_dim());
    Zip::from(&mut d_y_hat_t)
        .and(&g_y0_hat)
        .and(inp.y_hat_t)
        .and(inp.y_t)
        .for_each(|slot, &gy, &yh, &y| {
            let prox = if p_active {
                w.lambda_p * two_over_n * (Real::to_f64(yh) - Real::to_f64(y))
            } else {
                0.0
            };
            *slot = F::from_f64(prox) + c1f * gy;
        });

    Ok((
        LossBreakdown {
            l_d1,
            l_d2,
            l_p,
            l_d0,
            l_dice,
            total,
        },
        d_eps_hat,
        d_y_hat_t,
    ))
}

/// Composite objective without gradients.
pub fn composite<F: Real>(
    sched: &NoiseSchedule,
    inp: &CompositeInputs<'_, F>,
    t: usize,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    composite_with_grads(sched, inp, t, w).map(|(b, _, _)| b)
}
