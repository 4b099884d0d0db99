//! Forward synchronous diffusion and its closed-form inverses.
//!
//! The defining device of the engine: at every step the image and the
//! label encoding are corrupted by the *same* noise draw,
//!
//! ```text
//! x_t = sqrt(alpha_bar[t]) * x0 + sqrt(gamma[t]) * eps
//! y_t = sqrt(alpha_bar[t]) * y0 + sqrt(gamma[t]) * eps
//! ```
//!
//! so their difference stays noise-free and the label posterior collapses
//! to a closed form in `(y0, eps)`.  Noise is always supplied by the
//! caller, which is what makes the sharing mechanical and testable.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::schedule::NoiseSchedule;

/// An image/label pair part-way through the forward process.
#[derive(Debug, Clone)]
pub struct PairState<F: Real> {
    /// Diffused image `x_t`.
    pub x: Array2<F>,
    /// Diffused label encoding `y_t`.
    pub y: Array2<F>,
    /// Timestep the pair sits at.
    pub t: usize,
}

fn check_same_shape<F: Real>(context: &str, a: &Array2<F>, b: &Array2<F>) -> Result<()> {
    if a.dim() != b.dim() {
        let (ah, aw) = a.dim();
        let (bh, bw) = b.dim();
        return Err(Error::shapes(context, &[ah, aw], &[bh, bw]));
    }
    Ok(())
}

/// Diffuse a single array to time `t` with caller-supplied noise.
pub fn diffuse<F: Real>(
    sched: &NoiseSchedule,
    z0: &Array2<F>,
    t: usize,
    eps: &Array2<F>,
) -> Result<Array2<F>> {
    sched.check_t(t, 1)?;
    check_same_shape("diffuse: z0 vs eps", z0, eps)?;
    let c_signal = F::from_f64(sched.alpha_bar(t).sqrt());
    let c_noise = F::from_f64(sched.gamma(t).sqrt());
    let mut out = z0.clone();
    ndarray::Zip::from(&mut out).and(eps).for_each(|z, &e| {
        *z = c_signal * *z + c_noise * e;
    });
    Ok(out)
}

/// Diffuse an image/label pair to time `t` with one shared noise draw.
pub fn diffuse_pair<F: Real>(
    sched: &NoiseSchedule,
    x0: &Array2<F>,
    y0: &Array2<F>,
    t: usize,
    eps: &Array2<F>,
) -> Result<PairState<F>> {
    check_same_shape("diffuse_pair: x0 vs y0", x0, y0)?;
    Ok(PairState {
        x: diffuse(sched, x0, t, eps)?,
        y: diffuse(sched, y0, t, eps)?,
        t,
    })
}

/// Invert the forward step: recover the origin estimate from `(z_t, eps_hat)`.
///
/// Returns `z_t / sqrt(alpha_bar[t]) - sqrt(gamma[t] / alpha_bar[t]) * eps_hat`.
pub fn reconstruct_origin<F: Real>(
    sched: &NoiseSchedule,
    z_t: &Array2<F>,
    eps_hat: &Array2<F>,
    t: usize,
) -> Result<Array2<F>> {
    sched.check_t(t, 1)?;
    check_same_shape("reconstruct_origin: z_t vs eps_hat", z_t, eps_hat)?;
    let alpha_bar = sched.alpha_bar(t);
    let inv_signal = F::from_f64(1.0 / alpha_bar.sqrt());
    let noise_scale = F::from_f64((sched.gamma(t) / alpha_bar).sqrt());
    let mut out = z_t.clone();
    ndarray::Zip::from(&mut out).and(eps_hat).for_each(|z, &e| {
        *z = *z * inv_signal - noise_scale * e;
    });
    Ok(out)
}

/// Draw one sample from the closed-form label posterior at step `t`.
///
/// Returns `c_y0 * y0 + c_eps * eps_t + sqrt(tilde_beta[t]) * zeta` with
/// `zeta` standard normal; at `t = 1` the noise term vanishes exactly.
pub fn posterior_sample<F: Real>(
    sched: &NoiseSchedule,
    y0: &Array2<F>,
    eps_t: &Array2<F>,
    t: usize,
    rng: &mut impl Rng,
) -> Result<Array2<F>> {
    let coeffs = sched.posterior_coeffs(t)?;
    check_same_shape("posterior_sample: y0 vs eps_t", y0, eps_t)?;
    let c_y0 = F::from_f64(coeffs.c_y0);
    let c_eps = F::from_f64(coeffs.c_eps);
    let sd = F::from_f64(coeffs.var.sqrt());
    let mut out = y0.clone();
    ndarray::Zip::from(&mut out).and(eps_t).for_each(|y, &e| {
        *y = c_y0 * *y + c_eps * e + sd * rng::normal::<F>(rng);
    });
    Ok(out)
}
