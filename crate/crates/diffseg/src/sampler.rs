//! Reverse-time label inference.
//!
//! Four estimators turn a clean image into a lesion probability map or
//! mask: the label head read directly at time zero ([`Sampler::infer_avg`]),
//! a salience-weighted average of single-shot reconstructions over a time
//! window ([`Sampler::infer_salient`]), the truncated reverse Markov chain
//! repeated and averaged ([`Sampler::infer_markov`]), and the union of the
//! three thresholded masks ([`Sampler::infer_union`]).  All randomness
//! comes from counter-based streams keyed by the config seed, so every
//! mode is reproducible and repeats can run in any order.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::{despeckle, Denoiser};
use crate::diffusion::{diffuse, reconstruct_origin};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, Domain};
use crate::schedule::NoiseSchedule;

/// Knobs of the reverse-time estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Start time of the truncated reverse chain (`0 < t_start <= T`).
    pub t_start: usize,
    /// Damping of the label chain's fresh-noise term, in `[0, 1)`;
    /// zero makes the label chain deterministic given the image chain.
    pub damping: f64,
    /// Salience exponent (`> 1`): window weight `1 - (t / t_start)^nu`.
    pub nu: f64,
    /// Repeats of the salience-window accumulation.
    pub n_salient: usize,
    /// Independent reverse chains averaged by the Markov mode.
    pub n_infer: usize,
    /// Binarization threshold on probability maps, in `(0, 1)`.
    pub threshold: f64,
    /// Seed for every noise stream the estimators draw.
    pub seed: u64,
}

impl InferenceConfig {
    /// Defaults for a schedule with `t_steps` steps: start at `T/2`,
    /// damping 0.5, exponent 2, 100/50 repeats, threshold 0.5.
    pub fn defaults_for(t_steps: usize) -> Self {
        Self {
            t_start: (t_steps / 2).max(1),
            damping: 0.5,
            nu: 2.0,
            n_salient: 100,
            n_infer: 50,
            threshold: 0.5,
            seed: 0,
        }
    }

    /// Check ranges against a schedule of `t_steps` steps.
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.t_start == 0 || self.t_start > t_steps {
            return Err(Error::TimestepOutOfRange {
                t: self.t_start,
                min: 1,
                max: t_steps,
            });
        }
        if !self.damping.is_finite() || !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidConfig(format!(
                "damping {} outside [0, 1)",
                self.damping
            )));
        }
        if !self.nu.is_finite() || self.nu <= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "salience exponent {} must be > 1",
                self.nu
            )));
        }
        if self.n_salient == 0 || self.n_infer == 0 {
            return Err(Error::InvalidConfig(
                "repeat counts must be >= 1".into(),
            ));
        }
        if !self.threshold.is_finite() || !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    /// Label head at time zero.
    Avg,
    /// Salience-weighted window average.
    Salient,
    /// Repeated reverse-chain average.
    Markov,
    /// Union of the three thresholded modes.
    Union,
}

impl InferMode {
    /// All modes, in reporting order.
    pub const ALL: [InferMode; 4] = [
        InferMode::Avg,
        InferMode::Salient,
        InferMode::Markov,
        InferMode::Union,
    ];

    /// Short command-line name.
    pub fn name(self) -> &'static str {
        match self {
            InferMode::Avg => "avg",
            InferMode::Salient => "sal",
            InferMode::Markov => "infer",
            InferMode::Union => "all",
        }
    }
}

impl std::fmt::Display for InferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(InferMode::Avg),
            "sal" => Ok(InferMode::Salient),
            "infer" => Ok(InferMode::Markov),
            "all" => Ok(InferMode::Union),
            other => Err(Error::InvalidConfig(format!(
                "unknown inference mode {other:?} (expected avg, sal, infer, or all)"
            ))),
        }
    }
}

/// Isolated-pixel filter settings applied after binarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DespeckleParams {
    /// Odd window side length.
    pub kernel: usize,
    /// Minimum positive count inside the window for a pixel to survive.
    pub threshold: f64,
}

impl Default for DespeckleParams {
    fn default() -> Self {
        Self {
            kernel: 3,
            threshold: 2.0,
        }
    }
}

/// Salience weight of window position `t`: `1 - (t / t_start)^nu`.
///
/// Equals 1 at `t = 0`, 0 at `t = t_start`, and decreases strictly in
/// between for `nu > 1`.
pub fn salience_weight(t: usize, t_start: usize, nu: f64) -> f64 {
    1.0 - (t as f64 / t_start as f64).powf(nu)
}

/// Map a label-scale array (`-1` background, `+1` foreground) to a
/// probability map, clamped to `[0, 1]`.
pub fn label_to_probability<F: Real>(label_scale: &Array2<F>) -> Array2<F> {
    let half = F::from_f64(0.5);
    let one = F::from_f64(1.0);
    let zero = F::zero();
    label_scale.mapv(|v| {
        let p = (v + one) * half;
        if p < zero {
            zero
        } else if p > one {
            one
        } else {
            p
        }
    })
}

/// Binarize a probability map at `tau` (positive iff `value >= tau`),
/// optionally removing isolated positives afterwards.
pub fn threshold_mask<F: Real>(
    map: &Array2<F>,
    tau: f64,
    despeckle_params: Option<&DespeckleParams>,
) -> Result<Array2<bool>> {
    let mask = map.mapv(|v| Real::to_f64(v) >= tau);
    match despeckle_params {
        None => Ok(mask),
        Some(dp) => despeckle_mask(&mask, dp),
    }
}

/// Remove isolated positives from a binary mask.
pub fn despeckle_mask(mask: &Array2<bool>, dp: &DespeckleParams) -> Result<Array2<bool>> {
    let as_map = mask.mapv(|m| if m { 1.0f64 } else { 0.0 });
    let cleaned = despeckle(&as_map, dp.kernel, dp.threshold)?;
    Ok(cleaned.mapv(|v| v >= 0.5))
}

/// Pixelwise OR of equally shaped masks.
pub fn union_masks(masks: &[&Array2<bool>]) -> Result<Array2<bool>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidConfig("union of zero masks".into()))?;
    let mut out = (*first).clone();
    for m in &masks[1..] {
        if m.dim() != out.dim() {
            return Err(Error::shapes(
                "union: mask shapes",
                &[out.dim().0, out.dim().1],
                &[m.dim().0, m.dim().1],
            ));
        }
        Zip::from(&mut out).and(*m).for_each(|o, &v| *o = *o || v);
    }
    Ok(out)
}

/// A trained model plus its schedule, ready to run the estimators.
pub struct Sampler<'a, F: Real> {
    denoiser: &'a Denoiser,
    params: &'a [F],
    sched: &'a NoiseSchedule,
}

impl<'a, F: Real> Sampler<'a, F> {
    /// Borrow a model; rejects a parameter vector of the wrong length.
    pub fn new(
        denoiser: &'a Denoiser,
        params: &'a [F],
        sched: &'a NoiseSchedule,
    ) -> Result<Self> {
        if params.len() != denoiser.param_count() {
            return Err(Error::shapes(
                "sampler params",
                &[params.len()],
                &[denoiser.param_count()],
            ));
        }
        Ok(Self {
            denoiser,
            params,
            sched,
        })
    }

    fn check_image(&self, x0: &Array2<F>) -> Result<()> {
        let (h, w) = self.denoiser.config().input_size;
        if x0.dim() != (h, w) {
            return Err(Error::shapes(
                "sampler input image",
                &[x0.dim().0, x0.dim().1],
                &[h, w],
            ));
        }
        Ok(())
    }

    /// The truncated reverse chain in label scale (`-1`/`+1` range).
    ///
    /// `chain` keys the noise streams so independent repeats can be
    /// addressed directly; the public entry point fixes it to 0.
    fn il_chain_label(
        &self,
        x0: &Array2<F>,
        cfg: &InferenceConfig,
        chain: u64,
    ) -> Result<Array2<F>> {
        self.check_image(x0)?;
        cfg.validate(self.sched.t_steps())?;
        let (h, w) = x0.dim();
        let t_start = cfg.t_start;
        let draw = |item: u64| {
            rng::normal_array::<F>(&mut rng::stream(cfg.seed, Domain::ChainNoise, chain, item), h, w)
        };

        // Start of the chain: diffuse the clean image to t_start, then read
        // both heads once — the label head seeds the label chain, the noise
        // head seeds the running noise estimate.
        let mut x_t = diffuse(self.sched, x0, t_start, &draw(0))?;
        let (mut eps_hat, mut y_t) = self.denoiser.forward(self.params, &x_t, t_start)?;

        for t in (2..=t_start).rev() {
            let x0_hat = reconstruct_origin(self.sched, &x_t, &eps_hat, t)?;
            let y0_hat = reconstruct_origin(self.sched, &y_t, &eps_hat, t)?;
            let eps = draw(t as u64);
            // One transition of the reverse chain.  The fresh-noise term
            // carries the full posterior variance coefficient
            // beta_t * gamma_{t-1} / gamma_t; the label line reuses the
            // same draw scaled by the damping factor, which keeps the two
            // chains synchronized while quieting the label line.
            let c_sig = F::from_f64(self.sched.alpha_bar(t - 1).sqrt());
            let c_eps = F::from_f64(
                self.sched.alpha(t).sqrt() * self.sched.gamma(t - 1)
                    / self.sched.gamma(t).sqrt(),
            );
            let c_noise = F::from_f64(
                self.sched.beta(t) * self.sched.gamma(t - 1) / self.sched.gamma(t),
            );
            let c_noise_y = c_noise * F::from_f64(cfg.damping);

            let mut x_prev = Array2::zeros((h, w));
            Zip::from(&mut x_prev)
                .and(&x0_hat)
                .and(&eps_hat)
                .and(&eps)
                .for_each(|o, &x0v, &ev, &nv| *o = c_sig * x0v + c_eps * ev + c_noise * nv);
            let mut y_prev = Array2::zeros((h, w));
            Zip::from(&mut y_prev)
                .and(&y0_hat)
                .and(&eps_hat)
                .and(&eps)
                .for_each(|o, &y0v, &ev, &nv| *o = c_sig * y0v + c_eps * ev + c_noise_y * nv);
            x_t = x_prev;
            y_t = y_prev;
            // Re-estimate the noise from the new image-chain state; the
            // label head is not consulted again inside the chain.
            let (eps_next, _) = self.denoiser.forward(self.params, &x_t, t - 1)?;
            eps_hat = eps_next;
        }

        // Final step from t = 1: the general transition collapses because
        // the cumulative signal at time 0 is exactly 1 and its noise
        // variance exactly 0, leaving the reconstruction alone.
        let y0_hat = reconstruct_origin(self.sched, &y_t, &eps_hat, 1)?;
        let c_sig = F::from_f64(self.sched.alpha_bar(0).sqrt());
        let c_eps = F::from_f64(
            self.sched.alpha(1).sqrt() * self.sched.gamma(0) / self.sched.gamma(1).sqrt(),
        );
        let mut out = Array2::zeros((h, w));
        Zip::from(&mut out)
            .and(&y0_hat)
            .and(&eps_hat)
            .for_each(|o, &yv, &ev| *o = c_sig * yv + c_eps * ev);
        Ok(out)
    }

    /// One run of the truncated reverse chain, as a probability map.
    pub fn il_chain(&self, x0: &Array2<F>, cfg: &InferenceConfig) -> Result<Array2<F>> {
        Ok(label_to_probability(&self.il_chain_label(x0, cfg, 0)?))
    }

    /// Direct estimate: the label head at `(x0, t = 0)`, mapped to `[0, 1]`.
    pub fn infer_avg(&self, x0: &Array2<F>) -> Result<Array2<F>> {
        self.check_image(x0)?;
        let (_, y_hat) = self.denoiser.forward(self.params, x0, 0)?;
        Ok(label_to_probability(&y_hat))
    }

    /// Salience-weighted window estimate.
    ///
    /// Each repeat accumulates, over `t = 0..t_start`, the label origin
    /// reconstructed from a fresh single-shot diffusion of `x0`, weighted
    /// by [`salience_weight`]; the `t = 0` term is the label head read on
    /// the clean image.  The weighted sum is normalized by the full window
    /// weight mass (the `t = t_start` term has weight exactly 0 and is
    /// skipped), repeats are averaged in fixed order, and the label-scale
    /// mean is mapped to `[0, 1]` once at the end.
    pub fn infer_salient(&self, x0: &Array2<F>, cfg: &InferenceConfig) -> Result<Array2<F>> {
        self.check_image(x0)?;
        cfg.validate(self.sched.t_steps())?;
        let (h, w) = x0.dim();
        let t_start = cfg.t_start;
        let weight_mass: f64 = (0..=t_start)
            .map(|t| salience_weight(t, t_start, cfg.nu))
            .sum();
        let mut acc = Array2::<f64>::zeros((h, w));
        for repeat in 0..cfg.n_salient {
            for t in 0..t_start {
                let psi = salience_weight(t, t_start, cfg.nu);
                let y0_hat = if t == 0 {
                    let (_, y_hat) = self.denoiser.forward(self.params, x0, 0)?;
                    y_hat
                } else {
                    let eps = rng::normal_array::<F>(
                        &mut rng::stream(cfg.seed, Domain::SalientNoise, repeat as u64, t as u64),
                        h,
                        w,
                    );
                    let x_t = diffuse(self.sched, x0, t, &eps)?;
                    let (eps_hat, y_hat) = self.denoiser.forward(self.params, &x_t, t)?;
                    reconstruct_origin(self.sched, &y_hat, &eps_hat, t)?
                };
                Zip::from(&mut acc)
                    .and(&y0_hat)
                    .for_each(|a, &v| *a += psi * Real::to_f64(v));
            }
        }
        let norm = 1.0 / (cfg.n_salient as f64 * weight_mass);
        let mean = acc.mapv(|v| F::from_f64(v * norm));
        Ok(label_to_probability(&mean))
    }

    /// Markov-chain estimate: the mean of `n_infer` independent chain
    /// runs, averaged in fixed repeat order.
    pub fn infer_markov(&self, x0: &Array2<F>, cfg: &InferenceConfig) -> Result<Array2<F>> {
        self.check_image(x0)?;
        cfg.validate(self.sched.t_steps())?;
        let (h, w) = x0.dim();
        let mut acc = Array2::<f64>::zeros((h, w));
        for repeat in 0..cfg.n_infer {
            let prob = label_to_probability(&self.il_chain_label(x0, cfg, repeat as u64)?);
            Zip::from(&mut acc)
                .and(&prob)
                .for_each(|a, &v| *a += Real::to_f64(v));
        }
        let inv = 1.0 / cfg.n_infer as f64;
        Ok(acc.mapv(|v| F::from_f64(v * inv)))
    }

    /// Union estimate: pixelwise OR of the three thresholded modes, then
    /// one despeckle pass (when configured).
    pub fn infer_union(
        &self,
        x0: &Array2<F>,
        cfg: &InferenceConfig,
        dp: Option<&DespeckleParams>,
    ) -> Result<Array2<bool>> {
        let avg = threshold_mask(&self.infer_avg(x0)?, cfg.threshold, None)?;
        let sal = threshold_mask(&self.infer_salient(x0, cfg)?, cfg.threshold, None)?;
        let mark = threshold_mask(&self.infer_markov(x0, cfg)?, cfg.threshold, None)?;
        let all = union_masks(&[&avg, &sal, &mark])?;
        match dp {
            None => Ok(all),
            Some(dp) => despeckle_mask(&all, dp),
        }
    }

    /// Run one mode end to end: the soft probability map (absent for the
    /// union mode, which is defined directly on masks) plus the final
    /// binary mask after thresholding and optional despeckling.
    pub fn infer_mode(
        &self,
        mode: InferMode,
        x0: &Array2<F>,
        cfg: &InferenceConfig,
        dp: Option<&DespeckleParams>,
    ) -> Result<(Option<Array2<F>>, Array2<bool>)> {
        let prob = match mode {
            InferMode::Avg => self.infer_avg(x0)?,
            InferMode::Salient => self.infer_salient(x0, cfg)?,
            InferMode::Markov => self.infer_markov(x0, cfg)?,
            InferMode::Union => {
                let mask = self.infer_union(x0, cfg, dp)?;
                return Ok((None, mask));
            }
        };
        let mask = threshold_mask(&prob, cfg.threshold, dp)?;
        Ok((Some(prob), mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::ScheduleSpec;
    use rand::Rng;
    use std::collections::BTreeSet;

    struct Fixture {
        denoiser: Denoiser,
        params: Vec<f64>,
        sched: NoiseSchedule,
    }

    impl Fixture {
        fn new(seed: u64, t_steps: usize) -> Self {
            let denoiser = Denoiser::new(DenoiserConfig {
                input_size: (8, 8),
                base_channels: 2,
                depth: 1,
                time_embed_dim: 4,
                attention_at: BTreeSet::new(),
            })
            .unwrap();
            let params = denoiser.init_params::<f64>(seed).data;
            let sched = NoiseSchedule::build_sigmoid(ScheduleSpec::with_steps(t_steps)).unwrap();
            Self {
                denoiser,
                params,
                sched,
            }
        }

        fn sampler(&self) -> Sampler<'_, f64> {
            Sampler::new(&self.denoiser, &self.params, &self.sched).unwrap()
        }

        fn image(&self, seed: u64) -> Array2<f64> {
            rng::normal_array(&mut rng::stream(seed, Domain::DataGen, 0, 7), 8, 8)
                .mapv(|v: f64| 0.4 * v.tanh())
        }
    }

    fn config(t_start: usize) -> InferenceConfig {
        InferenceConfig {
            t_start,
            damping: 0.5,
            nu: 2.0,
            n_salient: 2,
            n_infer: 2,
            threshold: 0.5,
            seed: 31,
        }
    }

    #[test]
    fn config_validation_enforces_ranges() {
        let mut cfg = InferenceConfig::defaults_for(10);
        cfg.validate(10).unwrap();
        assert_eq!(cfg.t_start, 5);
        cfg.t_start = 0;
        assert!(cfg.validate(10).is_err());
        cfg.t_start = 11;
        assert!(cfg.validate(10).is_err());
        cfg = InferenceConfig::defaults_for(10);
        cfg.damping = 1.0;
        assert!(cfg.validate(10).is_err());
        cfg = InferenceConfig::defaults_for(10);
        cfg.damping = 0.0;
        cfg.validate(10).unwrap();
        cfg.nu = 1.0;
        assert!(cfg.validate(10).is_err());
        cfg = InferenceConfig::defaults_for(10);
        cfg.threshold = 0.0;
        assert!(cfg.validate(10).is_err());
        cfg = InferenceConfig::defaults_for(10);
        cfg.n_infer = 0;
        assert!(cfg.validate(10).is_err());
    }

    #[test]
    fn salience_weights_hit_endpoints_and_decrease() {
        for nu in [1.5, 2.0, 8.0] {
            assert_eq!(salience_weight(0, 6, nu), 1.0);
            assert_eq!(salience_weight(6, 6, nu), 0.0);
            let mut prev = f64::INFINITY;
            for t in 0..=6 {
                let w = salience_weight(t, 6, nu);
                assert!((0.0..=1.0).contains(&w));
                assert!(w < prev || t == 0);
                prev = w;
            }
        }
        // Large exponents recover a flat window below t_start.
        for t in 0..6 {
            assert!((salience_weight(t, 6, 1e9) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_extremes_and_elementwise_oracle() {
        let mut rng = rng::stream(8, Domain::CaseSeed, 0, 0);
        let map = rng::normal_array::<f64>(&mut rng, 6, 6).mapv(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0));
        assert!(threshold_mask(&map, 0.0, None)
            .unwrap()
            .iter()
            .all(|&m| m));
        assert!(threshold_mask(&map, 1.1, None)
            .unwrap()
            .iter()
            .all(|&m| !m));
        let at_half = threshold_mask(&map, 0.5, None).unwrap();
        for (idx, &v) in map.indexed_iter() {
            assert_eq!(at_half[idx], v >= 0.5);
        }
        // Idempotent on a binary map.
        let binary = at_half.mapv(|m| if m { 1.0f64 } else { 0.0 });
        assert_eq!(threshold_mask(&binary, 0.5, None).unwrap(), at_half);
    }

    #[test]
    fn union_matches_pixelwise_or_oracle_and_is_monotone() {
        let mut rng = rng::stream(9, Domain::CaseSeed, 1, 0);
        let masks: Vec<Array2<bool>> = (0..3)
            .map(|_| Array2::from_shape_fn((7, 5), |_| rng.random::<f64>() < 0.4))
            .collect();
        let refs: Vec<&Array2<bool>> = masks.iter().collect();
        let union = union_masks(&refs).unwrap();
        for idx in ndarray::indices((7, 5)) {
            let expect = masks.iter().any(|m| m[(idx.0, idx.1)]);
            assert_eq!(union[(idx.0, idx.1)], expect);
            for m in &masks {
                assert!(!m[(idx.0, idx.1)] || union[(idx.0, idx.1)]);
            }
        }
        let same = union_masks(&[&masks[0], &masks[0], &masks[0]]).unwrap();
        assert_eq!(same, masks[0]);
    }

    #[test]
    fn chain_is_reproducible_and_shaped() {
        let fx = Fixture::new(5, 6);
        let sampler = fx.sampler();
        let x0 = fx.image(1);
        let cfg = config(4);
        let a = sampler.il_chain(&x0, &cfg).unwrap();
        let b = sampler.il_chain(&x0, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (8, 8));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn final_step_returns_the_reconstruction_exactly() {
        // The last transition's noise-estimate coefficient carries a factor
        // of the time-0 cumulative noise variance, which is exactly zero,
        // so the chain output must equal the t = 1 reconstruction bitwise.
        let fx = Fixture::new(6, 6);
        let sampler = fx.sampler();
        let x0 = fx.image(2);
        let cfg = config(1);
        let out = sampler.il_chain_label(&x0, &cfg, 0).unwrap();
        // Hand trace for t_start = 1: one diffusion, one forward, one
        // reconstruction, no loop iterations.
        let eps0 = rng::normal_array::<f64>(&mut rng::stream(cfg.seed, Domain::ChainNoise, 0, 0), 8, 8);
        let x1 = diffuse(&fx.sched, &x0, 1, &eps0).unwrap();
        let (eps_hat, y_hat) = fx.denoiser.forward(&fx.params, &x1, 1).unwrap();
        let expect = reconstruct_origin(&fx.sched, &y_hat, &eps_hat, 1).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn undamped_label_chain_is_a_function_of_the_image_chain() {
        // With damping 0 the label line never sees the fresh draws: replay
        // the image chain from the same streams, rebuild the label chain
        // with NO noise term at all, and demand bitwise agreement.
        let fx = Fixture::new(7, 8);
        let sampler = fx.sampler();
        let x0 = fx.image(3);
        let mut cfg = config(5);
        cfg.damping = 0.0;
        let out = sampler.il_chain_label(&x0, &cfg, 0).unwrap();

        let draw = |item: u64| {
            rng::normal_array::<f64>(&mut rng::stream(cfg.seed, Domain::ChainNoise, 0, item), 8, 8)
        };
        let mut x_t = diffuse(&fx.sched, &x0, 5, &draw(0)).unwrap();
        let (mut eps_hat, mut y_t) = fx.denoiser.forward(&fx.params, &x_t, 5).unwrap();
        for t in (2..=5usize).rev() {
            let x0_hat = reconstruct_origin(&fx.sched, &x_t, &eps_hat, t).unwrap();
            let y0_hat = reconstruct_origin(&fx.sched, &y_t, &eps_hat, t).unwrap();
            let eps = draw(t as u64);
            let c_sig = fx.sched.alpha_bar(t - 1).sqrt();
            let c_eps = fx.sched.alpha(t).sqrt() * fx.sched.gamma(t - 1) / fx.sched.gamma(t).sqrt();
            let c_noise = fx.sched.beta(t) * fx.sched.gamma(t - 1) / fx.sched.gamma(t);
            let mut x_prev = Array2::zeros((8, 8));
            Zip::from(&mut x_prev)
                .and(&x0_hat)
                .and(&eps_hat)
                .and(&eps)
                .for_each(|o, &a, &e, &n| *o = c_sig * a + c_eps * e + c_noise * n);
            // Label line: deterministic in the noise-estimate sequence.
            let mut y_prev = Array2::zeros((8, 8));
            Zip::from(&mut y_prev)
                .and(&y0_hat)
                .and(&eps_hat)
                .for_each(|o, &a, &e| *o = c_sig * a + c_eps * e + 0.0 * 1.0);
            x_t = x_prev;
            y_t = y_prev;
            eps_hat = fx.denoiser.forward(&fx.params, &x_t, t - 1).unwrap().0;
        }
        let expect = reconstruct_origin(&fx.sched, &y_t, &eps_hat, 1).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn direct_mode_is_deterministic_and_midpoint_at_zero_head() {
        let fx = Fixture::new(9, 6);
        let sampler = fx.sampler();
        let x0 = fx.image(4);
        let a = sampler.infer_avg(&x0).unwrap();
        let b = sampler.infer_avg(&x0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (8, 8));
        // Freshly initialized output heads are zero maps, so the direct
        // mode reads the encoding midpoint everywhere.
        assert!(a.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn salient_mode_matches_a_hand_unrolled_accumulation() {
        let fx = Fixture::new(11, 8);
        let sampler = fx.sampler();
        let x0 = fx.image(5);
        let mut cfg = config(4);
        cfg.n_salient = 2;
        let got = sampler.infer_salient(&x0, &cfg).unwrap();

        let mass: f64 = (0..=4).map(|t| salience_weight(t, 4, cfg.nu)).sum();
        let mut acc = Array2::<f64>::zeros((8, 8));
        for repeat in 0..2u64 {
            for t in 0..4usize {
                let psi = salience_weight(t, 4, cfg.nu);
                let est = if t == 0 {
                    fx.denoiser.forward(&fx.params, &x0, 0).unwrap().1
                } else {
                    let eps = rng::normal_array::<f64>(
                        &mut rng::stream(cfg.seed, Domain::SalientNoise, repeat, t as u64),
                        8,
                        8,
                    );
                    let x_t = diffuse(&fx.sched, &x0, t, &eps).unwrap();
                    let (eps_hat, y_hat) = fx.denoiser.forward(&fx.params, &x_t, t).unwrap();
                    reconstruct_origin(&fx.sched, &y_hat, &eps_hat, t).unwrap()
                };
                Zip::from(&mut acc).and(&est).for_each(|a, &v| *a += psi * v);
            }
        }
        let expect = label_to_probability(&acc.mapv(|v| v / (2.0 * mass)));
        assert_eq!(got, expect);
        assert!(got.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn markov_mode_with_one_repeat_equals_a_single_chain() {
        let fx = Fixture::new(13, 6);
        let sampler = fx.sampler();
        let x0 = fx.image(6);
        let mut cfg = config(3);
        cfg.n_infer = 1;
        let mean = sampler.infer_markov(&x0, &cfg).unwrap();
        let single = sampler.il_chain(&x0, &cfg).unwrap();
        for (a, b) in mean.iter().zip(single.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn markov_mode_is_order_invariant_within_tolerance() {
        // Summing the repeats in reverse must agree with the fixed-order
        // mean to float tolerance (the repeats themselves are identical).
        let fx = Fixture::new(13, 6);
        let sampler = fx.sampler();
        let x0 = fx.image(6);
        let mut cfg = config(3);
        cfg.n_infer = 4;
        let mean = sampler.infer_markov(&x0, &cfg).unwrap();
        let mut acc = Array2::<f64>::zeros((8, 8));
        for repeat in (0..4u64).rev() {
            let prob = label_to_probability(&sampler.il_chain_label(&x0, &cfg, repeat).unwrap());
            Zip::from(&mut acc).and(&prob).for_each(|a, &v| *a += v);
        }
        for (a, b) in mean.iter().zip(acc.iter()) {
            assert!((a - b / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn repeat_averaging_shrinks_variance_like_one_over_n() {
        // Monte Carlo oracle: the variance of a mean of n independent
        // chains is var_single / n.  Estimate the single-chain variance of
        // a scalar summary from 400 chains, then compare the empirical
        // variance of group means at n = 10 and n = 40 against the 1/n
        // prediction within wide Monte Carlo brackets.
        let fx = Fixture::new(17, 4);
        let sampler = fx.sampler();
        let x0 = fx.image(8);
        let cfg = config(2);
        let summaries: Vec<f64> = (0..400u64)
            .map(|chain| {
                let prob = sampler.il_chain_label(&x0, &cfg, chain).unwrap();
                prob.sum() / 64.0
            })
            .collect();
        let mean = summaries.iter().sum::<f64>() / 400.0;
        let var_single =
            summaries.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 399.0;
        assert!(var_single > 0.0);
        for group in [10usize, 40] {
            let k = 400 / group;
            let means: Vec<f64> = (0..k)
                .map(|g| summaries[g * group..(g + 1) * group].iter().sum::<f64>() / group as f64)
                .collect();
            let gm = means.iter().sum::<f64>() / k as f64;
            let var_mean = means.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / (k - 1) as f64;
            let predicted = var_single / group as f64;
            assert!(
                var_mean > predicted / 3.0 && var_mean < predicted * 3.0,
                "group {group}: empirical {var_mean:e} vs predicted {predicted:e}"
            );
        }
    }

    #[test]
    fn union_mode_equals_recomputed_constituents() {
        let fx = Fixture::new(19, 6);
        let sampler = fx.sampler();
        let x0 = fx.image(9);
        let cfg = config(3);
        let dp = DespeckleParams::default();
        let union = sampler.infer_union(&x0, &cfg, Some(&dp)).unwrap();
        let avg = threshold_mask(&sampler.infer_avg(&x0).unwrap(), cfg.threshold, None).unwrap();
        let sal =
            threshold_mask(&sampler.infer_salient(&x0, &cfg).unwrap(), cfg.threshold, None)
                .unwrap();
        let mark =
            threshold_mask(&sampler.infer_markov(&x0, &cfg).unwrap(), cfg.threshold, None)
                .unwrap();
        let expect =
            despeckle_mask(&union_masks(&[&avg, &sal, &mark]).unwrap(), &dp).unwrap();
        assert_eq!(union, expect);
        assert_eq!(union.dim(), (8, 8));
    }

    #[test]
    fn sampler_rejects_bad_models_and_images() {
        let fx = Fixture::new(23, 6);
        assert!(Sampler::new(&fx.denoiser, &fx.params[1..], &fx.sched).is_err());
        let sampler = fx.sampler();
        let wrong = Array2::<f64>::zeros((4, 4));
        assert!(sampler.infer_avg(&wrong).is_err());
        let cfg = config(9);
        assert!(sampler.il_chain(&fx.image(1), &cfg).is_err());
    }
}
