//! Optimization loop: batch assembly, shared-noise draws, Adam updates
//! under a polynomial learning-rate decay, augmentation, checkpointing.
//!
//! Every random decision is keyed by `(seed, iteration, element)` through
//! the crate's counter-based streams, so a run is a pure function of its
//! config and data: two runs agree bitwise, and a run resumed from a
//! checkpoint continues the exact trajectory of the uninterrupted one.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::denoiser::{Denoiser, DenoiserConfig, ParamStore};
use crate::diffusion;
use crate::error::{Error, Result};
use crate::losses::{self, CompositeInputs, LossBreakdown, LossWeights};
use crate::real::Real;
use crate::rng::{self, Domain};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSCK";
/// Checkpoint format version written by this crate.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which augmentations the trainer may apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentFlags {
    /// Mirror left-right (probability 1/2 when enabled).
    pub flip_h: bool,
    /// Mirror top-bottom (probability 1/2 when enabled).
    pub flip_v: bool,
    /// Random quarter-turn; non-square inputs only get half-turns so the
    /// shape never changes.
    pub rotate90: bool,
    /// Additive Gaussian noise, std 0.05, image only.
    pub add_noise: bool,
}

impl AugmentFlags {
    /// Every augmentation enabled.
    pub fn all() -> Self {
        Self {
            flip_h: true,
            flip_v: true,
            rotate90: true,
            add_noise: true,
        }
    }

    /// No augmentation (same as `default()`).
    pub fn none() -> Self {
        Self::default()
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total planned iterations; the learning rate reaches `lr_min` here.
    pub i_max: usize,
    /// Samples per optimization step.
    pub batch_size: usize,
    /// Learning rate at iteration 0.
    pub lr_init: f64,
    /// Learning rate at iteration `i_max`.
    pub lr_min: f64,
    /// Master seed for every stream the trainer draws from.
    pub seed: u64,
    /// Enabled augmentations.
    pub augment: AugmentFlags,
    /// Emit a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            i_max: 2000,
            batch_size: 4,
            lr_init: 1e-4,
            lr_min: 6e-5,
            seed: 0,
            augment: AugmentFlags::all(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Check ranges: `lr_init >= lr_min > 0`, at least one iteration and
    /// one element per batch.
    pub fn validate(&self) -> Result<()> {
        if self.i_max == 0 {
            return Err(Error::InvalidConfig("i_max must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr_init.is_finite() && self.lr_min.is_finite()) {
            return Err(Error::InvalidConfig("learning rates must be finite".into()));
        }
        if !(self.lr_min > 0.0 && self.lr_init >= self.lr_min) {
            return Err(Error::InvalidConfig(format!(
                "need lr_init >= lr_min > 0, got lr_init {} lr_min {}",
                self.lr_init, self.lr_min
            )));
        }
        Ok(())
    }
}

/// Learning rate after `i_c` completed iterations:
/// `lr_init * (1 - i_c/i_max)^0.9 + lr_min * (i_c/i_max)^0.9`.
pub fn lr_at(i_c: usize, cfg: &TrainConfig) -> Result<f64> {
    if i_c > cfg.i_max {
        return Err(Error::InvalidConfig(format!(
            "iteration {i_c} exceeds i_max {}",
            cfg.i_max
        )));
    }
    let x = i_c as f64 / cfg.i_max as f64;
    Ok(cfg.lr_init * (1.0 - x).powf(0.9) + cfg.lr_min * x.powf(0.9))
}

/// Adam moment buffers and hyperparameters, mirroring the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    /// First-moment estimate.
    pub m: Vec<F>,
    /// Second-moment estimate.
    pub v: Vec<F>,
    /// Completed update count (drives bias correction).
    pub step: u64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator stabilizer.
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    /// Fresh zeroed state for `len` parameters.
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// Moment math runs in f64 regardless of the parameter precision so the
/// f32 path keeps well-conditioned bias corrections.
pub fn adam_step<F: Real>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shapes(
            "adam: params vs grads",
            &[params.len()],
            &[grads.len()],
        ));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shapes(
            "adam: params vs moments",
            &[params.len()],
            &[state.m.len(), state.v.len()],
        ));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - b2.powi(state.step.min(i32::MAX as u64) as i32);
    for i in 0..params.len() {
        let g = Real::to_f64(grads[i]);
        let m = b1 * Real::to_f64(state.m[i]) + (1.0 - b1) * g;
        let v = b2 * Real::to_f64(state.v[i]) + (1.0 - b2) * g * g;
        state.m[i] = F::from_f64(m);
        state.v[i] = F::from_f64(v);
        let update = lr * (m / bc1) / ((v / bc2).sqrt() + state.eps);
        params[i] = F::from_f64(Real::to_f64(params[i]) - update);
    }
    Ok(())
}

/// Mirror an array left-right.
pub fn flip_horizontal<F: Real>(a: &Array2<F>) -> Array2<F> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[i, w - 1 - j]])
}

/// Mirror an array top-bottom.
pub fn flip_vertical<F: Real>(a: &Array2<F>) -> Array2<F> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - i, j]])
}

/// Rotate counterclockwise by `quarters` quarter turns.
pub fn rotate_quarter<F: Real>(a: &Array2<F>, quarters: usize) -> Array2<F> {
    let (h, w) = a.dim();
    match quarters % 4 {
        0 => a.clone(),
        1 => Array2::from_shape_fn((w, h), |(i, j)| a[[j, w - 1 - i]]),
        2 => Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - i, w - 1 - j]]),
        _ => Array2::from_shape_fn((w, h), |(i, j)| a[[h - 1 - j, i]]),
    }
}

/// Apply one augmentation draw to an image/label pair.
///
/// Spatial transforms hit both arrays identically, so the pair stays
/// aligned; additive noise perturbs the image alone and may push it
/// slightly outside `[-1, 1]`, which the forward process tolerates.
pub fn augment_pair<F: Real>(
    image: &Array2<F>,
    label: &Array2<F>,
    flags: AugmentFlags,
    rng: &mut impl Rng,
) -> Result<(Array2<F>, Array2<F>)> {
    if image.dim() != label.dim() {
        return Err(Error::shapes(
            "augment: image vs label",
            &[image.dim().0, image.dim().1],
            &[label.dim().0, label.dim().1],
        ));
    }
    let mut img = image.clone();
    let mut lab = label.clone();
    if flags.flip_h && rng.random::<f64>() < 0.5 {
        img = flip_horizontal(&img);
        lab = flip_horizontal(&lab);
    }
    if flags.flip_v && rng.random::<f64>() < 0.5 {
        img = flip_vertical(&img);
        lab = flip_vertical(&lab);
    }
    if flags.rotate90 {
        let (h, w) = img.dim();
        let quarters = if h == w {
            rng.random_range(0..4usize)
        } else {
            2 * rng.random_range(0..2usize)
        };
        if quarters != 0 {
            img = rotate_quarter(&img, quarters);
            lab = rotate_quarter(&lab, quarters);
        }
    }
    if flags.add_noise {
        let std = F::from_f64(0.05);
        for v in img.iter_mut() {
            *v = *v + std * rng::normal::<F>(rng);
        }
    }
    Ok((img, lab))
}

/// Mutable optimization state: parameters, Adam moments, iteration count.
#[derive(Debug, Clone)]
pub struct TrainState<F: Real> {
    /// Network parameters.
    pub params: ParamStore<F>,
    /// Optimizer moments.
    pub adam: AdamState<F>,
    /// Completed iterations.
    pub iteration: u64,
}

/// What one optimization step produced.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Batch-mean loss terms.
    pub breakdown: LossBreakdown,
    /// The timestep drawn for each batch element.
    pub ts: Vec<usize>,
    /// Learning rate the step used.
    pub lr: f64,
}

impl StepReport {
    /// Training-log line for this step; logs the first element's timestep.
    pub fn log_line(&self, step: usize) -> String {
        self.breakdown.log_line(step, self.ts.first().copied().unwrap_or(0))
    }
}

/// The immutable half of a training run: model architecture, schedule,
/// loss weights, and optimization hyperparameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    denoiser: Denoiser,
    sched: NoiseSchedule,
    weights: LossWeights,
    config: TrainConfig,
}

impl Trainer {
    /// Validate and assemble a trainer.
    pub fn new(
        denoiser: Denoiser,
        sched: NoiseSchedule,
        weights: LossWeights,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate(sched.t_steps())?;
        Ok(Self {
            denoiser,
            sched,
            weights,
            config,
        })
    }

    /// Model architecture.
    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    /// Noise schedule.
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Loss weights.
    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Optimization hyperparameters.
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Freshly initialized parameters and optimizer state.
    pub fn init_state<F: Real>(&self) -> TrainState<F> {
        TrainState {
            params: self.denoiser.init_params(self.config.seed),
            adam: AdamState::new(self.denoiser.param_count()),
            iteration: 0,
        }
    }

    /// One optimization step.
    ///
    /// Per batch element: pick a sample, augment it, draw a timestep
    /// uniformly from `{1..T}` and one shared noise field, diffuse the
    /// pair, run the network, and accumulate composite-loss gradients in
    /// element order; then apply a single Adam update at the scheduled
    /// learning rate.  All draws are keyed by `(seed, iteration, element)`.
    pub fn train_step<F: Real>(
        &self,
        state: &mut TrainState<F>,
        data: &[Sample],
    ) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::Dataset("training data is empty".into()));
        }
        let (h, w) = self.denoiser.config().input_size;
        let t_steps = self.sched.t_steps();
        let seed = self.config.seed;
        let iter = state.iteration;
        let lr = lr_at(iter.min(usize::MAX as u64) as usize, &self.config)?;

        let mut grads = self.denoiser.zero_grads::<F>();
        let inv_b = 1.0 / self.config.batch_size as f64;
        let scale = F::from_f64(inv_b);
        let mut mean = LossBreakdown {
            l_d1: 0.0,
            l_d2: 0.0,
            l_p: 0.0,
            l_d0: 0.0,
            l_dice: 0.0,
            total: 0.0,
        };
        let mut ts = Vec::with_capacity(self.config.batch_size);

        for element in 0..self.config.batch_size {
            let e = element as u64;
            let idx =
                rng::stream(seed, Domain::BatchSelect, iter, e).random_range(0..data.len());
            let sample = &data[idx];
            if sample.image.dim() != (h, w) {
                return Err(Error::shapes(
                    format!("train: sample {} vs network input", sample.id),
                    &[sample.image.dim().0, sample.image.dim().1],
                    &[h, w],
                ));
            }
            let (x0, y0) = augment_pair(
                &sample.image_as::<F>(),
                &sample.label_as::<F>(),
                self.config.augment,
                &mut rng::stream(seed, Domain::Augment, iter, e),
            )?;
            let t = rng::stream(seed, Domain::TimeDraw, iter, e).random_range(1..=t_steps);
            let eps =
                rng::normal_array::<F>(&mut rng::stream(seed, Domain::NoiseDraw, iter, e), h, w);
            let pair = diffusion::diffuse_pair(&self.sched, &x0, &y0, t, &eps)?;
            let (eps_hat, y_hat_t, trace) =
                self.denoiser.forward_traced(&state.params.data, &pair.x, t)?;
            let inputs = CompositeInputs {
                y0: &y0,
                y_t: &pair.y,
                eps: &eps,
                eps_hat: &eps_hat,
                y_hat_t: &y_hat_t,
            };
            let (bd, mut d_eps, mut d_y) =
                losses::composite_with_grads(&self.sched, &inputs, t, &self.weights)?;
            d_eps.mapv_inplace(|v| v * scale);
            d_y.mapv_inplace(|v| v * scale);
            self.denoiser
                .grad(&state.params.data, &trace, &d_eps, &d_y, &mut grads)?;
            mean.l_d1 += bd.l_d1 * inv_b;
            mean.l_d2 += bd.l_d2 * inv_b;
            mean.l_p += bd.l_p * inv_b;
            mean.l_d0 += bd.l_d0 * inv_b;
            mean.l_dice += bd.l_dice * inv_b;
            mean.total += bd.total * inv_b;
            ts.push(t);
        }

        adam_step(&mut state.params.data, &grads, &mut state.adam, lr)?;
        state.iteration += 1;
        Ok(StepReport {
            breakdown: mean,
            ts,
            lr,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionDesc {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    #[serde(default)]
    tool_version: String,
    denoiser: DenoiserConfig,
    schedule: ScheduleSpec,
    train: TrainConfig,
    weights: LossWeights,
    iteration: u64,
    adam_step: u64,
    beta1: f64,
    beta2: f64,
    eps_adam: f64,
    dtype: String,
    sections: Vec<SectionDesc>,
}

fn dtype_name<F: Real>() -> &'static str {
    match std::mem::size_of::<F>() {
        4 => "f32",
        8 => "f64",
        _ => "unknown",
    }
}

fn push_scalars<F: Real>(out: &mut Vec<u8>, data: &[F]) {
    if std::mem::size_of::<F>() == 4 {
        for &v in data {
            out.extend_from_slice(&(Real::to_f64(v) as f32).to_le_bytes());
        }
    } else {
        for &v in data {
            out.extend_from_slice(&Real::to_f64(v).to_le_bytes());
        }
    }
}

fn read_scalars<F: Real>(bytes: &[u8], count: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(count);
    if std::mem::size_of::<F>() == 4 {
        for k in 0..count {
            let v = f32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes"));
            out.push(F::from_f64(f64::from(v)));
        }
    } else {
        for k in 0..count {
            let v = f64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().expect("8 bytes"));
            out.push(F::from_f64(v));
        }
    }
    out
}

/// Write a checkpoint: configs, iteration counter, parameters, and both
/// Adam moment buffers, atomically (temp file + rename).
pub fn save_checkpoint<F: Real>(
    path: &Path,
    trainer: &Trainer,
    state: &TrainState<F>,
) -> Result<()> {
    let n = state.params.len();
    let header = CheckpointHeader {
        tool_version: crate::TOOL_VERSION.to_string(),
        denoiser: trainer.denoiser.config().clone(),
        schedule: *trainer.sched.spec(),
        train: trainer.config.clone(),
        weights: trainer.weights.clone(),
        iteration: state.iteration,
        adam_step: state.adam.step,
        beta1: state.adam.beta1,
        beta2: state.adam.beta2,
        eps_adam: state.adam.eps,
        dtype: dtype_name::<F>().to_string(),
        sections: vec![
            SectionDesc {
                name: "params".into(),
                len: n,
            },
            SectionDesc {
                name: "adam_m".into(),
                len: state.adam.m.len(),
            },
            SectionDesc {
                name: "adam_v".into(),
                len: state.adam.v.len(),
            },
        ],
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + 3 * n * std::mem::size_of::<F>());
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    push_scalars(&mut bytes, &state.params.data);
    push_scalars(&mut bytes, &state.adam.m);
    push_scalars(&mut bytes, &state.adam.v);

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    tmp.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path.display().to_string(), e.error))?;
    Ok(())
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint<F: Real> {
    /// Rebuilt model (architecture from the stored config).
    pub denoiser: Denoiser,
    /// Rebuilt schedule.
    pub schedule: NoiseSchedule,
    /// Stored optimization hyperparameters.
    pub train: TrainConfig,
    /// Stored loss weights.
    pub weights: LossWeights,
    /// Restored mutable state.
    pub state: TrainState<F>,
}

impl<F: Real> LoadedCheckpoint<F> {
    /// Reassemble a `Trainer` plus its state, ready to resume.
    pub fn into_trainer_state(self) -> Result<(Trainer, TrainState<F>)> {
        let trainer = Trainer::new(self.denoiser, self.schedule, self.weights, self.train)?;
        Ok((trainer, self.state))
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize)> {
    let corrupt = |msg: String| Error::CheckpointCorrupt(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(corrupt(format!(
            "file of {} bytes is shorter than the fixed header",
            bytes.len()
        )));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    Ok((header, data_start))
}

/// Scalar type stored in a checkpoint ("f32" or "f64"), read from the
/// header alone so callers can pick the matching load path.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (header, _) = parse_header(&bytes, path)?;
    Ok(header.dtype)
}

/// Read a checkpoint back, verifying magic, version, header integrity,
/// section layout, and exact file length before touching any state.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<LoadedCheckpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let corrupt = |msg: String| Error::CheckpointCorrupt(format!("{}: {msg}", path.display()));
    let (header, data_start) = parse_header(&bytes, path)?;
    if header.dtype != dtype_name::<F>() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint stores {} data but {} was requested",
            header.dtype,
            dtype_name::<F>()
        )));
    }
    let denoiser = Denoiser::new(header.denoiser.clone())?;
    let schedule = NoiseSchedule::build_sigmoid(header.schedule)?;
    header.train.validate()?;
    header.weights.validate(schedule.t_steps())?;

    let n = denoiser.param_count();
    let expected_sections = ["params", "adam_m", "adam_v"];
    if header.sections.len() != expected_sections.len() {
        return Err(corrupt(format!(
            "expected {} sections, found {}",
            expected_sections.len(),
            header.sections.len()
        )));
    }
    for (section, name) in header.sections.iter().zip(expected_sections) {
        if section.name != name {
            return Err(corrupt(format!(
                "section {:?} where {name:?} was expected",
                section.name
            )));
        }
        if section.len != n {
            return Err(corrupt(format!(
                "section {name:?} holds {} values but the model has {n} parameters",
                section.len
            )));
        }
    }
    let elem = std::mem::size_of::<F>();
    let expected_len = data_start + 3 * n * elem;
    if bytes.len() != expected_len {
        return Err(corrupt(format!(
            "expected {expected_len} bytes, found {}",
            bytes.len()
        )));
    }
    let section = |k: usize| &bytes[data_start + k * n * elem..data_start + (k + 1) * n * elem];
    let mut params = ParamStore::zeros(denoiser.layout().clone());
    params.load_data(read_scalars::<F>(section(0), n))?;
    let adam = AdamState {
        m: read_scalars::<F>(section(1), n),
        v: read_scalars::<F>(section(2), n),
        step: header.adam_step,
        beta1: header.beta1,
        beta2: header.beta2,
        eps: header.eps_adam,
    };
    Ok(LoadedCheckpoint {
        denoiser,
        schedule,
        train: header.train,
        weights: header.weights,
        state: TrainState {
            params,
            adam,
            iteration: header.iteration,
        },
    })
}
