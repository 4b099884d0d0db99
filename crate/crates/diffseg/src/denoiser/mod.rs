//! Two-stream denoising network.
//!
//! A time-conditioned U-Net maps a noisy image `x_t` to two same-shape
//! outputs through a shared trunk: a noise estimate and a noisy-label
//! estimate, each produced by its own zero-initialized 1x1 head.  The
//! module owns the full gradient engine (reverse-mode, hand-written per
//! layer, deterministic accumulation order) and the despeckling
//! post-layer used on predicted probability maps.
//!
//! Parameters live in one flat buffer described by a named layout, so
//! checkpoints, the optimizer, and the gradient check all address
//! weights the same way.

pub mod despeckle;
mod layers;
pub mod params;
pub mod tensor;

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use despeckle::despeckle;
pub use params::{InitKind, ParamEntry, ParamLayout, ParamStore};
pub use tensor::Tensor3;

use layers::{
    silu, silu_backward, silu_slice, silu_slice_backward, sinusoidal_features, upsample2x,
    upsample2x_backward, AttnBlock, AttnCache, Conv2d, GroupNorm, GroupNormCache, Linear, ResBlock,
    ResBlockCache,
};
use params::LayoutBuilder;

/// Shape and capacity of the denoising network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Expected input size `(height, width)`.
    pub input_size: (usize, usize),
    /// Channel count at full resolution; level `l` uses `base_channels << l`.
    pub base_channels: usize,
    /// Number of downsampling levels (0 keeps everything at full resolution).
    pub depth: usize,
    /// Width of the learned time embedding (even).
    pub time_embed_dim: usize,
    /// Levels that get a self-attention block; `depth` means the bottleneck.
    pub attention_at: BTreeSet<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            input_size: (64, 64),
            base_channels: 16,
            depth: 2,
            time_embed_dim: 64,
            attention_at: BTreeSet::from([2]),
        }
    }
}

impl DenoiserConfig {
    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig("input size must be positive".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "time_embed_dim must be even and at least 2, got {}",
                self.time_embed_dim
            )));
        }
        let div = 1usize << self.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        if let Some(&lvl) = self.attention_at.iter().find(|&&l| l > self.depth) {
            return Err(Error::InvalidConfig(format!(
                "attention level {lvl} exceeds depth {}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Channels at resolution level `l`.
    fn channels_at(&self, l: usize) -> usize {
        self.base_channels << l
    }
}

#[derive(Debug, Clone)]
struct DownStage {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct MidStage {
    res1: ResBlock,
    attn: Option<AttnBlock>,
    res2: ResBlock,
}

#[derive(Debug, Clone)]
struct UpStage {
    conv: Conv2d,
    res: ResBlock,
    attn: Option<AttnBlock>,
}

/// The two-stream U-Net: shared trunk, separate 1x1 output heads.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: Arc<ParamLayout>,
    time_fc1: Linear,
    time_fc2: Linear,
    stem: Conv2d,
    downs: Vec<DownStage>,
    mid: MidStage,
    ups: Vec<UpStage>,
    final_norm: GroupNorm,
    head_eps: Conv2d,
    head_y: Conv2d,
}

/// Cached time-embedding intermediates.
#[derive(Debug, Clone)]
pub struct TimeCache<F: Real> {
    feats: Vec<F>,
    h1: Vec<F>,
    a1: Vec<F>,
    emb: Vec<F>,
    e_act: Vec<F>,
}

struct DownTrace<F: Real> {
    res: ResBlockCache<F>,
    attn: Option<AttnCache<F>>,
    /// Input to the strided downsampling convolution (also the skip tensor).
    pre_down: Tensor3<F>,
}

struct MidTrace<F: Real> {
    res1: ResBlockCache<F>,
    attn: Option<AttnCache<F>>,
    res2: ResBlockCache<F>,
}

struct UpTrace<F: Real> {
    /// Upsampled tensor, input to the channel-reducing convolution.
    conv_in: Tensor3<F>,
    res: ResBlockCache<F>,
    attn: Option<AttnCache<F>>,
}

/// Every intermediate the backward pass needs, owned by value.
pub struct Trace<F: Real> {
    t: usize,
    x: Tensor3<F>,
    time: TimeCache<F>,
    downs: Vec<DownTrace<F>>,
    mid: MidTrace<F>,
    /// Stored in processing order: level `depth-1` first, level 0 last.
    ups: Vec<UpTrace<F>>,
    final_norm: GroupNormCache<F>,
    /// Normalized pre-activation feeding the output SiLU.
    n_out: Tensor3<F>,
    /// Activated features feeding both heads.
    h_out: Tensor3<F>,
}

impl<F: Real> Trace<F> {
    /// Timestep the trace was recorded at.
    pub fn t(&self) -> usize {
        self.t
    }
}

impl Denoiser {
    /// Validate the config and lay out every weight array.
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let e = config.time_embed_dim;
        let mut b = LayoutBuilder::new();

        let time_fc1 = Linear::new(&mut b, "time.fc1", e, e);
        let time_fc2 = Linear::new(&mut b, "time.fc2", e, e);
        let stem = Conv2d::new(&mut b, "stem", 1, config.channels_at(0), 3, 1, 1);

        let mut downs = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let ch = config.channels_at(l);
            let res = ResBlock::new(&mut b, &format!("down{l}.res"), ch, ch, e);
            let attn = config
                .attention_at
                .contains(&l)
                .then(|| AttnBlock::new(&mut b, &format!("down{l}.attn"), ch));
            let down = Conv2d::new(
                &mut b,
                &format!("down{l}.down"),
                ch,
                config.channels_at(l + 1),
                3,
                2,
                1,
            );
            downs.push(DownStage { res, attn, down });
        }

        let chd = config.channels_at(config.depth);
        let mid = MidStage {
            res1: ResBlock::new(&mut b, "mid.res1", chd, chd, e),
            attn: config
                .attention_at
                .contains(&config.depth)
                .then(|| AttnBlock::new(&mut b, "mid.attn", chd)),
            res2: ResBlock::new(&mut b, "mid.res2", chd, chd, e),
        };

        let mut ups = Vec::with_capacity(config.depth);
        for l in (0..config.depth).rev() {
            let ch = config.channels_at(l);
            let conv = Conv2d::new(
                &mut b,
                &format!("up{l}.conv"),
                config.channels_at(l + 1),
                ch,
                3,
                1,
                1,
            );
            let res = ResBlock::new(&mut b, &format!("up{l}.res"), 2 * ch, ch, e);
            let attn = config
                .attention_at
                .contains(&l)
                .then(|| AttnBlock::new(&mut b, &format!("up{l}.attn"), ch));
            ups.push(UpStage { conv, res, attn });
        }

        let ch0 = config.channels_at(0);
        let final_norm = GroupNorm::new(&mut b, "final.norm", ch0);
        let head_eps = Conv2d::with_init(&mut b, "head.eps", ch0, 1, 1, 1, 0, InitKind::Zero);
        let head_y = Conv2d::with_init(&mut b, "head.y", ch0, 1, 1, 1, 0, InitKind::Zero);

        Ok(Denoiser {
            config,
            layout: b.finish(),
            time_fc1,
            time_fc2,
            stem,
            downs,
            mid,
            ups,
            final_norm,
            head_eps,
            head_y,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Named layout of the flat parameter buffer.
    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    /// Fresh parameters: truncated-normal kernels, zeroed heads and biases.
    pub fn init_params<F: Real>(&self, seed: u64) -> ParamStore<F> {
        ParamStore::init(Arc::clone(&self.layout), seed, 0.02)
    }

    /// Zeroed gradient buffer matching the parameter layout.
    pub fn zero_grads<F: Real>(&self) -> Vec<F> {
        vec![F::zero(); self.layout.total_len()]
    }

    fn check_input<F: Real>(&self, x_t: &Array2<F>, what: &str) -> Result<()> {
        let (h, w) = x_t.dim();
        if (h, w) != self.config.input_size {
            return Err(Error::shapes(
                what,
                &[h, w],
                &[self.config.input_size.0, self.config.input_size.1],
            ));
        }
        Ok(())
    }

    fn check_params<F: Real>(&self, params: &[F], what: &str) -> Result<()> {
        if params.len() != self.layout.total_len() {
            return Err(Error::shapes(
                what,
                &[params.len()],
                &[self.layout.total_len()],
            ));
        }
        Ok(())
    }

    fn time_forward<F: Real>(&self, params: &[F], t: usize) -> TimeCache<F> {
        let feats = sinusoidal_features(t, self.config.time_embed_dim);
        let h1 = self.time_fc1.forward(params, &feats);
        let a1 = silu_slice(&h1);
        let emb = self.time_fc2.forward(params, &a1);
        let e_act = silu_slice(&emb);
        TimeCache {
            feats,
            h1,
            a1,
            emb,
            e_act,
        }
    }

    fn time_backward<F: Real>(&self, params: &[F], time: &TimeCache<F>, d_e_act: &[F], grads: &mut [F]) {
        let d_emb = silu_slice_backward(&time.emb, d_e_act);
        let d_a1 = self.time_fc2.backward(params, &time.a1, &d_emb, grads);
        let d_h1 = silu_slice_backward(&time.h1, &d_a1);
        let _ = self.time_fc1.backward(params, &time.feats, &d_h1, grads);
    }

    /// Run the network, keeping every intermediate for a later backward pass.
    pub fn forward_traced<F: Real>(
        &self,
        params: &[F],
        x_t: &Array2<F>,
        t: usize,
    ) -> Result<(Array2<F>, Array2<F>, Trace<F>)> {
        self.check_input(x_t, "denoiser input")?;
        self.check_params(params, "denoiser params")?;
        let x = Tensor3::from_array2(x_t);
        let time = self.time_forward(params, t);
        let e_act = time.e_act.clone();

        let mut h = self.stem.forward(params, &x);

        let mut down_traces = Vec::with_capacity(self.downs.len());
        for stage in &self.downs {
            let (r_out, r_cache) = stage.res.forward(params, &h, &e_act);
            let (a_out, a_cache) = match &stage.attn {
                Some(attn) => {
                    let (o, c) = attn.forward(params, &r_out);
                    (o, Some(c))
                }
                None => (r_out, None),
            };
            h = stage.down.forward(params, &a_out);
            down_traces.push(DownTrace {
                res: r_cache,
                attn: a_cache,
                pre_down: a_out,
            });
        }

        let (m1, m1_cache) = self.mid.res1.forward(params, &h, &e_act);
        let (ma, ma_cache) = match &self.mid.attn {
            Some(attn) => {
                let (o, c) = attn.forward(params, &m1);
                (o, Some(c))
            }
            None => (m1, None),
        };
        let (m2, m2_cache) = self.mid.res2.forward(params, &ma, &e_act);
        h = m2;
        let mid_trace = MidTrace {
            res1: m1_cache,
            attn: ma_cache,
            res2: m2_cache,
        };

        let mut up_traces = Vec::with_capacity(self.ups.len());
        for (i, stage) in self.ups.iter().enumerate() {
            let conv_in = upsample2x(&h);
            let reduced = stage.conv.forward(params, &conv_in);
            // Skips pair up in reverse: first up stage consumes the last skip.
            let skip = &down_traces[self.downs.len() - 1 - i].pre_down;
            let concat = reduced.concat_channels(skip);
            let (r_out, r_cache) = stage.res.forward(params, &concat, &e_act);
            let (a_out, a_cache) = match &stage.attn {
                Some(attn) => {
                    let (o, c) = attn.forward(params, &r_out);
                    (o, Some(c))
                }
                None => (r_out, None),
            };
            h = a_out;
            up_traces.push(UpTrace {
                conv_in,
                res: r_cache,
                attn: a_cache,
            });
        }

        let (n_pre, norm_cache) = self.final_norm.forward(params, &h);
        let h_out = silu(&n_pre);
        let eps_hat = self.head_eps.forward(params, &h_out);
        let y_hat = self.head_y.forward(params, &h_out);

        let trace = Trace {
            t,
            x,
            time,
            downs: down_traces,
            mid: mid_trace,
            ups: up_traces,
            final_norm: norm_cache,
            n_out: n_pre,
            h_out,
        };
        Ok((eps_hat.channel_to_array2(0), y_hat.channel_to_array2(0), trace))
    }

    /// Run the network for its two outputs only.
    pub fn forward<F: Real>(
        &self,
        params: &[F],
        x_t: &Array2<F>,
        t: usize,
    ) -> Result<(Array2<F>, Array2<F>)> {
        let (eps_hat, y_hat, _) = self.forward_traced(params, x_t, t)?;
        Ok((eps_hat, y_hat))
    }

    /// Accumulate `dL/dtheta` into `grads` for the linear functional defined
    /// by the two output cotangents.  Fixed traversal order keeps the
    /// accumulation deterministic.
    pub fn grad<F: Real>(
        &self,
        params: &[F],
        trace: &Trace<F>,
        grad_eps: &Array2<F>,
        grad_y: &Array2<F>,
        grads: &mut [F],
    ) -> Result<()> {
        self.check_input(grad_eps, "noise-head cotangent")?;
        self.check_input(grad_y, "label-head cotangent")?;
        self.check_params(params, "denoiser params")?;
        if grads.len() != self.layout.total_len() {
            return Err(Error::shapes(
                "gradient buffer",
                &[grads.len()],
                &[self.layout.total_len()],
            ));
        }

        let g_eps = Tensor3::from_array2(grad_eps);
        let g_y = Tensor3::from_array2(grad_y);
        let e_act = &trace.time.e_act;
        let mut d_e_act = vec![F::zero(); e_act.len()];

        let mut g = self.head_eps.backward(params, &trace.h_out, &g_eps, grads);
        g.add_assign(&self.head_y.backward(params, &trace.h_out, &g_y, grads));
        let g = silu_backward(&trace.n_out, &g);
        let mut g = self.final_norm.backward(params, &trace.final_norm, &g, grads);

        // Up stages backward, last executed first.
        let mut skip_grads: Vec<Option<Tensor3<F>>> = vec![None; self.downs.len()];
        for (i, stage) in self.ups.iter().enumerate().rev() {
            let tr = &trace.ups[i];
            if let (Some(attn), Some(cache)) = (&stage.attn, &tr.attn) {
                g = attn.backward(params, cache, &g, grads);
            }
            let (d_concat, d_e) = stage.res.backward(params, &tr.res, e_act, &g, grads);
            add_vec(&mut d_e_act, &d_e);
            let reduced_ch = d_concat.channels() / 2;
            let (d_reduced, d_skip) = d_concat.split_channels(reduced_ch);
            skip_grads[self.downs.len() - 1 - i] = Some(d_skip);
            let d_conv_in = stage.conv.backward(params, &tr.conv_in, &d_reduced, grads);
            g = upsample2x_backward(&d_conv_in);
        }

        // Bottleneck backward.
        {
            let tr = &trace.mid;
            let (d_ma, d_e) = self.mid.res2.backward(params, &tr.res2, e_act, &g, grads);
            add_vec(&mut d_e_act, &d_e);
            let d_m1 = match (&self.mid.attn, &tr.attn) {
                (Some(attn), Some(cache)) => attn.backward(params, cache, &d_ma, grads),
                _ => d_ma,
            };
            let (d_in, d_e) = self.mid.res1.backward(params, &tr.res1, e_act, &d_m1, grads);
            add_vec(&mut d_e_act, &d_e);
            g = d_in;
        }

        // Down stages backward, deepest first.
        for (l, stage) in self.downs.iter().enumerate().rev() {
            let tr = &trace.downs[l];
            let mut d_pre = stage.down.backward(params, &tr.pre_down, &g, grads);
            if let Some(d_skip) = skip_grads[l].take() {
                d_pre.add_assign(&d_skip);
            }
            let d_res_out = match (&stage.attn, &tr.attn) {
                (Some(attn), Some(cache)) => attn.backward(params, cache, &d_pre, grads),
                _ => d_pre,
            };
            let (d_in, d_e) = stage.res.backward(params, &tr.res, e_act, &d_res_out, grads);
            add_vec(&mut d_e_act, &d_e);
            g = d_in;
        }

        let _ = self.stem.backward(params, &trace.x, &g, grads);
        self.time_backward(params, &trace.time, &d_e_act, grads);
        Ok(())
    }

    /// One-shot gradient of the output functional at `(x_t, t)`: runs the
    /// forward pass internally and returns a fresh gradient buffer.
    pub fn backward<F: Real>(
        &self,
        params: &[F],
        x_t: &Array2<F>,
        t: usize,
        grad_eps: &Array2<F>,
        grad_y: &Array2<F>,
    ) -> Result<Vec<F>> {
        let (_, _, trace) = self.forward_traced(params, x_t, t)?;
        let mut grads = self.zero_grads();
        self.grad(params, &trace, grad_eps, grad_y, &mut grads)?;
        Ok(grads)
    }
}

fn add_vec<F: Real>(acc: &mut [F], inc: &[F]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += *b;
    }
}
