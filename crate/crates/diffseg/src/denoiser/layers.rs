//! Network building blocks with explicit forward and backward passes.
//!
//! Every layer stores only the [`Slot`]s of its weights inside the flat
//! parameter buffer; forward takes the buffer plus inputs, backward takes
//! the same buffer, the cached forward intermediates, and the output
//! cotangent, accumulates `dL/dweights` into a caller-owned gradient
//! buffer, and returns `dL/dinput`.  All loops run in a fixed order, so
//! gradient accumulation is deterministic.
//!
//! Convolutions lower to GEMM via im2col; attention is a single-head
//! spatial softmax block with a zero-initialized output projection so it
//! starts as the identity.

use crate::real::{sigmoid, Real};

use super::params::{InitKind, LayoutBuilder, Slot};
use super::tensor::Tensor3;

/// Variance floor inside normalization.
const NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

/// Elementwise `x * sigmoid(x)` over a slice.
pub fn silu_slice<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Backward of [`silu_slice`] given the forward *input*.
pub fn silu_slice_backward<F: Real>(x: &[F], gout: &[F]) -> Vec<F> {
    x.iter()
        .zip(gout)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (F::one() + v * (F::one() - s))
        })
        .collect()
}

/// SiLU over a feature map.
pub fn silu<F: Real>(x: &Tensor3<F>) -> Tensor3<F> {
    Tensor3::from_vec(x.channels(), x.height(), x.width(), silu_slice(x.as_slice()))
}

/// Backward of [`silu`] given the forward input.
pub fn silu_backward<F: Real>(x: &Tensor3<F>, gout: &Tensor3<F>) -> Tensor3<F> {
    Tensor3::from_vec(
        x.channels(),
        x.height(),
        x.width(),
        silu_slice_backward(x.as_slice(), gout.as_slice()),
    )
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution: 3x3 with padding 1 (stride 1 or 2) or 1x1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Slot,
    pub b: Slot,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Register a convolution with truncated-normal kernel init.
    pub fn new(
        b: &mut LayoutBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d::with_init(b, name, cin, cout, kernel, stride, pad, InitKind::TruncNormal)
    }

    /// Register a convolution with an explicit kernel init (heads use zero).
    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        b: &mut LayoutBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: InitKind,
    ) -> Self {
        let w = b.slot(format!("{name}.w"), &[cout, cin, kernel, kernel], init);
        let bias = b.slot(format!("{name}.b"), &[cout], InitKind::Zero);
        Conv2d {
            w,
            b: bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Convolve `x`; output is `cout x out_h x out_w`.
    pub fn forward<F: Real>(&self, params: &[F], x: &Tensor3<F>) -> Tensor3<F> {
        assert_eq!(x.channels(), self.cin, "conv input channels");
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.out_hw(h, w);
        let opix = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let mut out = Tensor3::zeros(self.cout, oh, ow);

        let weights = self.w.of(params);
        if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            // 1x1 convolution is a plain channel-mixing GEMM.
            F::gemm(
                self.cout,
                self.cin,
                opix,
                F::one(),
                weights,
                self.cin as isize,
                1,
                x.as_slice(),
                opix as isize,
                1,
                F::zero(),
                out.as_mut_slice(),
                opix as isize,
                1,
            );
        } else {
            let mut col = vec![F::zero(); kk * opix];
            im2col(x, self.kernel, self.stride, self.pad, oh, ow, &mut col);
            F::gemm(
                self.cout,
                kk,
                opix,
                F::one(),
                weights,
                kk as isize,
                1,
                &col,
                opix as isize,
                1,
                F::zero(),
                out.as_mut_slice(),
                opix as isize,
                1,
            );
        }

        let bias = self.b.of(params);
        for co in 0..self.cout {
            let bv = bias[co];
            for v in out.channel_mut(co) {
                *v += bv;
            }
        }
        out
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    pub fn backward<F: Real>(
        &self,
        params: &[F],
        x: &Tensor3<F>,
        gout: &Tensor3<F>,
        grads: &mut [F],
    ) -> Tensor3<F> {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(gout.channels(), self.cout, "conv cotangent channels");
        assert_eq!((gout.height(), gout.width()), (oh, ow), "conv cotangent size");
        let opix = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;

        // Bias gradient: row sums of the cotangent.
        {
            let gb = self.b.of_mut(grads);
            for co in 0..self.cout {
                let mut acc = F::zero();
                for v in gout.channel(co) {
                    acc += *v;
                }
                gb[co] += acc;
            }
        }

        let is_1x1 = self.kernel == 1 && self.stride == 1 && self.pad == 0;
        let col_owned; // keeps the im2col buffer alive for the 3x3 path
        let col: &[F] = if is_1x1 {
            x.as_slice()
        } else {
            let mut buf = vec![F::zero(); kk * opix];
            im2col(x, self.kernel, self.stride, self.pad, oh, ow, &mut buf);
            col_owned = buf;
            &col_owned
        };

        // dW = gout * col^T, accumulated.
        F::gemm(
            self.cout,
            opix,
            kk,
            F::one(),
            gout.as_slice(),
            opix as isize,
            1,
            col,
            1,
            opix as isize,
            F::one(),
            self.w.of_mut(grads),
            kk as isize,
            1,
        );

        // dcol = W^T * gout, then scattered back to the input grid.
        let weights = self.w.of(params);
        let mut gin = Tensor3::zeros(self.cin, h, w);
        if is_1x1 {
            F::gemm(
                self.cin,
                self.cout,
                opix,
                F::one(),
                weights,
                1,
                self.cin as isize,
                gout.as_slice(),
                opix as isize,
                1,
                F::zero(),
                gin.as_mut_slice(),
                opix as isize,
                1,
            );
        } else {
            let mut gcol = vec![F::zero(); kk * opix];
            F::gemm(
                kk,
                self.cout,
                opix,
                F::one(),
                weights,
                1,
                kk as isize,
                gout.as_slice(),
                opix as isize,
                1,
                F::zero(),
                &mut gcol,
                opix as isize,
                1,
            );
            col2im_add(&gcol, self.kernel, self.stride, self.pad, oh, ow, &mut gin);
        }
        gin
    }
}

/// Unfold `x` into `[cin*k*k, out_h*out_w]` patches (zero padding).
fn im2col<F: Real>(
    x: &Tensor3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [F],
) {
    let (h, w) = (x.height(), x.width());
    let opix = oh * ow;
    let mut row_idx = 0;
    for ci in 0..x.channels() {
        let plane = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[row_idx * opix..(row_idx + 1) * opix];
                row_idx += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..iy as usize * w + w];
                    if stride == 1 {
                        // ix = ox + kx - pad; copy the in-range span, zero the rest.
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(ow);
                        dst[..lo].fill(F::zero());
                        let shift = kx + lo - pad;
                        dst[lo..hi].copy_from_slice(&src[shift..shift + (hi - lo)]);
                        dst[hi..].fill(F::zero());
                    } else {
                        for (ox, slot) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *slot = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                F::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch gradient back onto the input grid.
fn col2im_add<F: Real>(
    col: &[F],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut Tensor3<F>,
) {
    let (h, w) = (gx.height(), gx.width());
    let opix = oh * ow;
    let mut row_idx = 0;
    for ci in 0..gx.channels() {
        let plane = gx.channel_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[row_idx * opix..(row_idx + 1) * opix];
                row_idx += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..iy as usize * w + w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub scale: Slot,
    pub bias: Slot,
    pub channels: usize,
    pub groups: usize,
}

/// Forward intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<F: Real> {
    xhat: Tensor3<F>,
    inv_sd: Vec<F>,
}

/// Largest divisor of `channels` that is at most 8 while keeping at least
/// two channels per group.  Single-channel groups would normalize away the
/// per-channel time-embedding shift added between the two convolutions of a
/// residual block, severing the time conditioning entirely.
fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(b: &mut LayoutBuilder, name: &str, channels: usize) -> Self {
        let scale = b.slot(format!("{name}.scale"), &[channels], InitKind::One);
        let bias = b.slot(format!("{name}.bias"), &[channels], InitKind::Zero);
        GroupNorm {
            scale,
            bias,
            channels,
            groups: group_count(channels),
        }
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &Tensor3<F>) -> (Tensor3<F>, GroupNormCache<F>) {
        assert_eq!(x.channels(), self.channels, "group norm channels");
        let plane = x.plane();
        let per_group = self.channels / self.groups;
        let group_len = per_group * plane;
        let mut xhat = x.clone();
        let mut inv_sd = vec![F::zero(); self.groups];

        for g in 0..self.groups {
            let limbs = &mut xhat.as_mut_slice()[g * group_len..(g + 1) * group_len];
            let mut mean = F::zero();
            for v in limbs.iter() {
                mean += *v;
            }
            mean = mean / F::from_f64(group_len as f64);
            let mut var = F::zero();
            for v in limbs.iter() {
                let d = *v - mean;
                var += d * d;
            }
            var = var / F::from_f64(group_len as f64);
            let isd = (var + F::from_f64(NORM_EPS)).sqrt().recip();
            inv_sd[g] = isd;
            for v in limbs.iter_mut() {
                *v = (*v - mean) * isd;
            }
        }

        let scale = self.scale.of(params);
        let bias = self.bias.of(params);
        let mut out = xhat.clone();
        for c in 0..self.channels {
            let (s, b0) = (scale[c], bias[c]);
            for v in out.channel_mut(c) {
                *v = *v * s + b0;
            }
        }
        (out, GroupNormCache { xhat, inv_sd })
    }

    pub fn backward<F: Real>(
        &self,
        params: &[F],
        cache: &GroupNormCache<F>,
        gout: &Tensor3<F>,
        grads: &mut [F],
    ) -> Tensor3<F> {
        let plane = gout.plane();
        let per_group = self.channels / self.groups;
        let group_len = per_group * plane;
        let scale = self.scale.of(params);

        // Affine parameter gradients.
        {
            let gs = self.scale.of_mut(grads);
            for c in 0..self.channels {
                let mut acc = F::zero();
                for (g, xh) in gout.channel(c).iter().zip(cache.xhat.channel(c)) {
                    acc += *g * *xh;
                }
                gs[c] += acc;
            }
        }
        {
            let gb = self.bias.of_mut(grads);
            for c in 0..self.channels {
                let mut acc = F::zero();
                for g in gout.channel(c) {
                    acc += *g;
                }
                gb[c] += acc;
            }
        }

        // dxhat = gout * scale_c, then the centered projection per group:
        // dx = inv_sd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
        let mut gin = Tensor3::zeros(self.channels, gout.height(), gout.width());
        for c in 0..self.channels {
            let s = scale[c];
            let dst = gin.channel_mut(c);
            for (d, g) in dst.iter_mut().zip(gout.channel(c)) {
                *d = *g * s;
            }
        }
        let n = F::from_f64(group_len as f64);
        for g in 0..self.groups {
            let range = g * group_len..(g + 1) * group_len;
            let xh = &cache.xhat.as_slice()[range.clone()];
            let dxh = &mut gin.as_mut_slice()[range];
            let mut m1 = F::zero();
            let mut m2 = F::zero();
            for (d, x) in dxh.iter().zip(xh) {
                m1 += *d;
                m2 += *d * *x;
            }
            m1 = m1 / n;
            m2 = m2 / n;
            let isd = cache.inv_sd[g];
            for (d, x) in dxh.iter_mut().zip(xh) {
                *d = isd * (*d - m1 - *x * m2);
            }
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer on small vectors (time-embedding path).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut LayoutBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = b.slot(format!("{name}.w"), &[out_dim, in_dim], InitKind::TruncNormal);
        let bias = b.slot(format!("{name}.b"), &[out_dim], InitKind::Zero);
        Linear {
            w,
            b: bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.in_dim, "linear input length");
        let w = self.w.of(params);
        let b = self.b.of(params);
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += *wi * *xi;
            }
            out.push(acc);
        }
        out
    }

    pub fn backward<F: Real>(
        &self,
        params: &[F],
        x: &[F],
        gout: &[F],
        grads: &mut [F],
    ) -> Vec<F> {
        assert_eq!(gout.len(), self.out_dim, "linear cotangent length");
        {
            let gw = self.w.of_mut(grads);
            for o in 0..self.out_dim {
                let row = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
                let g = gout[o];
                for (slot, xi) in row.iter_mut().zip(x) {
                    *slot += g * *xi;
                }
            }
        }
        {
            let gb = self.b.of_mut(grads);
            for (slot, g) in gb.iter_mut().zip(gout) {
                *slot += *g;
            }
        }
        let w = self.w.of(params);
        let mut gin = vec![F::zero(); self.in_dim];
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let g = gout[o];
            for (slot, wi) in gin.iter_mut().zip(row) {
                *slot += g * *wi;
            }
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsampling
// ---------------------------------------------------------------------------

/// Double both spatial dimensions by pixel replication.
pub fn upsample2x<F: Real>(x: &Tensor3<F>) -> Tensor3<F> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let mut out = Tensor3::zeros(c, h * 2, w * 2);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let base = (y * 2) * (w * 2) + xx * 2;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + w * 2] = v;
                dst[base + w * 2 + 1] = v;
            }
        }
    }
    out
}

/// Backward of [`upsample2x`]: sum each 2x2 replication cell.
pub fn upsample2x_backward<F: Real>(gout: &Tensor3<F>) -> Tensor3<F> {
    let (c, oh, ow) = (gout.channels(), gout.height(), gout.width());
    let (h, w) = (oh / 2, ow / 2);
    let mut gin = Tensor3::zeros(c, h, w);
    for ci in 0..c {
        let src = gout.channel(ci);
        let dst = gin.channel_mut(ci);
        for y in 0..h {
            for xx in 0..w {
                let base = (y * 2) * ow + xx * 2;
                dst[y * w + xx] = src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
            }
        }
    }
    gin
}

// ---------------------------------------------------------------------------
// Self-attention
// ---------------------------------------------------------------------------

/// Single-head spatial self-attention with a residual connection.
///
/// `out = x + Wo * attend(norm(x))`; the output projection starts at
/// zero, so a fresh block is the identity map.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub norm: GroupNorm,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub channels: usize,
}

/// Forward intermediates for the attention backward pass.
#[derive(Debug, Clone)]
pub struct AttnCache<F: Real> {
    norm: GroupNormCache<F>,
    xn: Tensor3<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    attn: Vec<F>,
    o: Vec<F>,
}

impl AttnBlock {
    pub fn new(b: &mut LayoutBuilder, name: &str, channels: usize) -> Self {
        let norm = GroupNorm::new(b, &format!("{name}.norm"), channels);
        let proj = |b: &mut LayoutBuilder, suffix: &str, init| {
            (
                b.slot(format!("{name}.{suffix}.w"), &[channels, channels], init),
                b.slot(format!("{name}.{suffix}.b"), &[channels], InitKind::Zero),
            )
        };
        let (wq, bq) = proj(b, "q", InitKind::TruncNormal);
        let (wk, bk) = proj(b, "k", InitKind::TruncNormal);
        let (wv, bv) = proj(b, "v", InitKind::TruncNormal);
        let (wo, bo) = proj(b, "out", InitKind::Zero);
        AttnBlock {
            norm,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            channels,
        }
    }

    /// `W * feat + b` over a `[C, N]` feature matrix.
    fn project<F: Real>(&self, w: &[F], b: &[F], feat: &[F], n: usize) -> Vec<F> {
        let c = self.channels;
        let mut out = vec![F::zero(); c * n];
        F::gemm(
            c,
            c,
            n,
            F::one(),
            w,
            c as isize,
            1,
            feat,
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        for ci in 0..c {
            let bv = b[ci];
            for v in &mut out[ci * n..(ci + 1) * n] {
                *v += bv;
            }
        }
        out
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &Tensor3<F>) -> (Tensor3<F>, AttnCache<F>) {
        let c = self.channels;
        let n = x.plane();
        let (xn, norm_cache) = self.norm.forward(params, x);

        let q = self.project(self.wq.of(params), self.bq.of(params), xn.as_slice(), n);
        let k = self.project(self.wk.of(params), self.bk.of(params), xn.as_slice(), n);
        let v = self.project(self.wv.of(params), self.bv.of(params), xn.as_slice(), n);

        // scores[i, j] = q[:, i] . k[:, j] / sqrt(C)
        let scale = F::from_f64(1.0 / (c as f64).sqrt());
        let mut attn = vec![F::zero(); n * n];
        F::gemm(
            n,
            c,
            n,
            scale,
            &q,
            1,
            n as isize,
            &k,
            n as isize,
            1,
            F::zero(),
            &mut attn,
            n as isize,
            1,
        );
        for row in attn.chunks_mut(n) {
            softmax_in_place(row);
        }

        // o[:, i] = sum_j attn[i, j] * v[:, j]  =>  O = V * A^T
        let mut o = vec![F::zero(); c * n];
        F::gemm(
            c,
            n,
            n,
            F::one(),
            &v,
            n as isize,
            1,
            &attn,
            1,
            n as isize,
            F::zero(),
            &mut o,
            n as isize,
            1,
        );

        let y = self.project(self.wo.of(params), self.bo.of(params), &o, n);
        let mut out = x.clone();
        for (slot, yv) in out.as_mut_slice().iter_mut().zip(&y) {
            *slot += *yv;
        }
        (
            out,
            AttnCache {
                norm: norm_cache,
                xn,
                q,
                k,
                v,
                attn,
                o,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        params: &[F],
        cache: &AttnCache<F>,
        gout: &Tensor3<F>,
        grads: &mut [F],
    ) -> Tensor3<F> {
        let c = self.channels;
        let n = cache.xn.plane();
        let gy = gout.as_slice(); // cotangent of the projected branch

        // Output projection: y = Wo * o + bo.
        accumulate_proj_grads::<F>(self.wo, self.bo, gy, &cache.o, c, n, grads);
        let mut g_o = vec![F::zero(); c * n];
        F::gemm(
            c,
            c,
            n,
            F::one(),
            self.wo.of(params),
            1,
            c as isize,
            gy,
            n as isize,
            1,
            F::zero(),
            &mut g_o,
            n as isize,
            1,
        );

        // O = V * A^T.
        let mut g_v = vec![F::zero(); c * n];
        F::gemm(
            c,
            n,
            n,
            F::one(),
            &g_o,
            n as isize,
            1,
            &cache.attn,
            n as isize,
            1,
            F::zero(),
            &mut g_v,
            n as isize,
            1,
        );
        let mut g_attn = vec![F::zero(); n * n];
        F::gemm(
            n,
            c,
            n,
            F::one(),
            &g_o,
            1,
            n as isize,
            &cache.v,
            n as isize,
            1,
            F::zero(),
            &mut g_attn,
            n as isize,
            1,
        );

        // Softmax rows: ds = a * (da - sum(da * a)).
        for (gr, ar) in g_attn.chunks_mut(n).zip(cache.attn.chunks(n)) {
            let mut dot = F::zero();
            for (g, a) in gr.iter().zip(ar) {
                dot += *g * *a;
            }
            for (g, a) in gr.iter_mut().zip(ar) {
                *g = *a * (*g - dot);
            }
        }

        // scores = q^T k / sqrt(C): dq = k * ds^T / sqrt(C), dk = q * ds / sqrt(C).
        let scale = F::from_f64(1.0 / (c as f64).sqrt());
        let mut g_q = vec![F::zero(); c * n];
        F::gemm(
            c,
            n,
            n,
            scale,
            &cache.k,
            n as isize,
            1,
            &g_attn,
            1,
            n as isize,
            F::zero(),
            &mut g_q,
            n as isize,
            1,
        );
        let mut g_k = vec![F::zero(); c * n];
        F::gemm(
            c,
            n,
            n,
            scale,
            &cache.q,
            n as isize,
            1,
            &g_attn,
            n as isize,
            1,
            F::zero(),
            &mut g_k,
            n as isize,
            1,
        );

        // Three input projections share the normalized features.
        let xn = cache.xn.as_slice();
        accumulate_proj_grads::<F>(self.wq, self.bq, &g_q, xn, c, n, grads);
        accumulate_proj_grads::<F>(self.wk, self.bk, &g_k, xn, c, n, grads);
        accumulate_proj_grads::<F>(self.wv, self.bv, &g_v, xn, c, n, grads);

        let mut g_xn = vec![F::zero(); c * n];
        for (w_slot, g) in [(self.wq, &g_q), (self.wk, &g_k), (self.wv, &g_v)] {
            F::gemm(
                c,
                c,
                n,
                F::one(),
                w_slot.of(params),
                1,
                c as isize,
                g,
                n as isize,
                1,
                F::one(),
                &mut g_xn,
                n as isize,
                1,
            );
        }
        let g_xn = Tensor3::from_vec(c, gout.height(), gout.width(), g_xn);
        let mut gin = self.norm.backward(params, &cache.norm, &g_xn, grads);
        // Residual branch.
        gin.add_assign(gout);
        gin
    }
}

/// Accumulate `dW += g * feat^T` and `db += row sums of g` for a projection.
fn accumulate_proj_grads<F: Real>(
    w: Slot,
    b: Slot,
    g: &[F],
    feat: &[F],
    c: usize,
    n: usize,
    grads: &mut [F],
) {
    F::gemm(
        c,
        n,
        c,
        F::one(),
        g,
        n as isize,
        1,
        feat,
        1,
        n as isize,
        F::one(),
        w.of_mut(grads),
        c as isize,
        1,
    );
    let gb = b.of_mut(grads);
    for ci in 0..c {
        let mut acc = F::zero();
        for v in &g[ci * n..(ci + 1) * n] {
            acc += *v;
        }
        gb[ci] += acc;
    }
}

/// Max-shifted softmax over one row.
fn softmax_in_place<F: Real>(row: &mut [F]) {
    let mut max = row[0];
    for v in row.iter() {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

// ---------------------------------------------------------------------------
// Time embedding
// ---------------------------------------------------------------------------

/// Fixed sinusoidal features of an integer timestep.
///
/// Frequencies fall geometrically from 1 to 1/10000 across `dim/2` pairs;
/// the first half holds sines, the second half cosines.
pub fn sinusoidal_features<F: Real>(t: usize, dim: usize) -> Vec<F> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = F::from_f64(arg.sin());
        out[half + i] = F::from_f64(arg.cos());
    }
    out
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

/// Two-convolution residual block with additive time conditioning.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv2d,
    pub temb: Linear,
    pub gn2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub cout: usize,
}

/// Forward intermediates for the residual-block backward pass.
#[derive(Debug, Clone)]
pub struct ResBlockCache<F: Real> {
    x: Tensor3<F>,
    gn1: GroupNormCache<F>,
    n1: Tensor3<F>,
    h1: Tensor3<F>,
    gn2: GroupNormCache<F>,
    n2: Tensor3<F>,
    h3: Tensor3<F>,
}

impl ResBlock {
    pub fn new(b: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, embed_dim: usize) -> Self {
        let gn1 = GroupNorm::new(b, &format!("{name}.gn1"), cin);
        let conv1 = Conv2d::new(b, &format!("{name}.conv1"), cin, cout, 3, 1, 1);
        let temb = Linear::new(b, &format!("{name}.temb"), embed_dim, cout);
        let gn2 = GroupNorm::new(b, &format!("{name}.gn2"), cout);
        let conv2 = Conv2d::new(b, &format!("{name}.conv2"), cout, cout, 3, 1, 1);
        let skip = (cin != cout).then(|| Conv2d::new(b, &format!("{name}.skip"), cin, cout, 1, 1, 0));
        ResBlock {
            gn1,
            conv1,
            temb,
            gn2,
            conv2,
            skip,
            cout,
        }
    }

    /// `e_act` is the shared activated time embedding.
    pub fn forward<F: Real>(
        &self,
        params: &[F],
        x: &Tensor3<F>,
        e_act: &[F],
    ) -> (Tensor3<F>, ResBlockCache<F>) {
        let (n1, gn1_cache) = self.gn1.forward(params, x);
        let h1 = silu(&n1);
        let mut h2 = self.conv1.forward(params, &h1);
        let t_out = self.temb.forward(params, e_act);
        for c in 0..self.cout {
            let tv = t_out[c];
            for v in h2.channel_mut(c) {
                *v += tv;
            }
        }
        let (n2, gn2_cache) = self.gn2.forward(params, &h2);
        let h3 = silu(&n2);
        let h4 = self.conv2.forward(params, &h3);
        let mut out = match &self.skip {
            Some(conv) => conv.forward(params, x),
            None => x.clone(),
        };
        out.add_assign(&h4);
        (
            out,
            ResBlockCache {
                x: x.clone(),
                gn1: gn1_cache,
                n1,
                h1,
                gn2: gn2_cache,
                n2,
                h3,
            },
        )
    }

    /// Returns `(dL/dx, dL/de_act)`.
    pub fn backward<F: Real>(
        &self,
        params: &[F],
        cache: &ResBlockCache<F>,
        e_act: &[F],
        gout: &Tensor3<F>,
        grads: &mut [F],
    ) -> (Tensor3<F>, Vec<F>) {
        let d_h3 = self.conv2.backward(params, &cache.h3, gout, grads);
        let d_n2 = silu_backward(&cache.n2, &d_h3);
        let d_h2 = self.gn2.backward(params, &cache.gn2, &d_n2, grads);

        let mut d_t = vec![F::zero(); self.cout];
        for c in 0..self.cout {
            let mut acc = F::zero();
            for v in d_h2.channel(c) {
                acc += *v;
            }
            d_t[c] = acc;
        }
        let d_e = self.temb.backward(params, e_act, &d_t, grads);

        let d_h1 = self.conv1.backward(params, &cache.h1, &d_h2, grads);
        let d_n1 = silu_backward(&cache.n1, &d_h1);
        let mut gin = self.gn1.backward(params, &cache.gn1, &d_n1, grads);
        match &self.skip {
            Some(conv) => gin.add_assign(&conv.backward(params, &cache.x, gout, grads)),
            None => gin.add_assign(gout),
        }
        (gin, d_e)
    }
}
