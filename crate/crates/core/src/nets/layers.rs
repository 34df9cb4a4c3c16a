//! Forward and backward passes for the layer set used by the networks.
//!
//! Parameters live in one flat `f64` buffer per model; each layer records its
//! offset into that buffer so optimizers and gradient checks can treat the
//! whole model as a single vector. Feature maps are channel-major `(C, H, W)`.

use serde::{Deserialize, Serialize};

/// `dst += a * src`. Elementwise, so the vector width never changes results.
#[inline(always)]
fn axpy_portable(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product over eight interleaved partial sums, combined in a fixed
/// order, so any instruction set reproduces the same bits.
#[inline(always)]
fn dot_portable(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let x: &[f64; 8] = x.try_into().expect("chunk of 8");
        let y: &[f64; 8] = y.try_into().expect("chunk of 8");
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2(dst: &mut [f64], src: &[f64], a: f64) {
    axpy_portable(dst, src, a)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f64], b: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let chunks = n / 8;
    let (mut lo, mut hi) = (_mm256_setzero_pd(), _mm256_setzero_pd());
    for i in 0..chunks {
        // SAFETY: 8 * i + 8 <= n for both slices.
        let (pa, pb) = (a.as_ptr().add(8 * i), b.as_ptr().add(8 * i));
        lo = _mm256_add_pd(lo, _mm256_mul_pd(_mm256_loadu_pd(pa), _mm256_loadu_pd(pb)));
        hi = _mm256_add_pd(hi, _mm256_mul_pd(_mm256_loadu_pd(pa.add(4)), _mm256_loadu_pd(pb.add(4))));
    }
    let mut acc = [0.0f64; 8];
    _mm256_storeu_pd(acc.as_mut_ptr(), lo);
    _mm256_storeu_pd(acc.as_mut_ptr().add(4), hi);
    let tail: f64 = a[8 * chunks..n].iter().zip(&b[8 * chunks..n]).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { axpy_avx2(dst, src, a) };
    }
    axpy_portable(dst, src, a)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { dot_avx2(a, b) };
    }
    dot_portable(a, b)
}

/// Square convolution with stride 1 and zero "same" padding.
///
/// Evaluated directly on a zero-padded copy of the input: each kernel tap is
/// one contiguous multiply-add over the plane. With the few channels used
/// here this beats unfolding patches into a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub offset: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, offset: usize) -> Self {
        assert!(kernel % 2 == 1);
        Self {
            in_channels,
            out_channels,
            kernel,
            offset,
        }
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn num_weights(&self) -> usize {
        self.out_channels * self.patch()
    }

    pub fn num_params(&self) -> usize {
        self.num_weights() + self.out_channels
    }

    pub fn fan_in(&self) -> usize {
        self.patch()
    }

    pub fn end(&self) -> usize {
        self.offset + self.num_params()
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.num_weights()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset + self.num_weights()..self.end()]
    }

    fn geometry(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let p = self.kernel / 2;
        let pw = w + 2 * p;
        // Wide row-major index j = y * pw + x covers every output pixel; the
        // 2p columns between rows are computed and discarded.
        let len = (h - 1) * pw + w;
        (pw, (h + 2 * p) * pw, len)
    }

    fn pad(&self, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let p = self.kernel / 2;
        let (pw, plane, _) = self.geometry(h, w);
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            for y in 0..h {
                let dst = ch * plane + (y + p) * pw + p;
                out[dst..dst + w].copy_from_slice(&x[(ch * h + y) * w..][..w]);
            }
        }
        out
    }

    /// Output-shaped planes in the wide layout, zero in the discarded columns.
    fn widen(&self, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let (pw, _, len) = self.geometry(h, w);
        let mut out = vec![0.0; c * len];
        for ch in 0..c {
            for y in 0..h {
                out[ch * len + y * pw..][..w].copy_from_slice(&x[(ch * h + y) * w..][..w]);
            }
        }
        out
    }

    fn narrow(&self, wide: &[f64], c: usize, h: usize, w: usize, stride: usize, start: usize) -> Vec<f64> {
        let pw = w + 2 * (self.kernel / 2);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                out.extend_from_slice(&wide[ch * stride + start + y * pw..][..w]);
            }
        }
        out
    }

    /// `f(weight_index, co, ci, tap_offset)` for every kernel tap.
    #[inline]
    fn for_each_tap(&self, pw: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let k = self.kernel;
        for co in 0..self.out_channels {
            for ci in 0..self.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        f(((co * self.in_channels + ci) * k + ky) * k + kx, co, ci, ky * pw + kx);
                    }
                }
            }
        }
    }

    /// Returns the output map and the padded input that `backward` needs.
    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_channels * h * w);
        let (pw, plane, len) = self.geometry(h, w);
        let padded = self.pad(input, self.in_channels, h, w);
        let wts = self.weights(params);
        let mut wide = vec![0.0; self.out_channels * len];
        for (co, &b) in self.bias(params).iter().enumerate() {
            wide[co * len..(co + 1) * len].fill(b);
        }
        self.for_each_tap(pw, |idx, co, ci, off| {
            axpy(&mut wide[co * len..][..len], &padded[ci * plane + off..][..len], wts[idx]);
        });
        (self.narrow(&wide, self.out_channels, h, w, len, 0), padded)
    }

    /// Accumulates parameter gradients into `grads` only.
    pub fn backward_params(&self, saved: &[f64], grad_out: &[f64], h: usize, w: usize, grads: &mut [f64]) {
        let hw = h * w;
        let (pw, plane, len) = self.geometry(h, w);
        let g = self.widen(grad_out, self.out_channels, h, w);
        let (gw, gb) = grads[self.offset..self.end()].split_at_mut(self.num_weights());
        self.for_each_tap(pw, |idx, co, ci, off| {
            gw[idx] += dot(&g[co * len..][..len], &saved[ci * plane + off..][..len]);
        });
        for (co, gbi) in gb.iter_mut().enumerate() {
            *gbi += grad_out[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        saved: &[f64],
        grad_out: &[f64],
        h: usize,
        w: usize,
        grads: &mut [f64],
    ) -> Vec<f64> {
        self.backward_params(saved, grad_out, h, w, grads);
        self.backward_input(params, grad_out, h, w)
    }

    /// Input gradient only, without touching parameter gradients.
    pub fn backward_input(&self, params: &[f64], grad_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (pw, plane, len) = self.geometry(h, w);
        let g = self.widen(grad_out, self.out_channels, h, w);
        let wts = self.weights(params);
        let mut padded = vec![0.0; self.in_channels * plane];
        self.for_each_tap(pw, |idx, co, ci, off| {
            axpy(&mut padded[ci * plane + off..][..len], &g[co * len..][..len], wts[idx]);
        });
        let p = self.kernel / 2;
        self.narrow(&padded, self.in_channels, h, w, plane, p * pw + p)
    }
}

/// Fully connected layer `y = W x + b`, `W` stored `outputs x inputs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, offset: usize) -> Self {
        Self {
            inputs,
            outputs,
            offset,
        }
    }

    pub fn num_weights(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn num_params(&self) -> usize {
        self.num_weights() + self.outputs
    }

    pub fn end(&self) -> usize {
        self.offset + self.num_params()
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.offset..self.offset + self.num_weights()];
        let b = &params[self.offset + self.num_weights()..self.end()];
        (0..self.outputs)
            .map(|o| {
                b[o] + w[o * self.inputs..(o + 1) * self.inputs]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let w = &params[self.offset..self.offset + self.num_weights()];
        let (gw, gb) = grads[self.offset..self.end()].split_at_mut(self.num_weights());
        let mut grad_in = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let go = grad_out[o];
            gb[o] += go;
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut gw[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += go * x[i];
                grad_in[i] += go * row[i];
            }
        }
        grad_in
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by the positive support of the rectified output.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 mean pooling; spatial dims must be even.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * src[y * ow + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `(c, h, w)` map.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]; `h`, `w` are the pre-upsampling dims.
pub fn upsample2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// Smallest norm the normalization layer divides by.
pub const NORM_FLOOR: f64 = 1e-12;

/// Projects onto the unit sphere; a (near-)zero vector maps to the uniform
/// direction with zero gradient.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < NORM_FLOOR {
        let u = 1.0 / (x.len() as f64).sqrt();
        return (vec![u; x.len()], norm);
    }
    (x.iter().map(|v| v / norm).collect(), norm)
}

pub fn l2_normalize_backward(unit: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    if norm < NORM_FLOOR {
        return vec![0.0; unit.len()];
    }
    let dot: f64 = unit.iter().zip(grad).map(|(u, g)| u * g).sum();
    unit.iter()
        .zip(grad)
        .map(|(u, g)| (g - u * dot) / norm)
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a `{0, 1}` label, computed stably.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv2d, params: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut out = vec![0.0; conv.out_channels * h * w];
        let wts = &params[conv.offset..];
        for co in 0..conv.out_channels {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = params[conv.offset + conv.num_weights() + co];
                    for ci in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = ((co * conv.in_channels + ci) * conv.kernel + ky as usize)
                                    * conv.kernel
                                    + kx as usize;
                                acc += wts[wi] * x[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[co * h * w + y as usize * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let conv = Conv2d::new(2, 3, 3, 1);
        let params: Vec<f64> = (0..conv.end()).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let (out, _) = conv.forward(&params, &x, 5, 4);
        let want = naive_conv(&conv, &params, &x, 5, 4);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        // <up(x), y> == <x, up^T(y)>
        let x: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..2 * 4 * 6).map(|i| (i % 5) as f64).collect();
        let lhs: f64 = upsample2(&x, 2, 2, 3).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&upsample2_backward(&y, 2, 2, 3)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let p = avg_pool2(&y, 2, 4, 6);
        let lhs: f64 = p.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(&avg_pool2_backward(&x, 2, 4, 6)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn normalize_handles_zero() {
        let (u, n) = l2_normalize(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(n, 0.0);
        assert!((u.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let (u, _) = l2_normalize(&[3.0, 4.0]);
        assert_eq!(u, vec![0.6, 0.8]);
    }

    #[test]
    fn bce_values() {
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let logit = (0.25f64 / 0.75).ln();
        assert!((bce_with_logit(logit, 1.0) + 0.25f64.ln()).abs() < 1e-12);
        assert!(bce_with_logit(50.0, 1.0) < 1e-20);
        assert!(bce_with_logit(-800.0, 1.0).is_finite());
    }
}
