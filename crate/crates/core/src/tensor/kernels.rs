//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Convolution lowers to im2col + GEMM. Columns are built for a chunk of
//! samples at a time so the scratch buffer stays bounded regardless of batch
//! size; every reduction runs in a fixed order, so results are bit-stable.

use crate::error::{shape_err, Result};

/// Upper bound on scratch column elements per convolution chunk.
const COL_BUDGET: usize = 1 << 22;

/// `c = a·b + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents cover every element matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 4], weight: [usize; 4], stride: usize, padding: usize) -> Result<Self> {
        let [n, c, h, w] = input;
        let [o, wc, kh, kw] = weight;
        if wc != c {
            return Err(shape_err(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(shape_err("conv2d: stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            out_channels: o,
            kh,
            kw,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn chunk(&self) -> usize {
        let per_sample = self.patch_len() * self.out_hw();
        (COL_BUDGET / per_sample.max(1)).clamp(1, self.n.max(1))
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if it
    /// lands inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }

    /// Fills `cols[(ci·kh + ki)·kw + kj][s·HW + p]` for samples `s0..s0+ns`.
    fn im2col(&self, input: &[f64], s0: usize, ns: usize, cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let hw = oh * ow;
        let ncols = ns * hw;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for s in 0..ns {
                        let plane = &input[((s0 + s) * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..oh {
                            let out = &mut dst[s * hw + oy * ow..][..ow];
                            match self.src(oy, ki, self.h) {
                                None => out.fill(0.0),
                                Some(iy) => {
                                    let line = &plane[iy * self.w..][..self.w];
                                    for (ox, v) in out.iter_mut().enumerate() {
                                        *v = self.src(ox, kj, self.w).map_or(0.0, |ix| line[ix]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back into the input gradient.
    fn col2im(&self, cols: &[f64], s0: usize, ns: usize, grad_in: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let hw = oh * ow;
        let ncols = ns * hw;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for s in 0..ns {
                        let plane = &mut grad_in[((s0 + s) * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..oh {
                            let Some(iy) = self.src(oy, ki, self.h) else { continue };
                            let vals = &src[s * hw + oy * ow..][..ow];
                            for (ox, v) in vals.iter().enumerate() {
                                if let Some(ix) = self.src(ox, kj, self.w) {
                                    plane[iy * self.w + ix] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. Returns `[n, o, out_h, out_w]` values.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = g.out_hw();
    let kk = g.patch_len();
    let o = g.out_channels;
    let mut out = vec![0.0; g.n * o * hw];
    let chunk = g.chunk();
    let mut cols = vec![0.0; kk * chunk * hw];
    let mut tmp = vec![0.0; o * chunk * hw];
    let mut s0 = 0;
    while s0 < g.n {
        let ns = chunk.min(g.n - s0);
        let ncols = ns * hw;
        g.im2col(input, s0, ns, &mut cols[..kk * ncols]);
        gemm(o, kk, ncols, weight, kk, 1, &cols, ncols, 1, 0.0, &mut tmp, ncols, 1);
        for s in 0..ns {
            for oc in 0..o {
                let dst = &mut out[((s0 + s) * o + oc) * hw..][..hw];
                let src = &tmp[oc * ncols + s * hw..][..hw];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bias[oc];
                }
            }
        }
        s0 += ns;
    }
    out
}

/// Gradients `(d_input, d_weight, d_bias)` of a convolution.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = g.out_hw();
    let kk = g.patch_len();
    let o = g.out_channels;
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_b = vec![0.0; o];
    for s in 0..g.n {
        for (oc, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out[(s * o + oc) * hw..][..hw].iter().sum::<f64>();
        }
    }
    let chunk = g.chunk();
    let mut cols = vec![0.0; kk * chunk * hw];
    let mut gcols = vec![0.0; if need_input_grad { kk * chunk * hw } else { 0 }];
    let mut gout = vec![0.0; o * chunk * hw];
    let mut s0 = 0;
    while s0 < g.n {
        let ns = chunk.min(g.n - s0);
        let ncols = ns * hw;
        g.im2col(input, s0, ns, &mut cols[..kk * ncols]);
        for s in 0..ns {
            for oc in 0..o {
                gout[oc * ncols + s * hw..][..hw]
                    .copy_from_slice(&grad_out[((s0 + s) * o + oc) * hw..][..hw]);
            }
        }
        // dW += G · colsᵀ
        gemm(o, ncols, kk, &gout, ncols, 1, &cols, 1, ncols, 1.0, &mut grad_w, kk, 1);
        if need_input_grad {
            // dcols = Wᵀ · G
            gemm(kk, o, ncols, weight, 1, kk, &gout, ncols, 1, 0.0, &mut gcols, ncols, 1);
            g.col2im(&gcols[..kk * ncols], s0, ns, &mut grad_in);
        }
        s0 += ns;
    }
    (grad_in, grad_w, grad_b)
}

/// Output spatial extent of a pooling window, or an error when the window
/// does not tile the input exactly.
pub fn pool_extent(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 || window > extent || (extent - window) % stride != 0 {
        return Err(shape_err(format!(
            "maxpool2d: window {window} / stride {stride} does not tile extent {extent}"
        )));
    }
    Ok((extent - window) / stride + 1)
}

/// Max pooling; returns output values and, for each output, the flat input
/// index that won (first occurrence in row-major order on ties).
pub fn maxpool2d_forward(
    dims: [usize; 4],
    input: &[f64],
    window: usize,
    stride: usize,
) -> Result<(Vec<f64>, Vec<usize>, [usize; 4])> {
    let [n, c, h, w] = dims;
    let oh = pool_extent(h, window, stride)?;
    let ow = pool_extent(w, window, stride)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax, [n, c, oh, ow]))
}

pub fn maxpool2d_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; input_len];
    for (&idx, g) in argmax.iter().zip(grad_out) {
        grad[idx] += g;
    }
    grad
}

pub fn upsample_nearest2d_forward(dims: [usize; 4], input: &[f64], factor: usize) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..][..w];
            for (ox, v) in dst[oy * ow..][..ow].iter_mut().enumerate() {
                *v = row[ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest2d_backward(dims: [usize; 4], grad_out: &[f64], factor: usize) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut grad = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * oh * ow..][..oh * ow];
        let dst = &mut grad[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    grad
}

/// Per-channel mean and biased variance over `(n, h, w)`.
pub fn channel_moments(dims: [usize; 4], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += input[(i * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for i in 0..n {
            q += input[(i * c + ch) * hw..][..hw]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// Applies `gamma·(x − mean)/sqrt(var + eps) + beta`; returns the output and
/// the normalized values `x̂`.
pub fn batch_norm_apply(
    dims: [usize; 4],
    input: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let mut out = vec![0.0; input.len()];
    let mut xhat = vec![0.0; input.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for k in off..off + hw {
                let z = (input[k] - mean[ch]) * inv_std[ch];
                xhat[k] = z;
                out[k] = gamma[ch] * z + beta[ch];
            }
        }
    }
    (out, xhat)
}

/// Backward of batch normalization. With `batch_stats` the mean and variance
/// are functions of the input (training mode); otherwise they are constants.
pub fn batch_norm_backward(
    dims: [usize; 4],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    grad_out: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut gx = vec![0.0; xhat.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for k in off..off + hw {
                sum_dy += grad_out[k];
                sum_dy_xhat += grad_out[k] * xhat[k];
            }
        }
        ggamma[ch] = sum_dy_xhat;
        gbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch];
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for k in off..off + hw {
                gx[k] = if batch_stats {
                    scale * (grad_out[k] - sum_dy / count - xhat[k] * sum_dy_xhat / count)
                } else {
                    scale * grad_out[k]
                };
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// `input[n,d] · weight[d,m] + bias[m]`.
pub fn linear_forward(n: usize, d: usize, m: usize, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    gemm(n, d, m, input, d, 1, weight, m, 1, 1.0, &mut out, m, 1);
    out
}

pub fn linear_backward(
    n: usize,
    d: usize,
    m: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * d];
    let mut gw = vec![0.0; d * m];
    let mut gb = vec![0.0; m];
    // dX = dY · Wᵀ
    gemm(n, m, d, grad_out, m, 1, weight, 1, m, 0.0, &mut gx, d, 1);
    // dW = Xᵀ · dY
    gemm(d, n, m, input, 1, d, grad_out, m, 1, 0.0, &mut gw, m, 1);
    for row in grad_out.chunks_exact(m) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    (gx, gw, gb)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_strides() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| f64::from(v) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ (3x2) times c-shaped 2x4, reading `a` through column strides.
        let mut d = vec![0.0; 12];
        gemm(3, 2, 4, &a, 1, 3, &c, 4, 1, 0.0, &mut d, 4, 1);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * c[k * 4 + j]).sum();
                assert!((d[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_extent_rejects_ragged_input() {
        assert_eq!(pool_extent(4, 2, 2).unwrap(), 2);
        assert!(pool_extent(5, 2, 2).is_err());
        assert!(pool_extent(1, 2, 2).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
