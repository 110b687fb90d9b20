//! Batched layer kernels on flat row-major buffers.
//!
//! Work is split with rayon into independent output rows or samples. Every
//! sum is computed by a single task in a fixed order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use super::graph::ConvGeometry;
use crate::tensor::Element;

/// Output positions `o` in `[lo, hi)` whose input tap `o*stride + k - pad`
/// falls inside `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k {
        ((extent - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unrolled patches of a batch: row `(ic, ky, kx)`, column `(b, oy, ox)`.
/// Taps falling in the padding stay zero.
fn im2col<T: Element>(x: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let (k, s, p) = (g.kernel_size, g.stride, g.padding);
    let (h, w, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let plane = oh * ow;
    let cols_len = batch * plane;
    let mut cols = vec![T::ZERO; g.in_channels * k * k * cols_len];
    cols.par_chunks_mut(cols_len).enumerate().for_each(|(j, row)| {
        let (ic, ky, kx) = (j / (k * k), (j / k) % k, j % k);
        let (ylo, yhi) = valid_range(oh, h, ky, s, p);
        let (xlo, xhi) = valid_range(ow, w, kx, s, p);
        for b in 0..batch {
            let x_c = &x[(b * g.in_channels + ic) * h * w..][..h * w];
            let dst = &mut row[b * plane..(b + 1) * plane];
            for oy in ylo..yhi {
                let iy = oy * s + ky - p;
                let x_row = &x_c[iy * w..(iy + 1) * w];
                let d_row = &mut dst[oy * ow..(oy + 1) * ow];
                for ox in xlo..xhi {
                    d_row[ox] = x_row[ox * s + kx - p];
                }
            }
        }
    });
    cols
}

/// `acc += a * x`, elementwise.
#[inline]
fn axpy<T: Element>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight independent partial sums, combined in a fixed
/// order.
#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut sum = T::ZERO;
    for l in lanes {
        sum += l;
    }
    for (x, y) in ra.iter().zip(rb) {
        sum += *x * *y;
    }
    sum
}

/// Convolution of `(N, C_in, H, W)` into `(N, C_out, H_out, W_out)`. Zero
/// weights (pruned kernels) are skipped.
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let cols = im2col(x, batch, g);
    let plane = g.out_h * g.out_w;
    let cols_len = batch * plane;
    let taps = g.in_channels * g.kernel_size * g.kernel_size;
    let mut out_mat = vec![T::ZERO; g.out_channels * cols_len];
    out_mat.par_chunks_mut(cols_len).enumerate().for_each(|(oc, row)| {
        let b = bias.map_or(T::ZERO, |b| b[oc]);
        row.iter_mut().for_each(|v| *v = b);
        for (j, &wv) in weight[oc * taps..(oc + 1) * taps].iter().enumerate() {
            if wv != T::ZERO {
                axpy(row, wv, &cols[j * cols_len..(j + 1) * cols_len]);
            }
        }
    });
    let mut out = vec![T::ZERO; batch * g.out_channels * plane];
    for (oc, row) in out_mat.chunks_exact(cols_len).enumerate() {
        for (b, src) in row.chunks_exact(plane).enumerate() {
            out[(b * g.out_channels + oc) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    grad_out: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
) -> ConvGrads<T> {
    let (k, s, p) = (g.kernel_size, g.stride, g.padding);
    let (h, w, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let plane = oh * ow;
    let cols_len = batch * plane;
    let taps = g.in_channels * k * k;
    let cols = im2col(x, batch, g);

    // grad_out as (C_out, N * plane)
    let mut g_mat = vec![T::ZERO; g.out_channels * cols_len];
    for (b, sample) in grad_out.chunks_exact(g.out_channels * plane).enumerate() {
        for (oc, src) in sample.chunks_exact(plane).enumerate() {
            g_mat[oc * cols_len + b * plane..][..plane].copy_from_slice(src);
        }
    }
    let mut gw = vec![T::ZERO; weight.len()];
    gw.par_chunks_mut(taps).enumerate().for_each(|(oc, gw_row)| {
        let g_row = &g_mat[oc * cols_len..(oc + 1) * cols_len];
        for (j, v) in gw_row.iter_mut().enumerate() {
            *v = dot(g_row, &cols[j * cols_len..(j + 1) * cols_len]);
        }
    });
    let bias: Vec<T> = g_mat
        .chunks_exact(cols_len)
        .map(|row| row.iter().fold(T::ZERO, |a, &v| a + v))
        .collect();

    let mut g_cols = vec![T::ZERO; taps * cols_len];
    g_cols.par_chunks_mut(cols_len).enumerate().for_each(|(j, row)| {
        for oc in 0..g.out_channels {
            let wv = weight[oc * taps + j];
            if wv != T::ZERO {
                axpy(row, wv, &g_mat[oc * cols_len..(oc + 1) * cols_len]);
            }
        }
    });
    let in_len = g.in_channels * h * w;
    let mut input = vec![T::ZERO; batch * in_len];
    input.par_chunks_mut(in_len).enumerate().for_each(|(b, gx)| {
        for j in 0..taps {
            let (ic, ky, kx) = (j / (k * k), (j / k) % k, j % k);
            let (ylo, yhi) = valid_range(oh, h, ky, s, p);
            let (xlo, xhi) = valid_range(ow, w, kx, s, p);
            let src = &g_cols[j * cols_len + b * plane..][..plane];
            let gx_c = &mut gx[ic * h * w..(ic + 1) * h * w];
            for oy in ylo..yhi {
                let iy = oy * s + ky - p;
                for ox in xlo..xhi {
                    gx_c[iy * w + ox * s + kx - p] += src[oy * ow + ox];
                }
            }
        }
    });
    ConvGrads {
        input,
        weight: gw,
        bias,
    }
}

pub(crate) fn linear_forward<T: Element>(
    x: &[T],
    batch: usize,
    in_f: usize,
    out_f: usize,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * out_f];
    for b in 0..batch {
        let xs = &x[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let row = &weight[o * in_f..(o + 1) * in_f];
            let mut acc = bias.map_or(T::ZERO, |bs| bs[o]);
            for (wv, xv) in row.iter().zip(xs) {
                acc += *wv * *xv;
            }
            out[b * out_f + o] = acc;
        }
    }
    out
}

pub(crate) fn linear_backward<T: Element>(
    x: &[T],
    grad_out: &[T],
    batch: usize,
    in_f: usize,
    out_f: usize,
    weight: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::ZERO; batch * in_f];
    let mut gw = vec![T::ZERO; out_f * in_f];
    let mut gb = vec![T::ZERO; out_f];
    for b in 0..batch {
        let xs = &x[b * in_f..(b + 1) * in_f];
        let gxs = &mut gx[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let gv = grad_out[b * out_f + o];
            gb[o] += gv;
            let row = &weight[o * in_f..(o + 1) * in_f];
            let grow = &mut gw[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                gxs[i] += gv * row[i];
                grow[i] += gv * xs[i];
            }
        }
    }
    (gx, gw, gb)
}

/// Returns pooled values and the in-plane index of each maximum.
pub(crate) fn maxpool_forward<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    k: usize,
    s: usize,
) -> (Vec<T>, Vec<u32>) {
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for plane in x.chunks_exact(h * w).take(planes) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = oy * s * w + ox * s;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = (oy * s + ky) * w + ox * s + kx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                }
                out.push(plane[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Element>(
    grad_out: &[T],
    argmax: &[u32],
    planes: usize,
    in_plane: usize,
    out_plane: usize,
) -> Vec<T> {
    let mut gx = vec![T::ZERO; planes * in_plane];
    for p in 0..planes {
        for o in 0..out_plane {
            let i = p * out_plane + o;
            gx[p * in_plane + argmax[i] as usize] += grad_out[i];
        }
    }
    gx
}

pub(crate) fn global_avg_pool_forward<T: Element>(x: &[T], planes: usize, area: usize) -> Vec<T> {
    x.chunks_exact(area)
        .take(planes)
        .map(|plane| {
            let s: f64 = plane.iter().map(|v| v.to_f64()).sum();
            T::from_f64(s / area as f64)
        })
        .collect()
}

pub(crate) fn global_avg_pool_backward<T: Element>(grad_out: &[T], area: usize) -> Vec<T> {
    let scale = T::from_f64(1.0 / area as f64);
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, area))
        .collect()
}

pub(crate) struct BatchNormCache<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batch norm over `(N, C, area)`.
pub(crate) fn batchnorm_train_forward<T: Element>(
    x: &[T],
    batch: usize,
    channels: usize,
    area: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, BatchNormCache<T>) {
    let count = (batch * area) as f64;
    let mut mean = vec![0f64; channels];
    let mut var = vec![0f64; channels];
    for b in 0..batch {
        for c in 0..channels {
            let plane = &x[(b * channels + c) * area..(b * channels + c + 1) * area];
            mean[c] += plane.iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..batch {
        for c in 0..channels {
            let plane = &x[(b * channels + c) * area..(b * channels + c + 1) * area];
            var[c] += plane
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean[c];
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::ZERO; x.len()];
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let range = (b * channels + c) * area..(b * channels + c + 1) * area;
            for i in range {
                let xh = (x[i].to_f64() - mean[c]) * inv_std[c];
                x_hat[i] = T::from_f64(xh);
                out[i] = gamma[c] * x_hat[i] + beta[c];
            }
        }
    }
    (
        out,
        BatchNormCache {
            x_hat,
            inv_std,
            mean,
            var,
        },
    )
}

pub(crate) struct BatchNormRunning<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub mean: &'a [T],
    pub var: &'a [T],
    pub eps: f64,
}

pub(crate) fn batchnorm_eval_forward<T: Element>(
    x: &[T],
    channels: usize,
    area: usize,
    bn: &BatchNormRunning<'_, T>,
) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (i, (o, v)) in out.iter_mut().zip(x).enumerate() {
        let c = (i / area) % channels;
        let inv = 1.0 / (bn.var[c].to_f64() + bn.eps).sqrt();
        let xh = (v.to_f64() - bn.mean[c].to_f64()) * inv;
        *o = bn.gamma[c] * T::from_f64(xh) + bn.beta[c];
    }
    out
}

pub(crate) fn batchnorm_backward<T: Element>(
    grad_out: &[T],
    batch: usize,
    channels: usize,
    area: usize,
    gamma: &[T],
    cache: &BatchNormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = (batch * area) as f64;
    let mut sum_g = vec![0f64; channels];
    let mut sum_gx = vec![0f64; channels];
    for b in 0..batch {
        for c in 0..channels {
            let range = (b * channels + c) * area..(b * channels + c + 1) * area;
            for i in range {
                let g = grad_out[i].to_f64();
                sum_g[c] += g;
                sum_gx[c] += g * cache.x_hat[i].to_f64();
            }
        }
    }
    let mut gx = vec![T::ZERO; grad_out.len()];
    for b in 0..batch {
        for c in 0..channels {
            let scale = gamma[c].to_f64() * cache.inv_std[c] / count;
            let range = (b * channels + c) * area..(b * channels + c + 1) * area;
            for i in range {
                let g = grad_out[i].to_f64();
                let xh = cache.x_hat[i].to_f64();
                gx[i] = T::from_f64(scale * (count * g - sum_g[c] - xh * sum_gx[c]));
            }
        }
    }
    let ggamma = sum_gx.iter().map(|&v| T::from_f64(v)).collect();
    let gbeta = sum_g.iter().map(|&v| T::from_f64(v)).collect();
    (gx, ggamma, gbeta)
}
