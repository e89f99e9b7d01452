//! Forward and backward kernels.
//!
//! Every differentiable operation on the [`Tape`](super::Tape) is a thin
//! wrapper around a pair of functions in this module. Convolutions follow the
//! cross-correlation convention (no kernel flip) and resizing uses
//! half-pixel centres (align-corners = false).

use super::{expect_rank, same_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Elementwise product of two equally shaped tensors.
pub fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::from_parts(a.shape().to_vec(), data);
    out.ensure_finite("hadamard")?;
    Ok(out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::from_parts(a.shape().to_vec(), data);
    out.ensure_finite("add")?;
    Ok(out)
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

/// One output coordinate's two source taps and their weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Half-pixel-centre sampling table for resizing an axis of length `src`
/// to `dst`.
pub(crate) fn resize_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == hi { 0.0 } else { pos - lo as f64 };
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear resize of axes 1 and 2 of a tensor of rank >= 3.
///
/// Axes after the second spatial axis are carried along untouched, which is
/// how the query dimensions of a 4D correlation block are upsampled.
pub fn bilinear_resize<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::ZeroSize(out_h, out_w));
    }
    let shape = t.shape();
    if shape.len() < 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "resize needs rank >= 3".into(),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let inner: usize = shape[3..].iter().product();
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let src = t.data();
    let mut out = vec![T::zero(); c * out_h * out_w * inner];
    for ch in 0..c {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let dst = ((ch * out_h + oy) * out_w + ox) * inner;
                let corners = [
                    (ry.lo, rx.lo, ry.w_lo * rx.w_lo),
                    (ry.lo, rx.hi, ry.w_lo * rx.w_hi),
                    (ry.hi, rx.lo, ry.w_hi * rx.w_lo),
                    (ry.hi, rx.hi, ry.w_hi * rx.w_hi),
                ];
                for (sy, sx, wt) in corners {
                    if wt == 0.0 {
                        continue;
                    }
                    let wt = T::lit(wt);
                    let s = ((ch * h + sy) * w + sx) * inner;
                    for k in 0..inner {
                        out[dst + k] = out[dst + k] + wt * src[s + k];
                    }
                }
            }
        }
    }
    let mut shape_out = shape.to_vec();
    shape_out[1] = out_h;
    shape_out[2] = out_w;
    Ok(Tensor::from_parts(shape_out, out))
}

pub(crate) fn bilinear_resize_backward<T: Real>(grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (grad.shape()[1], grad.shape()[2]);
    let inner: usize = in_shape[3..].iter().product();
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let g = grad.data();
    let mut dx = vec![T::zero(); in_shape.iter().product()];
    for ch in 0..c {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let src = ((ch * out_h + oy) * out_w + ox) * inner;
                let corners = [
                    (ry.lo, rx.lo, ry.w_lo * rx.w_lo),
                    (ry.lo, rx.hi, ry.w_lo * rx.w_hi),
                    (ry.hi, rx.lo, ry.w_hi * rx.w_lo),
                    (ry.hi, rx.hi, ry.w_hi * rx.w_hi),
                ];
                for (sy, sx, wt) in corners {
                    if wt == 0.0 {
                        continue;
                    }
                    let wt = T::lit(wt);
                    let d = ((ch * h + sy) * w + sx) * inner;
                    for k in 0..inner {
                        dx[d + k] = dx[d + k] + wt * g[src + k];
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

// ---------------------------------------------------------------------------
// 2D convolution
// ---------------------------------------------------------------------------

/// `dst += a * src` elementwise.
#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + a * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `[a][b]` to `[b][a]` for each of `n` leading blocks.
fn transpose_blocks<T: Real>(x: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for blk in 0..n {
        let base = blk * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = x[base + i * b + j];
            }
        }
    }
    out
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < k {
        return Err(Error::InvalidShape {
            shape: vec![len, k],
            reason: "kernel larger than padded input".into(),
        });
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

/// Range of output indices whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // in = o * stride + k - pad must satisfy 0 <= in < len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Patch matrix `[cin * kh * kw][ho * wo]`; taps outside the input are 0.
fn im2col<T: Real>(x: &[T], [cin, h, w]: [usize; 3], [kh, kw]: [usize; 2], stride: usize, pad: usize, [ho, wo]: [usize; 2]) -> Vec<T> {
    let np = ho * wo;
    let mut cols = vec![T::zero(); cin * kh * kw * np];
    for ci in 0..cin {
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(wo, w, kx, stride, pad);
                let base = ((ci * kh + ky) * kw + kx) * np;
                for oy in oy0..oy1 {
                    let row_in = (ci * h + oy * stride + ky - pad) * w;
                    let dst = base + oy * wo;
                    for ox in ox0..ox1 {
                        cols[dst + ox] = x[row_in + ox * stride + kx - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<T: Real>(cols: &[T], [cin, h, w]: [usize; 3], [kh, kw]: [usize; 2], stride: usize, pad: usize, [ho, wo]: [usize; 2]) -> Vec<T> {
    let np = ho * wo;
    let mut x = vec![T::zero(); cin * h * w];
    for ci in 0..cin {
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(wo, w, kx, stride, pad);
                let base = ((ci * kh + ky) * kw + kx) * np;
                for oy in oy0..oy1 {
                    let row_in = (ci * h + oy * stride + ky - pad) * w;
                    let src = base + oy * wo;
                    for ox in ox0..ox1 {
                        let i = row_in + ox * stride + kx - pad;
                        x[i] = x[i] + cols[src + ox];
                    }
                }
            }
        }
    }
    x
}

/// 2D cross-correlation of `input` (`Cin x H x W`) with `kernel`
/// (`Cout x Cin x kh x kw`).
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_bias(input, kernel, None, stride, pad)
}

pub(crate) fn conv2d_bias<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    expect_rank(input.shape(), 3, "conv2d input")?;
    expect_rank(kernel.shape(), 4, "conv2d kernel")?;
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kc, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kc != cin {
        return Err(Error::ChannelMismatch {
            input: cin,
            kernel: kc,
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::EvenKernel(kh, kw));
    }
    if stride == 0 {
        return Err(Error::InvalidShape {
            shape: vec![stride],
            reason: "stride must be positive".into(),
        });
    }
    if let Some(b) = bias {
        same_shape(&[cout], b.shape())?;
    }
    let ho = conv_out(h, kh, stride, pad)?;
    let wo = conv_out(w, kw, stride, pad)?;
    let np = ho * wo;
    let cols = im2col(input.data(), [cin, h, w], [kh, kw], stride, pad, [ho, wo]);
    let k = kernel.data();
    let taps = cin * kh * kw;
    let mut out = vec![T::zero(); cout * np];
    for co in 0..cout {
        let row = &mut out[co * np..(co + 1) * np];
        if let Some(b) = bias {
            row.fill(b.data()[co]);
        }
        for t in 0..taps {
            let wv = k[co * taps + t];
            if wv != T::zero() {
                axpy(row, wv, &cols[t * np..(t + 1) * np]);
            }
        }
    }
    let out = Tensor::from_parts(vec![cout, ho, wo], out);
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of [`conv2d_bias`] with respect to input, kernel and bias.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ho, wo) = (grad.shape()[1], grad.shape()[2]);
    let np = ho * wo;
    let taps = cin * kh * kw;
    let cols = im2col(input.data(), [cin, h, w], [kh, kw], stride, pad, [ho, wo]);
    let k = kernel.data();
    let g = grad.data();
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); cout];
    let mut dcols = vec![T::zero(); cols.len()];
    for co in 0..cout {
        let gs = &g[co * np..(co + 1) * np];
        db[co] = gs.iter().copied().sum();
        for t in 0..taps {
            let col = t * np..(t + 1) * np;
            dk[co * taps + t] = dot(gs, &cols[col.clone()]);
            axpy(&mut dcols[col], k[co * taps + t], gs);
        }
    }
    let dx = col2im(&dcols, [cin, h, w], [kh, kw], stride, pad, [ho, wo]);
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![cout], db),
    )
}

// ---------------------------------------------------------------------------
// Center-pivot 4D convolution
// ---------------------------------------------------------------------------

/// Output shape of a center-pivot convolution over a
/// `Cin x Hq x Wq x Hs x Ws` block.
pub(crate) fn center_pivot_shape(
    x_shape: &[usize],
    cout: usize,
    support_stride: usize,
) -> [usize; 5] {
    let hs = (x_shape[3] - 1) / support_stride + 1;
    let ws = (x_shape[4] - 1) / support_stride + 1;
    [cout, x_shape[1], x_shape[2], hs, ws]
}

/// Center-pivot 4D convolution.
///
/// The output is the sum of two 2D convolutions: one over the query axes
/// applied to the support positions kept by `support_stride`, and one over
/// the support axes (with that stride) applied at every query position.
/// Together they equal a dense 4D convolution whose kernel is nonzero only
/// on taps where the query offset or the support offset is the centre.
pub fn center_pivot<T: Real>(
    x: &Tensor<T>,
    w_query: &Tensor<T>,
    w_support: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    support_stride: usize,
) -> Result<Tensor<T>> {
    expect_rank(x.shape(), 5, "center-pivot input")?;
    expect_rank(w_query.shape(), 4, "query kernel")?;
    expect_rank(w_support.shape(), 4, "support kernel")?;
    let [cin, hq, wq, hs, ws] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
    let cout = w_query.shape()[0];
    if w_support.shape()[0] != cout {
        return Err(Error::ShapeMismatch {
            expected: w_query.shape().to_vec(),
            got: w_support.shape().to_vec(),
        });
    }
    for wk in [w_query, w_support] {
        if wk.shape()[1] != cin {
            return Err(Error::ChannelMismatch {
                input: cin,
                kernel: wk.shape()[1],
            });
        }
        if wk.shape()[2] % 2 == 0 || wk.shape()[3] % 2 == 0 {
            return Err(Error::EvenKernel(wk.shape()[2], wk.shape()[3]));
        }
    }
    if support_stride == 0 {
        return Err(Error::InvalidShape {
            shape: vec![0],
            reason: "support stride must be positive".into(),
        });
    }
    if let Some(b) = bias {
        same_shape(&[cout], b.shape())?;
    }
    let out_shape = center_pivot_shape(x.shape(), cout, support_stride);
    let (hso, wso) = (out_shape[3], out_shape[4]);
    let so = hso * wso;
    let nq = hq * wq;
    let mut out = vec![T::zero(); cout * nq * so];
    if let Some(b) = bias {
        for co in 0..cout {
            out[co * nq * so..(co + 1) * nq * so]
                .iter_mut()
                .for_each(|v| *v = b.data()[co]);
        }
    }

    // (a) query-axis convolution at the kept support positions
    let pruned = prune_support(x.data(), cin, nq, hs, ws, support_stride, hso, wso);
    let (kqh, kqw) = (w_query.shape()[2], w_query.shape()[3]);
    let (pqh, pqw) = (kqh / 2, kqw / 2);
    let wqd = w_query.data();
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kqh {
                let (y0, y1) = valid_range(hq, hq, ky, 1, pqh);
                for kx in 0..kqw {
                    let wv = wqd[((co * cin + ci) * kqh + ky) * kqw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = valid_range(wq, wq, kx, 1, pqw);
                    if x1 <= x0 {
                        continue;
                    }
                    // (qx, s) is contiguous on both sides
                    let run = (x1 - x0) * so;
                    for qy in y0..y1 {
                        let iy = qy + ky - pqh;
                        let src = ((ci * hq + iy) * wq + x0 + kx - pqw) * so;
                        let dst = ((co * hq + qy) * wq + x0) * so;
                        axpy(&mut out[dst..dst + run], wv, &pruned[src..src + run]);
                    }
                }
            }
        }
    }

    // (b) support-axis convolution at every query position, computed with
    // the query index innermost
    let (ksh, ksw) = (w_support.shape()[2], w_support.shape()[3]);
    let (psh, psw) = (ksh / 2, ksw / 2);
    let wsd = w_support.data();
    let xt = transpose_blocks(x.data(), cin, nq, hs * ws);
    let mut acc = vec![T::zero(); cout * so * nq];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..ksh {
                let (y0, y1) = valid_range(hso, hs, ky, support_stride, psh);
                for kx in 0..ksw {
                    let wv = wsd[((co * cin + ci) * ksh + ky) * ksw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = valid_range(wso, ws, kx, support_stride, psw);
                    for oy in y0..y1 {
                        let iy = oy * support_stride + ky - psh;
                        for ox in x0..x1 {
                            let ix = ox * support_stride + kx - psw;
                            let src = (ci * hs * ws + iy * ws + ix) * nq;
                            let dst = (co * so + oy * wso + ox) * nq;
                            axpy(&mut acc[dst..dst + nq], wv, &xt[src..src + nq]);
                        }
                    }
                }
            }
        }
    }
    let acc = transpose_blocks(&acc, cout, so, nq);
    out.iter_mut().zip(&acc).for_each(|(o, &a)| *o = *o + a);
    let out = Tensor::from_parts(out_shape.to_vec(), out);
    out.ensure_finite("center_pivot")?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn prune_support<T: Real>(
    x: &[T],
    cin: usize,
    nq: usize,
    hs: usize,
    ws: usize,
    stride: usize,
    hso: usize,
    wso: usize,
) -> Vec<T> {
    if stride == 1 {
        return x.to_vec();
    }
    let mut out = Vec::with_capacity(cin * nq * hso * wso);
    for cq in 0..cin * nq {
        let base = cq * hs * ws;
        for oy in 0..hso {
            for ox in 0..wso {
                out.push(x[base + oy * stride * ws + ox * stride]);
            }
        }
    }
    out
}

/// Gradients of [`center_pivot`]: `(dx, d_query_kernel, d_support_kernel, d_bias)`.
pub(crate) fn center_pivot_backward<T: Real>(
    x: &Tensor<T>,
    w_query: &Tensor<T>,
    w_support: &Tensor<T>,
    grad: &Tensor<T>,
    support_stride: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let [cin, hq, wq, hs, ws] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
    let cout = grad.shape()[0];
    let (hso, wso) = (grad.shape()[3], grad.shape()[4]);
    let so = hso * wso;
    let nq = hq * wq;
    let g = grad.data();
    let xd = x.data();

    let mut db = vec![T::zero(); cout];
    for (co, slot) in db.iter_mut().enumerate() {
        *slot = g[co * nq * so..(co + 1) * nq * so].iter().copied().sum();
    }

    // (a) query path
    let pruned = prune_support(xd, cin, nq, hs, ws, support_stride, hso, wso);
    let mut d_pruned = vec![T::zero(); pruned.len()];
    let (kqh, kqw) = (w_query.shape()[2], w_query.shape()[3]);
    let (pqh, pqw) = (kqh / 2, kqw / 2);
    let wqd = w_query.data();
    let mut dwq = vec![T::zero(); wqd.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kqh {
                let (y0, y1) = valid_range(hq, hq, ky, 1, pqh);
                for kx in 0..kqw {
                    let widx = ((co * cin + ci) * kqh + ky) * kqw + kx;
                    let wv = wqd[widx];
                    let (x0, x1) = valid_range(wq, wq, kx, 1, pqw);
                    let mut acc = T::zero();
                    if x1 > x0 {
                        let run = (x1 - x0) * so;
                        for qy in y0..y1 {
                            let iy = qy + ky - pqh;
                            let src = ((ci * hq + iy) * wq + x0 + kx - pqw) * so;
                            let dst = ((co * hq + qy) * wq + x0) * so;
                            let gs = &g[dst..dst + run];
                            acc = acc + dot(gs, &pruned[src..src + run]);
                            axpy(&mut d_pruned[src..src + run], wv, gs);
                        }
                    }
                    dwq[widx] = acc;
                }
            }
        }
    }
    let mut dx = vec![T::zero(); xd.len()];
    if support_stride == 1 {
        dx.copy_from_slice(&d_pruned);
    } else {
        let mut i = 0;
        for cq in 0..cin * nq {
            let base = cq * hs * ws;
            for oy in 0..hso {
                for ox in 0..wso {
                    dx[base + oy * support_stride * ws + ox * support_stride] = d_pruned[i];
                    i += 1;
                }
            }
        }
    }

    // (b) support path, query index innermost
    let (ksh, ksw) = (w_support.shape()[2], w_support.shape()[3]);
    let (psh, psw) = (ksh / 2, ksw / 2);
    let wsd = w_support.data();
    let mut dws = vec![T::zero(); wsd.len()];
    let xt = transpose_blocks(xd, cin, nq, hs * ws);
    let gt = transpose_blocks(g, cout, nq, so);
    let mut dxt = vec![T::zero(); xt.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..ksh {
                let (y0, y1) = valid_range(hso, hs, ky, support_stride, psh);
                for kx in 0..ksw {
                    let widx = ((co * cin + ci) * ksh + ky) * ksw + kx;
                    let wv = wsd[widx];
                    let (x0, x1) = valid_range(wso, ws, kx, support_stride, psw);
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * support_stride + ky - psh;
                        for ox in x0..x1 {
                            let ix = ox * support_stride + kx - psw;
                            let si = (ci * hs * ws + iy * ws + ix) * nq;
                            let gi = (co * so + oy * wso + ox) * nq;
                            let gs = &gt[gi..gi + nq];
                            acc = acc + dot(gs, &xt[si..si + nq]);
                            axpy(&mut dxt[si..si + nq], wv, gs);
                        }
                    }
                    dws[widx] = acc;
                }
            }
        }
    }
    let dxs = transpose_blocks(&dxt, cin, hs * ws, nq);
    dx.iter_mut().zip(&dxs).for_each(|(d, &v)| *d = *d + v);
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w_query.shape().to_vec(), dwq),
        Tensor::from_parts(w_support.shape().to_vec(), dws),
        Tensor::from_parts(vec![cout], db),
    )
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

pub(crate) struct GroupNormSaved<T> {
    pub normalized: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn group_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormSaved<T>)> {
    let c = x.shape()[0];
    same_shape(&[c], gamma.shape())?;
    same_shape(&[c], beta.shape())?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{c} channels not divisible into {groups} groups"),
        });
    }
    let spatial = x.len() / c;
    let per_group = c / groups * spatial;
    let xd = x.data();
    let mut normalized = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let mut rstd = Vec::with_capacity(groups);
    for gi in 0..groups {
        let range = gi * per_group..(gi + 1) * per_group;
        let n = per_group as f64;
        let mean = xd[range.clone()].iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = xd[range.clone()]
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(T::lit(r));
        for i in range {
            let ch = i / spatial;
            let nv = T::lit((xd[i].as_f64() - mean) * r);
            normalized[i] = nv;
            out[i] = nv * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        GroupNormSaved { normalized, rstd },
    ))
}

pub(crate) fn group_norm_backward<T: Real>(
    saved: &GroupNormSaved<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let spatial = grad.len() / c;
    let per_group = c / groups * spatial;
    let g = grad.data();
    let xh = &saved.normalized;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..g.len() {
        let ch = i / spatial;
        dgamma[ch] = dgamma[ch] + g[i] * xh[i];
        dbeta[ch] = dbeta[ch] + g[i];
    }
    let mut dx = vec![T::zero(); g.len()];
    for gi in 0..groups {
        let range = gi * per_group..(gi + 1) * per_group;
        let n = T::lit(per_group as f64);
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in range.clone() {
            let d = g[i] * gamma.data()[i / spatial];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xh[i];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        let r = saved.rstd[gi];
        for i in range {
            let d = g[i] * gamma.data()[i / spatial];
            dx[i] = r * (d - mean_d - xh[i] * mean_dx);
        }
    }
    (
        Tensor::from_parts(grad.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

// ---------------------------------------------------------------------------
// Pooling, concatenation, softmax, losses
// ---------------------------------------------------------------------------

/// Mean over every axis after the first `keep` axes.
pub(crate) fn mean_trailing<T: Real>(x: &Tensor<T>, keep: usize) -> Result<Tensor<T>> {
    if keep == 0 || keep > x.ndim() {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("cannot keep {keep} leading axes"),
        });
    }
    let outer: usize = x.shape()[..keep].iter().product();
    let inner = x.len() / outer;
    let n = T::lit(inner as f64);
    let data = x
        .data()
        .chunks(inner)
        .map(|c| c.iter().copied().sum::<T>() / n)
        .collect();
    Ok(Tensor::from_parts(x.shape()[..keep].to_vec(), data))
}

pub(crate) fn mean_trailing_backward<T: Real>(grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let outer = grad.len();
    let total: usize = in_shape.iter().product();
    let inner = total / outer;
    let n = T::lit(inner as f64);
    let mut dx = Vec::with_capacity(total);
    for &g in grad.data() {
        dx.extend(std::iter::repeat_n(g / n, inner));
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Average pooling of the two support axes of a 5D block by integer factors.
pub(crate) fn pool_support<T: Real>(x: &Tensor<T>, fy: usize, fx: usize) -> Result<Tensor<T>> {
    expect_rank(x.shape(), 5, "support pooling input")?;
    let s = x.shape();
    if fy == 0 || fx == 0 || s[3] % fy != 0 || s[4] % fx != 0 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("support dims not divisible by {fy}x{fx}"),
        });
    }
    let (hs, ws) = (s[3], s[4]);
    let (ho, wo) = (hs / fy, ws / fx);
    let outer = s[0] * s[1] * s[2];
    let n = T::lit((fy * fx) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); outer * ho * wo];
    for o in 0..outer {
        for y in 0..hs {
            for xx in 0..ws {
                let d = o * ho * wo + (y / fy) * wo + xx / fx;
                out[d] = out[d] + xd[o * hs * ws + y * ws + xx];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v / n);
    Ok(Tensor::from_parts(vec![s[0], s[1], s[2], ho, wo], out))
}

pub(crate) fn pool_support_backward<T: Real>(
    grad: &Tensor<T>,
    in_shape: &[usize],
    fy: usize,
    fx: usize,
) -> Tensor<T> {
    let (hs, ws) = (in_shape[3], in_shape[4]);
    let (ho, wo) = (hs / fy, ws / fx);
    let outer = in_shape[0] * in_shape[1] * in_shape[2];
    let n = T::lit((fy * fx) as f64);
    let g = grad.data();
    let mut dx = vec![T::zero(); outer * hs * ws];
    for o in 0..outer {
        for y in 0..hs {
            for xx in 0..ws {
                dx[o * hs * ws + y * ws + xx] = g[o * ho * wo + (y / fy) * wo + xx / fx] / n;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::from_parts(shape, data))
}

/// Per-pixel softmax across the channel axis of a `C x H x W` map.
pub fn softmax_channels<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(t.shape(), 3, "softmax input")?;
    let c = t.shape()[0];
    let hw = t.len() / c;
    let x = t.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..hw {
        let m = (0..c).map(|ch| x[ch * hw + p]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for ch in 0..c {
            let e = (x[ch * hw + p] - m).exp();
            out[ch * hw + p] = e;
            z = z + e;
        }
        for ch in 0..c {
            out[ch * hw + p] = out[ch * hw + p] / z;
        }
    }
    let out = Tensor::from_parts(t.shape().to_vec(), out);
    out.ensure_finite("softmax_channels")?;
    Ok(out)
}

pub(crate) fn softmax_channels_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let c = y.shape()[0];
    let hw = y.len() / c;
    let (yd, g) = (y.data(), grad.data());
    let mut dx = vec![T::zero(); yd.len()];
    for p in 0..hw {
        let dot: T = (0..c).map(|ch| yd[ch * hw + p] * g[ch * hw + p]).sum();
        for ch in 0..c {
            let i = ch * hw + p;
            dx[i] = yd[i] * (g[i] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

/// Mean binary cross-entropy of the foreground channel (index 1) of a
/// `2 x H x W` probability map against a binary target.
pub(crate) fn bce_foreground<T: Real>(probs: &Tensor<T>, target: &[bool]) -> Result<T> {
    check_bce(probs, target)?;
    let hw = target.len();
    let fg = &probs.data()[hw..];
    let mut acc = 0.0f64;
    for (p, &y) in fg.iter().zip(target) {
        let p = p.as_f64().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        acc -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(T::lit(acc / hw as f64))
}

pub(crate) fn bce_foreground_backward<T: Real>(probs: &Tensor<T>, target: &[bool], upstream: T) -> Tensor<T> {
    let hw = target.len();
    let mut dx = vec![T::zero(); probs.len()];
    let scale = upstream.as_f64() / hw as f64;
    for (i, &y) in target.iter().enumerate() {
        let p = probs.data()[hw + i].as_f64();
        if p <= PROB_FLOOR || p >= 1.0 - PROB_FLOOR {
            continue;
        }
        let d = if y { -1.0 / p } else { 1.0 / (1.0 - p) };
        dx[hw + i] = T::lit(d * scale);
    }
    Tensor::from_parts(probs.shape().to_vec(), dx)
}

fn check_bce<T: Real>(probs: &Tensor<T>, target: &[bool]) -> Result<()> {
    expect_rank(probs.shape(), 3, "probability map")?;
    if probs.shape()[0] != 2 || probs.shape()[1] * probs.shape()[2] != target.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![2, target.len()],
            got: probs.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn hadamard_examples() {
        let a = Tensor::new([3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let ones = Tensor::full([3], 1.0f32);
        assert_eq!(hadamard(&a, &ones).unwrap().data(), &[1.0, 2.0, 3.0]);
        let a = Tensor::new([2], vec![2.0f32, -1.0]).unwrap();
        let b = Tensor::new([2], vec![0.0f32, 4.0]).unwrap();
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[0.0, -4.0]);
        assert!(hadamard(&a, &ones).is_err());
    }

    #[test]
    fn hadamard_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        let p = hadamard(&a, &b).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let i = r * 4 + c;
                assert_eq!(p.data()[i], a.data()[i] * b.data()[i]);
            }
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let t = Tensor::full([1, 4, 4], 5.0f32);
        let r = bilinear_resize(&t, 8, 8).unwrap();
        assert!(r.data().iter().all(|&v| (v - 5.0).abs() < 1e-6));
        let single = Tensor::full([2, 1, 1], 3.5f32);
        let r = bilinear_resize(&single, 3, 5).unwrap();
        assert_eq!(r.shape(), &[2, 3, 5]);
        assert!(r.data().iter().all(|&v| v == 3.5));
        assert!(matches!(bilinear_resize(&t, 0, 2), Err(Error::ZeroSize(0, 2))));
    }

    #[test]
    fn resize_ramp_matches_scalar_formula() {
        // source ramp v(y, x) = 10 y + x on a 2x2 grid
        let t = Tensor::new([1, 2, 2], vec![0.0f32, 1.0, 10.0, 11.0]).unwrap();
        let r = bilinear_resize(&t, 4, 4).unwrap();
        let coord = |o: usize| -> f64 { ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0) };
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = 10.0 * coord(oy) + coord(ox);
                assert!((r.data()[oy * 4 + ox] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    fn naive_conv(x: &Tensor<f32>, k: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f32> {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f64; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((co * cin + ci) * kh + ky) * kw + kx] as f64
                                    * x.data()[(ci * h + iy as usize) * w + ix as usize] as f64;
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn conv_identity_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let mut id = Tensor::zeros([2, 2, 1, 1]);
        id.data_mut()[0] = 1.0;
        id.data_mut()[3] = 1.0;
        assert_eq!(conv2d(&x, &id, 1, 0).unwrap().data(), x.data());

        let ones = Tensor::full([1, 5, 5], 1.0f32);
        let k = Tensor::full([1, 1, 3, 3], 1.0f32);
        let y = conv2d(&ones, &k, 1, 1).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[24], 4.0);
        assert_eq!(y.data()[2], 6.0);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 3), (3, 1, 3)] {
            let x = rand_tensor(&[3, 7, 6], &mut rng);
            let w = rand_tensor(&[4, 3, k, k], &mut rng);
            let y = conv2d(&x, &w, stride, pad).unwrap();
            let r = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.len(), r.len());
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros([2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, 1, 1), Err(Error::ChannelMismatch { .. })));
        let w = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert!(matches!(conv2d(&x, &w, 1, 1), Err(Error::EvenKernel(2, 2))));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new([2, 1, 1], vec![0.0f32, 0.0]).unwrap();
        assert_eq!(softmax_channels(&t).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::new([2, 1, 1], vec![3f32.ln(), 0.0]).unwrap();
        let s = softmax_channels(&t).unwrap();
        assert!((s.data()[0] - 0.75).abs() < 1e-6 && (s.data()[1] - 0.25).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::from_fn([2, 6, 7], |_| rng.random_range(-8.0f32..8.0));
        let s = softmax_channels(&t).unwrap();
        for p in 0..42 {
            let (a, b) = (s.data()[p], s.data()[42 + p]);
            assert!((a + b - 1.0).abs() < 1e-6);
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn relu_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&[20], &mut rng);
        assert!(relu(&t).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pool_support_averages_blocks() {
        let x = Tensor::from_fn([1, 1, 1, 2, 4], |i| i as f32);
        let p = pool_support(&x, 2, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 1, 2]);
        assert_eq!(p.data(), &[(0.0 + 1.0 + 4.0 + 5.0) / 4.0, (2.0 + 3.0 + 6.0 + 7.0) / 4.0]);
    }
}
