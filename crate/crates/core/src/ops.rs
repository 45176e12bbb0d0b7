//! Forward and backward kernels for the differentiable operations.
//!
//! Every kernel is a pure function of its inputs. The tape in
//! [`crate::autodiff`] records which kernel produced each value and calls the
//! matching backward kernel during the reverse sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images per partial weight-gradient accumulator. Fixed so that the
/// reduction order (and therefore every bit of the result) does not depend on
/// the number of worker threads.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `k / 2` on each side (odd kernels only).
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return shape_err("conv2d", input, weight);
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (kh, kw) = (weight[2], weight[3]);
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "same padding needs odd kernel extents, got {kh}x{kw}"
                    )));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => (0, 0),
        };
        let (h, w) = (input[2], input[3]);
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return shape_err("conv2d", input, weight);
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: h,
            width: w,
            out_channels: weight[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad_h,
            pad_w,
            out_h: (h + 2 * pad_h - kh) / stride + 1,
            out_w: (w + 2 * pad_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1
    }

    /// Range of output columns whose input column `ox * stride + kj - pad_w` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kj >= self.pad_w {
            0
        } else {
            (self.pad_w - kj).div_ceil(s)
        };
        // ix < width  <=>  ox * s < width + pad_w - kj
        let limit = self.width + self.pad_w;
        let hi = if limit <= kj {
            0
        } else {
            (limit - kj).div_ceil(s).min(self.out_w)
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds one CHW image into a `[patch_len, out_h * out_w]` column matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    let (h, w, s) = (g.height, g.width, g.stride);
    for ci in 0..g.in_channels {
        let src = &image[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * s + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if s == 1 {
                        let start = lo + kj - g.pad_w;
                        seg[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src_row[ox * s + kj - g.pad_w];
                        }
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto a CHW image, accumulating overlaps.
fn col2im_add<T: Scalar>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    let (h, w, s) = (g.height, g.width, g.stride);
    for ci in 0..g.in_channels {
        let dst = &mut image[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let seg = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in lo..hi {
                        dst_row[ox * s + kj - g.pad_w] = dst_row[ox * s + kj - g.pad_w] + seg[ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over an NCHW batch.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if bias.shape() != [g.out_channels] {
        return shape_err("conv2d bias", bias.shape(), &[g.out_channels]);
    }
    let plane = g.out_plane();
    let k = g.patch_len();
    let x = input.data();
    let wdata = weight.data();
    let bdata = bias.data();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    out.par_chunks_mut(g.out_channels * plane)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }],
            |col, (n, dst)| {
                let image = &x[n * g.in_image()..(n + 1) * g.in_image()];
                let cols: &[T] = if g.is_pointwise() {
                    image
                } else {
                    im2col(&g, image, col);
                    col
                };
                for (co, row) in dst.chunks_mut(plane).enumerate() {
                    row.fill(bdata[co]);
                }
                T::gemm(
                    g.out_channels,
                    k,
                    plane,
                    T::one(),
                    wdata,
                    (k as isize, 1),
                    cols,
                    (plane as isize, 1),
                    T::one(),
                    dst,
                    (plane as isize, 1),
                );
            },
        );
    Tensor::from_vec(&[g.batch, g.out_channels, g.out_h, g.out_w], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let plane = g.out_plane();
    let k = g.patch_len();
    let x = input.data();
    let wdata = weight.data();
    let dy = grad_out.data();
    let out_image = g.out_channels * plane;

    let grad_input = if need[0] {
        let mut dx = vec![T::zero(); x.len()];
        dx.par_chunks_mut(g.in_image())
            .enumerate()
            .for_each_init(
                || vec![T::zero(); k * plane],
                |col, (n, dst)| {
                    let dyn_ = &dy[n * out_image..(n + 1) * out_image];
                    if g.is_pointwise() {
                        // dx = W^T · dy
                        T::gemm(
                            k,
                            g.out_channels,
                            plane,
                            T::one(),
                            wdata,
                            (1, k as isize),
                            dyn_,
                            (plane as isize, 1),
                            T::zero(),
                            dst,
                            (plane as isize, 1),
                        );
                    } else {
                        T::gemm(
                            k,
                            g.out_channels,
                            plane,
                            T::one(),
                            wdata,
                            (1, k as isize),
                            dyn_,
                            (plane as isize, 1),
                            T::zero(),
                            col,
                            (plane as isize, 1),
                        );
                        col2im_add(&g, col, dst);
                    }
                },
            );
        Some(Tensor::from_vec(input.shape(), dx)?)
    } else {
        None
    };

    let grad_weight = if need[1] {
        let chunks: Vec<Vec<T>> = (0..g.batch.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut acc = vec![T::zero(); g.out_channels * k];
                let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];
                let end = ((chunk + 1) * GRAD_CHUNK).min(g.batch);
                for n in chunk * GRAD_CHUNK..end {
                    let image = &x[n * g.in_image()..(n + 1) * g.in_image()];
                    let cols: &[T] = if g.is_pointwise() {
                        image
                    } else {
                        im2col(&g, image, &mut col);
                        &col
                    };
                    // dW += dy · cols^T
                    T::gemm(
                        g.out_channels,
                        plane,
                        k,
                        T::one(),
                        &dy[n * out_image..(n + 1) * out_image],
                        (plane as isize, 1),
                        cols,
                        (1, plane as isize),
                        T::one(),
                        &mut acc,
                        (k as isize, 1),
                    );
                }
                acc
            })
            .collect();
        Some(Tensor::from_vec(weight.shape(), sum_in_order(chunks))?)
    } else {
        None
    };

    let grad_bias = if need[2] {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = n * out_image + co * plane;
                *acc = dy[start..start + plane].iter().fold(*acc, |s, &v| s + v);
            }
        }
        Some(Tensor::from_vec(&[g.out_channels], db)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut iter = parts.into_iter();
    let mut total = iter.next().unwrap_or_default();
    for part in iter {
        for (t, p) in total.iter_mut().zip(part) {
            *t = *t + p;
        }
    }
    total
}

/// Affine map `x · Wᵀ + b` over a `[N, Din]` batch.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] {
        return shape_err("dense", is, ws);
    }
    if bias.shape() != [ws[0]] {
        return shape_err("dense bias", bias.shape(), &[ws[0]]);
    }
    let (n, din, dout) = (is[0], is[1], ws[0]);
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        n,
        din,
        dout,
        T::one(),
        input.data(),
        (din as isize, 1),
        weight.data(),
        (1, din as isize),
        T::one(),
        &mut out,
        (dout as isize, 1),
    );
    Tensor::from_vec(&[n, dout], out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (n, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[0];
    let dy = grad_out.data();
    let grad_input = need[0]
        .then(|| {
            let mut dx = vec![T::zero(); n * din];
            T::gemm(
                n,
                dout,
                din,
                T::one(),
                dy,
                (dout as isize, 1),
                weight.data(),
                (din as isize, 1),
                T::zero(),
                &mut dx,
                (din as isize, 1),
            );
            Tensor::from_vec(input.shape(), dx)
        })
        .transpose()?;
    let grad_weight = need[1]
        .then(|| {
            let mut dw = vec![T::zero(); dout * din];
            T::gemm(
                dout,
                n,
                din,
                T::one(),
                dy,
                (1, dout as isize),
                input.data(),
                (din as isize, 1),
                T::zero(),
                &mut dw,
                (din as isize, 1),
            );
            Tensor::from_vec(weight.shape(), dw)
        })
        .transpose()?;
    let grad_bias = need[2]
        .then(|| {
            let mut db = vec![T::zero(); dout];
            for row in dy.chunks(dout) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            Tensor::from_vec(&[dout], db)
        })
        .transpose()?;
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu given its output; the subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad_out, |y, g| if y > T::zero() { g } else { T::zero() })
}

/// Non-overlapping `k × k` max pooling. Returns the pooled tensor and, for each
/// output element, the flat input index that won (first row-major on ties).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "maxpool2d with k={k} needs NCHW extents divisible by k, got {s:?}"
        )));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / k, w / k);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[s[0], s[1], ho, wo], out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}

/// Nearest-neighbour upsampling: each pixel becomes a `k × k` block.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "upsample_nearest with k={k} needs an NCHW tensor, got {s:?}"
        )));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * h * w * k * k);
    for p in 0..planes {
        for y in 0..h {
            let row = &x[(p * h + y) * w..(p * h + y + 1) * w];
            let start = out.len();
            for &v in row {
                for _ in 0..k {
                    out.push(v);
                }
            }
            for _ in 1..k {
                out.extend_from_within(start..start + w * k);
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], h * k, w * k], out)
}

pub fn upsample_nearest_backward<T: Scalar>(
    input_shape: &[usize],
    k: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let wo = w * k;
    let planes = input_shape[0] * input_shape[1];
    let dy = grad_out.data();
    let mut dx = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        let plane = &dy[p * h * w * k * k..(p + 1) * h * w * k * k];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dy_ in 0..k {
                    let row = &plane[(y * k + dy_) * wo + x * k..(y * k + dy_) * wo + x * k + k];
                    acc = row.iter().fold(acc, |s, &v| s + v);
                }
                dx.push(acc);
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

/// Stacks two NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return shape_err("concat_channels", sa, sb);
    }
    let plane = sa[2] * sa[3];
    let (ca, cb) = (sa[1] * plane, sb[1] * plane);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..sa[0] {
        out.extend_from_slice(&a.data()[n * ca..(n + 1) * ca]);
        out.extend_from_slice(&b.data()[n * cb..(n + 1) * cb]);
    }
    Tensor::from_vec(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], out)
}

pub fn concat_channels_backward<T: Scalar>(
    a_shape: &[usize],
    b_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let plane = a_shape[2] * a_shape[3];
    let (ca, cb) = (a_shape[1] * plane, b_shape[1] * plane);
    let mut da = Vec::with_capacity(a_shape[0] * ca);
    let mut db = Vec::with_capacity(b_shape[0] * cb);
    for chunk in grad_out.data().chunks(ca + cb) {
        da.extend_from_slice(&chunk[..ca]);
        db.extend_from_slice(&chunk[ca..]);
    }
    Ok((Tensor::from_vec(a_shape, da)?, Tensor::from_vec(b_shape, db)?))
}

/// Per-sample, per-channel affine modulation `gamma[n,c] · r[n,c,·,·] + beta[n,c]`.
///
/// Channels whose shift is exactly zero skip the addition, so an identity
/// modulation reproduces `r` bit for bit (including signed zeros).
pub fn affine_modulate<T: Scalar>(
    r: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = r.shape();
    if s.len() != 4 || gamma.shape() != [s[0], s[1]] {
        return shape_err("affine_modulate gamma", s, gamma.shape());
    }
    if beta.shape() != gamma.shape() {
        return shape_err("affine_modulate beta", gamma.shape(), beta.shape());
    }
    let plane = s[2] * s[3];
    let mut out = Vec::with_capacity(r.numel());
    for ((chunk, &g), &b) in r.data().chunks(plane).zip(gamma.data()).zip(beta.data()) {
        if b == T::zero() {
            out.extend(chunk.iter().map(|&v| g * v));
        } else {
            out.extend(chunk.iter().map(|&v| g * v + b));
        }
    }
    Tensor::from_vec(s, out)
}

pub fn affine_modulate_backward<T: Scalar>(
    r: &Tensor<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let s = r.shape();
    let plane = s[2] * s[3];
    let dy = grad_out.data();
    let dr = need[0]
        .then(|| {
            let mut d = Vec::with_capacity(r.numel());
            for (chunk, &g) in dy.chunks(plane).zip(gamma.data()) {
                d.extend(chunk.iter().map(|&v| g * v));
            }
            Tensor::from_vec(s, d)
        })
        .transpose()?;
    let dg = need[1]
        .then(|| {
            let d = dy
                .chunks(plane)
                .zip(r.data().chunks(plane))
                .map(|(gy, rv)| gy.iter().zip(rv).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
                .collect();
            Tensor::from_vec(gamma.shape(), d)
        })
        .transpose()?;
    let db = need[2]
        .then(|| {
            let d = dy
                .chunks(plane)
                .map(|gy| gy.iter().fold(T::zero(), |acc, &a| acc + a))
                .collect();
            Tensor::from_vec(gamma.shape(), d)
        })
        .transpose()?;
    Ok((dr, dg, db))
}

/// Mean squared error; accumulates in `f64` before narrowing.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return shape_err("mse_loss", pred.shape(), target.shape());
    }
    if pred.numel() == 0 {
        return Err(Error::Empty("mse_loss"));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).as_f64();
            d * d
        })
        .sum();
    Ok(Tensor::scalar(T::from_f64_lossy(sum / pred.numel() as f64)))
}

pub fn mse_loss_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    upstream: T,
) -> Result<Tensor<T>> {
    let scale = upstream * T::from_f64_lossy(2.0 / pred.numel() as f64);
    pred.zip_map(target, |p, t| scale * (p - t))
}

/// Columns `[start, start + len)` of a `[N, D]` matrix.
pub fn slice_cols<T: Scalar>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 2 || start + len > s[1] {
        return Err(Error::InvalidArgument(format!(
            "slice_cols [{start}, {}) out of range for shape {s:?}",
            start + len
        )));
    }
    let out = input
        .data()
        .chunks(s[1])
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    Tensor::from_vec(&[s[0], len], out)
}

pub fn slice_cols_backward<T: Scalar>(
    input_shape: &[usize],
    start: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let len = grad_out.shape()[1];
    let mut dx = Tensor::zeros(input_shape);
    for (row, g) in dx
        .data_mut()
        .chunks_mut(input_shape[1])
        .zip(grad_out.data().chunks(len))
    {
        row[start..start + len].copy_from_slice(g);
    }
    Ok(dx)
}
