//! Forward/backward numeric kernels shared by the autodiff graph.
//!
//! All image-shaped tensors are channel-last: `[N, H, W, C]`. Convolutions are
//! stride-1 with odd square kernels; downsampling is done by pooling.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, Ix2, Ix4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Spatial padding mode for convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Pad {
    /// Zero padding so that stride-1 output dims equal input dims.
    Same,
    /// No padding; output shrinks.
    Valid,
}

/// Pooling kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

fn as4<'a, F: Scalar>(x: &'a ArrayD<F>, context: &str) -> Result<ArrayView4<'a, F>> {
    x.view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::shape(context, "4-d tensor [N,H,W,C]", format!("{:?}", x.shape())))
}

fn as2<'a, F: Scalar>(x: &'a ArrayD<F>, context: &str) -> Result<ArrayView2<'a, F>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape(context, "2-d tensor [N,F]", format!("{:?}", x.shape())))
}

/// Output spatial size for a pooling window.
fn pool_out_dim(input: usize, window: usize, stride: usize, pad: Pad) -> Result<usize> {
    match pad {
        Pad::Same => Ok(input.div_ceil(stride)),
        Pad::Valid => {
            if window > input {
                return Err(Error::InvalidArgument(format!(
                    "pool window {window} larger than input dim {input} with valid padding"
                )));
            }
            Ok((input - window) / stride + 1)
        }
    }
}

fn pool_pad_before(input: usize, out: usize, window: usize, stride: usize, pad: Pad) -> usize {
    match pad {
        Pad::Valid => 0,
        Pad::Same => {
            let total = ((out - 1) * stride + window).saturating_sub(input);
            total / 2
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, odd square kernel) via im2col + GEMM.
// ---------------------------------------------------------------------------

/// im2col for one sample `[H,W,Cin]` -> `[Ho*Wo, k*k*Cin]`, zero padded.
fn im2col<F: Scalar>(x: &ArrayView4<'_, F>, n: usize, k: usize, pad: Pad) -> Array2<F> {
    let (_, h, w, c) = (x.dim().0, x.dim().1, x.dim().2, x.dim().3);
    let (ho, wo, off) = match pad {
        Pad::Same => (h, w, -((k / 2) as isize)),
        Pad::Valid => (h - k + 1, w - k + 1, 0),
    };
    let mut cols = Array2::<F>::zeros((ho * wo, k * k * c));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ky in 0..k {
                let iy = oy as isize + ky as isize + off;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize + off;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let col0 = (ky * k + kx) * c;
                    for ch in 0..c {
                        cols[[row, col0 + ch]] = x[[n, iy as usize, ix as usize, ch]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back into one sample of the input gradient.
fn col2im_add<F: Scalar>(
    gin: &mut Array4<F>,
    n: usize,
    gcols: &Array2<F>,
    k: usize,
    pad: Pad,
) {
    let (h, w, c) = (gin.dim().1, gin.dim().2, gin.dim().3);
    let (ho, wo, off) = match pad {
        Pad::Same => (h, w, -((k / 2) as isize)),
        Pad::Valid => (h - k + 1, w - k + 1, 0),
    };
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ky in 0..k {
                let iy = oy as isize + ky as isize + off;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize + off;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let col0 = (ky * k + kx) * c;
                    for ch in 0..c {
                        gin[[n, iy as usize, ix as usize, ch]] =
                            gin[[n, iy as usize, ix as usize, ch]] + gcols[[row, col0 + ch]];
                    }
                }
            }
        }
    }
}

fn conv_shapes<F: Scalar>(
    input: &ArrayD<F>,
    weight: &ArrayD<F>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let x = as4(input, "conv2d input")?;
    let wt = weight
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::shape("conv2d weight", "[k,k,Cin,Cout]", format!("{:?}", weight.shape())))?;
    let (n, h, w, c) = x.dim();
    let (k0, k1, cin, cout) = wt.dim();
    if k0 != k1 || k0 % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel must be odd and square, got {k0}x{k1}"
        )));
    }
    if cin != c {
        return Err(Error::shape(
            "conv2d channels",
            format!("input channels {cin} (from weight {:?})", weight.shape()),
            format!("input {:?}", input.shape()),
        ));
    }
    let _ = (n, h, w);
    Ok((n, h, w, k0, cin, cout))
}

/// 2-D convolution, stride 1. Input `[N,H,W,Cin]`, weight `[k,k,Cin,Cout]`.
pub fn conv2d_forward<F: Scalar>(input: &ArrayD<F>, weight: &ArrayD<F>, pad: Pad) -> Result<ArrayD<F>> {
    let (n, h, w, k, cin, cout) = conv_shapes(input, weight)?;
    if pad == Pad::Valid && (h < k || w < k) {
        return Err(Error::InvalidArgument(format!(
            "conv2d valid padding needs input >= {k}x{k}, got {h}x{w}"
        )));
    }
    let x = as4(input, "conv2d input")?;
    let w_mat = weight.view().into_shape_with_order((k * k * cin, cout)).unwrap();
    let (ho, wo) = match pad {
        Pad::Same => (h, w),
        Pad::Valid => (h - k + 1, w - k + 1),
    };
    let mut out = Array4::<F>::zeros((n, ho, wo, cout));
    for s in 0..n {
        let cols = im2col(&x, s, k, pad);
        let prod = cols.dot(&w_mat);
        out.index_axis_mut(ndarray::Axis(0), s)
            .assign(&prod.into_shape_with_order((ho, wo, cout)).unwrap());
    }
    Ok(out.into_dyn())
}

/// Gradients of `conv2d_forward` w.r.t. input and weight.
pub fn conv2d_backward<F: Scalar>(
    input: &ArrayD<F>,
    weight: &ArrayD<F>,
    pad: Pad,
    gout: &ArrayD<F>,
) -> Result<(ArrayD<F>, ArrayD<F>)> {
    let (n, h, w, k, cin, cout) = conv_shapes(input, weight)?;
    let x = as4(input, "conv2d input")?;
    let g = as4(gout, "conv2d output gradient")?;
    let (ho, wo) = (g.dim().1, g.dim().2);
    let w_mat = weight.view().into_shape_with_order((k * k * cin, cout)).unwrap();
    let mut gin = Array4::<F>::zeros((n, h, w, cin));
    let mut gw_mat = Array2::<F>::zeros((k * k * cin, cout));
    for s in 0..n {
        let cols = im2col(&x, s, k, pad);
        let g_mat = g
            .index_axis(ndarray::Axis(0), s)
            .into_shape_with_order((ho * wo, cout))
            .unwrap()
            .into_owned();
        gw_mat = gw_mat + cols.t().dot(&g_mat);
        let gcols = g_mat.dot(&w_mat.t());
        col2im_add(&mut gin, s, &gcols, k, pad);
    }
    let gw = gw_mat.into_shape_with_order((k, k, cin, cout)).unwrap();
    Ok((gin.into_dyn(), gw.into_dyn()))
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Pooling forward. Returns the output and, for max pooling, the flat input
/// index of each window's maximum (used by the backward pass).
pub fn pool2d_forward<F: Scalar>(
    input: &ArrayD<F>,
    kind: PoolKind,
    window: usize,
    stride: usize,
    pad: Pad,
) -> Result<(ArrayD<F>, Vec<usize>)> {
    if window < 1 || stride < 1 {
        return Err(Error::InvalidArgument(format!(
            "pool window/stride must be >= 1, got {window}/{stride}"
        )));
    }
    let x = as4(input, "pool2d input")?;
    let (n, h, w, c) = x.dim();
    let ho = pool_out_dim(h, window, stride, pad)?;
    let wo = pool_out_dim(w, window, stride, pad)?;
    let py = pool_pad_before(h, ho, window, stride, pad);
    let px = pool_pad_before(w, wo, window, stride, pad);
    let mut out = Array4::<F>::zeros((n, ho, wo, c));
    let mut argmax = if kind == PoolKind::Max {
        vec![0usize; n * ho * wo * c]
    } else {
        Vec::new()
    };
    let strides = [h * w * c, w * c, c, 1];
    for s in 0..n {
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - py as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - px as isize;
                for ch in 0..c {
                    match kind {
                        PoolKind::Mean => {
                            let mut sum = F::zero();
                            let mut count = 0usize;
                            for dy in 0..window {
                                let iy = y0 + dy as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..window {
                                    let ix = x0 + dx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    sum = sum + x[[s, iy as usize, ix as usize, ch]];
                                    count += 1;
                                }
                            }
                            out[[s, oy, ox, ch]] = sum / F::from_f64(count as f64);
                        }
                        PoolKind::Max => {
                            let mut best = F::neg_infinity();
                            let mut best_idx = usize::MAX;
                            for dy in 0..window {
                                let iy = y0 + dy as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..window {
                                    let ix = x0 + dx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let v = x[[s, iy as usize, ix as usize, ch]];
                                    if v > best {
                                        best = v;
                                        best_idx = s * strides[0]
                                            + iy as usize * strides[1]
                                            + ix as usize * strides[2]
                                            + ch;
                                    }
                                }
                            }
                            out[[s, oy, ox, ch]] = best;
                            argmax[((s * ho + oy) * wo + ox) * c + ch] = best_idx;
                        }
                    }
                }
            }
        }
    }
    Ok((out.into_dyn(), argmax))
}

pub fn pool2d_backward<F: Scalar>(
    input_shape: &[usize],
    kind: PoolKind,
    window: usize,
    stride: usize,
    pad: Pad,
    argmax: &[usize],
    gout: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    let g = as4(gout, "pool2d output gradient")?;
    let (n, ho, wo, c) = g.dim();
    let (h, w) = (input_shape[1], input_shape[2]);
    let py = pool_pad_before(h, ho, window, stride, pad);
    let px = pool_pad_before(w, wo, window, stride, pad);
    let mut gin = Array4::<F>::zeros((n, h, w, c));
    match kind {
        PoolKind::Max => {
            let gin_flat = gin.as_slice_mut().unwrap();
            for (i, &idx) in argmax.iter().enumerate() {
                let gi = g.as_slice().unwrap()[i];
                gin_flat[idx] = gin_flat[idx] + gi;
            }
        }
        PoolKind::Mean => {
            for s in 0..n {
                for oy in 0..ho {
                    let y0 = (oy * stride) as isize - py as isize;
                    for ox in 0..wo {
                        let x0 = (ox * stride) as isize - px as isize;
                        // Count valid contributions once per window.
                        let mut count = 0usize;
                        for dy in 0..window {
                            let iy = y0 + dy as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..window {
                                let ix = x0 + dx as isize;
                                if ix >= 0 && ix < w as isize {
                                    count += 1;
                                }
                            }
                        }
                        let inv = F::one() / F::from_f64(count as f64);
                        for ch in 0..c {
                            let share = g[[s, oy, ox, ch]] * inv;
                            for dy in 0..window {
                                let iy = y0 + dy as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..window {
                                    let ix = x0 + dx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    gin[[s, iy as usize, ix as usize, ch]] =
                                        gin[[s, iy as usize, ix as usize, ch]] + share;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gin.into_dyn())
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsampling
// ---------------------------------------------------------------------------

pub fn upsample_forward<F: Scalar>(input: &ArrayD<F>, factor: usize) -> Result<ArrayD<F>> {
    if factor < 1 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let x = as4(input, "upsample input")?;
    let (n, h, w, c) = x.dim();
    let mut out = Array4::<F>::zeros((n, h * factor, w * factor, c));
    for s in 0..n {
        for y in 0..h * factor {
            for xx in 0..w * factor {
                for ch in 0..c {
                    out[[s, y, xx, ch]] = x[[s, y / factor, xx / factor, ch]];
                }
            }
        }
    }
    Ok(out.into_dyn())
}

pub fn upsample_backward<F: Scalar>(gout: &ArrayD<F>, factor: usize) -> Result<ArrayD<F>> {
    let g = as4(gout, "upsample output gradient")?;
    let (n, hf, wf, c) = g.dim();
    let (h, w) = (hf / factor, wf / factor);
    let mut gin = Array4::<F>::zeros((n, h, w, c));
    for s in 0..n {
        for y in 0..hf {
            for xx in 0..wf {
                for ch in 0..c {
                    gin[[s, y / factor, xx / factor, ch]] =
                        gin[[s, y / factor, xx / factor, ch]] + g[[s, y, xx, ch]];
                }
            }
        }
    }
    Ok(gin.into_dyn())
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// PELU: (a/b)*h for h >= 0, a*(exp(h/b) - 1) otherwise. a, b > 0.
pub fn pelu_forward<F: Scalar>(h: &ArrayD<F>, a: F, b: F) -> Result<ArrayD<F>> {
    if a <= F::zero() || b <= F::zero() {
        return Err(Error::InvalidArgument(format!(
            "pelu parameters must be positive, got a={a}, b={b}"
        )));
    }
    Ok(h.mapv(|v| {
        if v >= F::zero() {
            a / b * v
        } else {
            a * ((v / b).exp() - F::one())
        }
    }))
}

/// Gradients of PELU w.r.t. input, a, and b. Returns (gin, ga, gb) where
/// ga/gb are accumulated over every element.
pub fn pelu_backward<F: Scalar>(h: &ArrayD<F>, a: F, b: F, gout: &ArrayD<F>) -> (ArrayD<F>, F, F) {
    let mut ga = F::zero();
    let mut gb = F::zero();
    let mut gin = ArrayD::<F>::zeros(h.raw_dim());
    for ((gi, &hv), &go) in gin.iter_mut().zip(h.iter()).zip(gout.iter()) {
        if hv >= F::zero() {
            *gi = go * a / b;
            ga = ga + go * hv / b;
            gb = gb - go * a * hv / (b * b);
        } else {
            let e = (hv / b).exp();
            *gi = go * a / b * e;
            ga = ga + go * (e - F::one());
            gb = gb - go * a * hv / (b * b) * e;
        }
    }
    (gin, ga, gb)
}

pub fn relu_forward<F: Scalar>(h: &ArrayD<F>) -> ArrayD<F> {
    h.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Scalar>(h: &ArrayD<F>, gout: &ArrayD<F>) -> ArrayD<F> {
    let mut gin = gout.clone();
    for (gi, &hv) in gin.iter_mut().zip(h.iter()) {
        if hv <= F::zero() {
            *gi = F::zero();
        }
    }
    gin
}

/// Row-wise softmax with max-subtraction for stability. Input `[N,C]`.
pub fn softmax_forward<F: Scalar>(logits: &ArrayD<F>) -> Result<ArrayD<F>> {
    let x = as2(logits, "softmax input")?;
    let (n, c) = x.dim();
    let mut out = Array2::<F>::zeros((n, c));
    for i in 0..n {
        let row = x.row(i);
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[[i, j]] = e;
            sum = sum + e;
        }
        for j in 0..c {
            out[[i, j]] = out[[i, j]] / sum;
        }
    }
    Ok(out.into_dyn())
}

/// Softmax backward given the softmax output `s` and upstream gradient.
pub fn softmax_backward<F: Scalar>(s: &ArrayD<F>, gout: &ArrayD<F>) -> Result<ArrayD<F>> {
    let sv = as2(s, "softmax output")?;
    let g = as2(gout, "softmax gradient")?;
    let (n, c) = sv.dim();
    let mut gin = Array2::<F>::zeros((n, c));
    for i in 0..n {
        let mut dot = F::zero();
        for j in 0..c {
            dot = dot + g[[i, j]] * sv[[i, j]];
        }
        for j in 0..c {
            gin[[i, j]] = sv[[i, j]] * (g[[i, j]] - dot);
        }
    }
    Ok(gin.into_dyn())
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared error over all elements.
pub fn mse_forward<F: Scalar>(pred: &ArrayD<F>, target: &ArrayD<F>) -> Result<F> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let n = F::from_f64(pred.len() as f64);
    let mut sum = F::zero();
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let d = p - t;
        sum = sum + d * d;
    }
    Ok(sum / n)
}

/// Gradients of MSE w.r.t. prediction and target.
pub fn mse_backward<F: Scalar>(pred: &ArrayD<F>, target: &ArrayD<F>, gout: F) -> (ArrayD<F>, ArrayD<F>) {
    let n = F::from_f64(pred.len() as f64);
    let scale = gout * F::from_f64(2.0) / n;
    let gp = ndarray::Zip::from(pred).and(target).map_collect(|&p, &t| scale * (p - t));
    let gt = gp.mapv(|v| -v);
    (gp, gt)
}

/// Mean softmax cross-entropy. Logits `[N,C]`, one integer label per row.
pub fn softmax_ce_forward<F: Scalar>(logits: &ArrayD<F>, labels: &[usize]) -> Result<F> {
    let x = as2(logits, "cross-entropy logits")?;
    let (n, c) = x.dim();
    if labels.len() != n {
        return Err(Error::shape("cross-entropy labels", format!("{n}"), format!("{}", labels.len())));
    }
    let mut total = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {c} classes (sample {i})"
            )));
        }
        let row = x.row(i);
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut lse = F::zero();
        for j in 0..c {
            lse = lse + (row[j] - m).exp();
        }
        total = total + (lse.ln() + m - row[y]);
    }
    Ok(total / F::from_f64(n as f64))
}

pub fn softmax_ce_backward<F: Scalar>(logits: &ArrayD<F>, labels: &[usize], gout: F) -> Result<ArrayD<F>> {
    let probs = softmax_forward(logits)?;
    let mut gin = probs;
    let n = labels.len();
    let scale = gout / F::from_f64(n as f64);
    for (i, &y) in labels.iter().enumerate() {
        gin[[i, y]] = gin[[i, y]] - F::one();
    }
    gin.mapv_inplace(|v| v * scale);
    Ok(gin)
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows<F: Scalar>(probs: &ArrayD<F>) -> Result<Vec<usize>> {
    let p = as2(probs, "argmax input")?;
    Ok(p.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Reflect-pad the spatial dims of `[H,W,C]` up to multiples of `multiple`.
pub fn reflect_pad_to_multiple<F: Scalar>(x: &ArrayD<F>, multiple: usize) -> Result<ArrayD<F>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape("reflect_pad", "[H,W,C]", format!("{:?}", shape)));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let hp = h.div_ceil(multiple) * multiple;
    let wp = w.div_ceil(multiple) * multiple;
    if hp == h && wp == w {
        return Ok(x.clone());
    }
    if hp - h >= h || wp - w >= w {
        return Err(Error::InvalidArgument(format!(
            "input {h}x{w} too small to reflect-pad to a multiple of {multiple}"
        )));
    }
    let mut out = ArrayD::<F>::zeros(ndarray::IxDyn(&[hp, wp, c]));
    for y in 0..hp {
        let sy = if y < h { y } else { 2 * h - 2 - y };
        for xx in 0..wp {
            let sx = if xx < w { xx } else { 2 * w - 2 - xx };
            for ch in 0..c {
                out[[y, xx, ch]] = x[[sy, sx, ch]];
            }
        }
    }
    Ok(out)
}

/// Reject tensors containing NaN or infinities.
pub fn check_finite<F: Scalar>(x: &ArrayD<F>, context: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    Ok(())
}

/// Concatenate two tensors along the last (channel) axis.
pub fn concat_channels<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> Result<ArrayD<F>> {
    if a.ndim() != b.ndim() || a.shape()[..a.ndim() - 1] != b.shape()[..b.ndim() - 1] {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} (all but last dim)", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let axis = ndarray::Axis(a.ndim() - 1);
    ndarray::concatenate(axis, &[a.view(), b.view()])
        .map_err(|e| Error::InvalidArgument(format!("concat failed: {e}")))
}

pub use crate::scalar::Scalar as _;

/// Standardization statistics for the last (feature) axis.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Stats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Stats {
    pub fn feature_count(&self) -> usize {
        self.mean.len()
    }
}

/// Compute per-feature mean/std over every leading axis (feature axis last)
/// and return the standardized data plus the statistics used.
pub fn standardize(x: &ArrayD<f32>) -> Result<(ArrayD<f32>, Stats)> {
    let c = *x.shape().last().ok_or_else(|| Error::InvalidArgument("standardize on 0-d tensor".into()))?;
    let p = x.len() / c;
    if p < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardize needs >= 2 samples per feature, got {p}"
        )));
    }
    let canonical = x.as_standard_layout();
    let flat = canonical.view().into_shape_with_order((p, c)).unwrap();
    let mut mean = vec![0f64; c];
    for row in flat.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= p as f64;
    }
    let mut var = vec![0f64; c];
    for row in flat.rows() {
        for ((s, &m), &v) in var.iter_mut().zip(mean.iter()).zip(row.iter()) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let mut constant = false;
    let std: Vec<f32> = var
        .iter()
        .map(|&s| {
            let sd = (s / p as f64).sqrt();
            if sd < 1e-8 {
                constant = true;
            }
            sd as f32
        })
        .collect();
    if constant {
        log::warn!("standardize: constant feature detected, mapped to zero via sigma floor");
    }
    let stats = Stats { mean: mean.iter().map(|&m| m as f32).collect(), std };
    let out = apply_stats(x, &stats)?;
    Ok((out, stats))
}

/// Apply previously computed statistics: (x - mean) / max(std, 1e-8).
pub fn apply_stats(x: &ArrayD<f32>, stats: &Stats) -> Result<ArrayD<f32>> {
    let c = *x.shape().last().unwrap();
    if c != stats.mean.len() {
        return Err(Error::shape(
            "apply_stats",
            format!("{} features", stats.mean.len()),
            format!("{c} features"),
        ));
    }
    let mut out = x.as_standard_layout().to_owned();
    let p = x.len() / c;
    let mut flat = out.view_mut().into_shape_with_order((p, c)).unwrap();
    for mut row in flat.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            // A sub-floor sigma marks a constant feature; dividing the
            // rounding residual by the floor would amplify it, so map to zero.
            *v = if stats.std[j] < 1e-8 { 0.0 } else { (*v - stats.mean[j]) / stats.std[j] };
        }
    }
    Ok(out)
}
