//! Dense f64 tensors and the handful of numeric kernels everything else
//! is built on: masked softmax, clamped logits, 2-D convolution, bilinear
//! resize, layer norm, and a central-difference gradient checker.
//!
//! All reductions accumulate in row-major order so equality-based tests
//! are reproducible. Storage is always f64; f32 appears only at file I/O.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// 2-D accessor; valid only for rank-2 tensors.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// 3-D accessor; valid only for rank-3 tensors.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }
}

/// Boolean matrix, True = masked out (not allowed to attend).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMat {
    pub rows: usize,
    pub cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        BoolMat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Row-wise softmax with a boolean mask. Masked entries come out exactly 0;
/// each row of unmasked entries sums to 1. A fully masked row is an error.
pub fn masked_softmax(logits: &Tensor, mask: &BoolMat) -> Result<Tensor> {
    let (rows, cols) = match logits.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::Shape(format!("masked_softmax wants rank 2, got {s:?}"))),
    };
    if mask.rows != rows || mask.cols != cols {
        return Err(Error::Shape(format!(
            "logits {rows}x{cols} vs mask {}x{}",
            mask.rows, mask.cols
        )));
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if !mask.get(i, j) {
                max = max.max(logits.at2(i, j));
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if !mask.get(i, j) {
                let e = (logits.at2(i, j) - max).exp();
                out.set2(i, j, e);
                sum += e;
            }
        }
        for j in 0..cols {
            if !mask.get(i, j) {
                let v = out.at2(i, j) / sum;
                out.set2(i, j, v);
            }
        }
    }
    out.validate_finite("masked_softmax")?;
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(p/(1-p)) after clamping p into [eps, 1-eps].
pub fn logit_clamped_scalar(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// Elementwise clamped inverse sigmoid.
pub fn logit_clamped(p: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Invalid(format!("eps must be in (0, 0.5), got {eps}")));
    }
    let data = p.data().iter().map(|&v| logit_clamped_scalar(v, eps)).collect();
    let out = Tensor::from_vec(p.shape(), data)?;
    out.validate_finite("logit_clamped")?;
    Ok(out)
}

/// Cross-correlation of `input` [Cin,H,W] with `kernel` [Cout,Cin,k,k].
/// The output grid must divide evenly: (H + 2*padding - k) % stride == 0.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (cin, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("conv2d input wants rank 3, got {s:?}"))),
    };
    let (cout, kcin, kh, kw) = match kernel.shape() {
        [co, ci, kh, kw] => (*co, *ci, *kh, *kw),
        s => return Err(Error::Shape(format!("conv2d kernel wants rank 4, got {s:?}"))),
    };
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {cin}, kernel {kcin}"
        )));
    }
    if kh != kw {
        return Err(Error::Shape("conv2d kernel must be square".into()));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape("conv2d bias length != Cout".into()));
        }
    }
    if h + 2 * padding < kh || (h + 2 * padding - kh) % stride != 0 {
        return Err(Error::Shape(format!(
            "conv2d geometry not divisible: H={h} pad={padding} k={kh} stride={stride}"
        )));
    }
    if w + 2 * padding < kw || (w + 2 * padding - kw) % stride != 0 {
        return Err(Error::Shape(format!(
            "conv2d geometry not divisible: W={w} pad={padding} k={kw} stride={stride}"
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let idata = input.data();
    let kdata = kernel.data();
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += idata[(ci * h + iy as usize) * w + ix as usize]
                                * kdata[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.data_mut()[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// Interpolation weights for one output axis under the align-corners-false
/// convention: source coordinate (i + 0.5) * in/out - 0.5, edge-clamped.
pub(crate) fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a [C,h,w] tensor (align_corners = false).
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("bilinear_resize wants rank 3, got {s:?}"))),
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("bilinear_resize needs extents >= 1".into()));
    }
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let idata = input.data();
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = idata[(ci * h + y0) * w + x0];
                let v01 = idata[(ci * h + y0) * w + x1];
                let v10 = idata[(ci * h + y1) * w + x0];
                let v11 = idata[(ci * h + y1) * w + x1];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out.data_mut()[(ci * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` w.r.t. kernel and bias.
pub fn conv2d_weight_grad(
    input: &Tensor,
    d_out: &Tensor,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Tensor, Vec<f64>) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, oh, ow) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let mut dk = Tensor::zeros(&[cout, cin, k, k]);
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_out.at3(co, oy, ox);
                if g == 0.0 {
                    continue;
                }
                db[co] += g;
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dk.data_mut()[((co * cin + ci) * k + ky) * k + kx] +=
                                g * input.at3(ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
        }
    }
    (dk, db)
}

/// Gradient of `conv2d` w.r.t. its input.
pub fn conv2d_input_grad(
    d_out: &Tensor,
    kernel: &Tensor,
    in_h: usize,
    in_w: usize,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (cout, oh, ow) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let (cin, k) = (kernel.shape()[1], kernel.shape()[2]);
    let mut dx = Tensor::zeros(&[cin, in_h, in_w]);
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_out.at3(co, oy, ox);
                if g == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            dx.data_mut()[(ci * in_h + iy as usize) * in_w + ix as usize] +=
                                g * kernel.data()[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Transpose of `bilinear_resize`: scatter output gradients back onto the
/// input grid with the same interpolation weights.
pub fn bilinear_backward(d_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, oh, ow) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let ys = bilinear_axis(in_h, oh);
    let xs = bilinear_axis(in_w, ow);
    let mut dx = Tensor::zeros(&[c, in_h, in_w]);
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = d_out.at3(ci, oy, ox);
                if g == 0.0 {
                    continue;
                }
                dx.data_mut()[(ci * in_h + y0) * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dx.data_mut()[(ci * in_h + y0) * in_w + x1] += g * (1.0 - fy) * fx;
                dx.data_mut()[(ci * in_h + y1) * in_w + x0] += g * fy * (1.0 - fx);
                dx.data_mut()[(ci * in_h + y1) * in_w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Central differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time.
pub fn finite_diff_grad<F>(mut scalar_fn: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = scalar_fn(&p);
        p[i] = orig - h;
        let fm = scalar_fn(&p);
        p[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

// ---- dense linear algebra helpers used by the encoder -------------------

/// y = x @ w^T + b where x is [rows, in], w is [out, in].
pub fn linear(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Tensor> {
    let (rows, din) = match x.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::Shape(format!("linear input wants rank 2, got {s:?}"))),
    };
    let (dout, win) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Shape(format!("linear weight wants rank 2, got {s:?}"))),
    };
    if win != din || b.len() != dout {
        return Err(Error::Shape(format!(
            "linear dims: x [{rows},{din}], w [{dout},{win}], b {}",
            b.len()
        )));
    }
    let mut out = Tensor::zeros(&[rows, dout]);
    for r in 0..rows {
        let xr = x.row(r);
        for o in 0..dout {
            let wr = w.row(o);
            let mut acc = b[o];
            for i in 0..din {
                acc += xr[i] * wr[i];
            }
            out.set2(r, o, acc);
        }
    }
    Ok(out)
}

/// Row gradient through `linear`: dx = dy @ w.
pub fn linear_backward_input(dy: &Tensor, w: &Tensor) -> Tensor {
    let rows = dy.shape()[0];
    let dout = dy.shape()[1];
    let din = w.shape()[1];
    let mut dx = Tensor::zeros(&[rows, din]);
    for r in 0..rows {
        for o in 0..dout
        {
            let g = dy.at2(r, o);
            if g == 0.0 {
                continue;
            }
            let wr = w.row(o);
            for i in 0..din {
                dx.data_mut()[r * din + i] += g * wr[i];
            }
        }
    }
    dx
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis of a [rows, dim] tensor.
/// Returns (output, per-row mean, per-row 1/std) for the backward pass.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let rows = x.shape()[0];
    let dim = x.shape()[1];
    let mut out = Tensor::zeros(&[rows, dim]);
    let mut means = vec![0.0; rows];
    let mut rstds = vec![0.0; rows];
    for r in 0..rows {
        let xr = x.row(r);
        let mut mean = 0.0;
        for &v in xr {
            mean += v;
        }
        mean /= dim as f64;
        let mut var = 0.0;
        for &v in xr {
            var += (v - mean) * (v - mean);
        }
        var /= dim as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        for i in 0..dim {
            out.set2(r, i, gamma[i] * (xr[i] - mean) * rstd + beta[i]);
        }
    }
    (out, means, rstds)
}

/// Gradient of layer_norm w.r.t. its input (gamma/beta are frozen here).
pub fn layer_norm_backward_input(
    dy: &Tensor,
    x: &Tensor,
    gamma: &[f64],
    means: &[f64],
    rstds: &[f64],
) -> Tensor {
    let rows = x.shape()[0];
    let dim = x.shape()[1];
    let n = dim as f64;
    let mut dx = Tensor::zeros(&[rows, dim]);
    for r in 0..rows {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mean = means[r];
        let rstd = rstds[r];
        // dxhat_i = dy_i * gamma_i; then standard layernorm input gradient.
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..dim {
            let xhat = (xr[i] - mean) * rstd;
            let dxhat = dyr[i] * gamma[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for i in 0..dim {
            let xhat = (xr[i] - mean) * rstd;
            let dxhat = dyr[i] * gamma[i];
            dx.set2(r, i, rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n));
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place L2 normalization; returns the pre-normalization norm.
pub fn l2_normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}
