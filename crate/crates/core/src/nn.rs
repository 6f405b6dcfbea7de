//! Minimal differentiable numeric core.
//!
//! Every layer is a pure forward function returning its output and a cache,
//! paired with a backward function that maps the output gradient to input
//! and parameter gradients. Images use `[batch, channel, height, width]`
//! layout, row-major, 64-bit.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

fn mismatch<T>(msg: impl Into<String>) -> Result<T, NnError> {
    Err(NnError::ShapeMismatch(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return mismatch(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return mismatch(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    fn dims4(&self, what: &str) -> Result<[usize; 4], NnError> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => mismatch(format!("{what} expects a 4-d tensor, got {:?}", self.shape)),
        }
    }

    fn dims2(&self, what: &str) -> Result<[usize; 2], NnError> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => mismatch(format!("{what} expects a 2-d tensor, got {:?}", self.shape)),
        }
    }
}

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

// ---------------------------------------------------------------------------
// conv2d: 3x3 kernel, stride 1, zero padding 1

pub const KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct Conv2dCache {
    cols: Vec<f64>,
    input_dims: [usize; 4],
}

fn im2col(x: &[f64], [m, c, h, w]: [usize; 4]) -> Vec<f64> {
    let hw = h * w;
    let ncol = m * hw;
    let mut cols = vec![0.0; c * 9 * ncol];
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * ncol..][..ncol];
                for s in 0..m {
                    let plane = &x[(s * c + ci) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                row[s * hw + y * w + xx] = plane[sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], [m, c, h, w]: [usize; 4]) -> Vec<f64> {
    let hw = h * w;
    let ncol = m * hw;
    let mut x = vec![0.0; m * c * hw];
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ci * 9) + ky * 3 + kx) * ncol..][..ncol];
                for s in 0..m {
                    let plane = &mut x[(s * c + ci) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                plane[sy as usize * w + sx as usize] += row[s * hw + y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Batched cross-correlation. `x: [M, C_in, H, W]`, `weight: [C_out, C_in, 3, 3]`,
/// `bias: [C_out]`; output `[M, C_out, H, W]`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, Conv2dCache), NnError> {
    let dims @ [m, c_in, h, w] = x.dims4("conv2d input")?;
    let [c_out, wc, kh, kw] = weight.dims4("conv2d weight")?;
    if wc != c_in || kh != KERNEL || kw != KERNEL {
        return mismatch(format!("conv2d weight {:?} for input channels {c_in}", weight.shape));
    }
    if bias.shape != [c_out] {
        return mismatch(format!("conv2d bias {:?} for {c_out} outputs", bias.shape));
    }
    let hw = h * w;
    let ncol = m * hw;
    let cols = im2col(&x.data, dims);
    let mut out_cm = vec![0.0; c_out * ncol];
    gemm(c_out, c_in * 9, ncol, &weight.data, false, &cols, false, 0.0, &mut out_cm);
    let mut out = vec![0.0; m * c_out * hw];
    for co in 0..c_out {
        let b = bias.data[co];
        for s in 0..m {
            let src = &out_cm[co * ncol + s * hw..][..hw];
            let dst = &mut out[(s * c_out + co) * hw..][..hw];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    Ok((Tensor { shape: vec![m, c_out, h, w], data: out }, Conv2dCache { cols, input_dims: dims }))
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(dy: &Tensor, weight: &Tensor, cache: &Conv2dCache) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let [m, c_in, h, w] = cache.input_dims;
    let c_out = weight.shape[0];
    if dy.shape != [m, c_out, h, w] {
        return mismatch(format!("conv2d grad {:?}", dy.shape));
    }
    let hw = h * w;
    let ncol = m * hw;
    let mut dy_cm = vec![0.0; c_out * ncol];
    let mut db = vec![0.0; c_out];
    for s in 0..m {
        for co in 0..c_out {
            let src = &dy.data[(s * c_out + co) * hw..][..hw];
            dy_cm[co * ncol + s * hw..][..hw].copy_from_slice(src);
        }
    }
    for co in 0..c_out {
        db[co] = dy_cm[co * ncol..][..ncol].iter().sum();
    }
    let k = c_in * 9;
    let mut dw = vec![0.0; c_out * k];
    gemm(c_out, ncol, k, &dy_cm, false, &cache.cols, true, 0.0, &mut dw);
    let mut dcols = vec![0.0; k * ncol];
    gemm(k, c_out, ncol, &weight.data, true, &dy_cm, false, 0.0, &mut dcols);
    let dx = col2im(&dcols, cache.input_dims);
    Ok((
        Tensor { shape: vec![m, c_in, h, w], data: dx },
        Tensor { shape: weight.shape.clone(), data: dw },
        Tensor { shape: vec![c_out], data: db },
    ))
}

/// Single-image convenience form: `x: [C_in, H, W]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let [c, h, w] = match x.shape[..] {
        [c, h, w] => [c, h, w],
        _ => return mismatch(format!("conv2d expects C×H×W, got {:?}", x.shape)),
    };
    let batched = x.clone().reshape(&[1, c, h, w])?;
    let (y, _) = conv2d_forward(&batched, weight, bias)?;
    let co = y.shape[1];
    y.reshape(&[co, h, w])
}

// ---------------------------------------------------------------------------
// batchnorm2d

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    used_batch_stats: bool,
    dims: [usize; 4],
}

/// Per-channel batch statistics: mean and unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Normalizes each channel of `[M, C, H, W]`. Train mode uses batch
/// statistics over `M·H·W` values and returns them for the running update;
/// with a single value per channel it falls back to the running statistics.
pub fn batchnorm2d_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    mode: Mode,
) -> Result<(Tensor, BatchNormCache, Option<BatchStats>), NnError> {
    let dims @ [m, c, h, w] = x.dims4("batchnorm input")?;
    if gamma.shape != [c] || beta.shape != [c] || running_mean.len() != c || running_var.len() != c {
        return mismatch(format!("batchnorm parameters for {c} channels"));
    }
    let hw = h * w;
    let count = m * hw;
    let use_batch = mode == Mode::Train && count >= 2;
    let mut mean = running_mean.to_vec();
    let mut var = running_var.to_vec();
    let mut stats = None;
    if use_batch {
        let mut var_unbiased = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..m {
                sum += x.data[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let mu = sum / count as f64;
            let mut sq = 0.0;
            for s in 0..m {
                sq += x.data[(s * c + ch) * hw..][..hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = sq / count as f64;
            var_unbiased[ch] = sq / (count - 1) as f64;
        }
        stats = Some(BatchStats { mean: mean.clone(), var_unbiased });
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.data.len()];
    let mut out = vec![0.0; x.data.len()];
    for s in 0..m {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for p in base..base + hw {
                let xh = (x.data[p] - mean[ch]) * inv_std[ch];
                xhat[p] = xh;
                out[p] = gamma.data[ch] * xh + beta.data[ch];
            }
        }
    }
    Ok((Tensor { shape: x.shape.clone(), data: out }, BatchNormCache { xhat, inv_std, used_batch_stats: use_batch, dims }, stats))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm2d_backward(dy: &Tensor, gamma: &Tensor, cache: &BatchNormCache) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let [m, c, h, w] = cache.dims;
    if dy.shape != [m, c, h, w] {
        return mismatch(format!("batchnorm grad {:?}", dy.shape));
    }
    let hw = h * w;
    let count = (m * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..m {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for p in base..base + hw {
                dgamma[ch] += dy.data[p] * cache.xhat[p];
                dbeta[ch] += dy.data[p];
            }
        }
    }
    let mut dx = vec![0.0; dy.data.len()];
    for s in 0..m {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let g = gamma.data[ch];
            let is = cache.inv_std[ch];
            for p in base..base + hw {
                dx[p] = if cache.used_batch_stats {
                    // d xhat = dy * g; dx = is/count * (count*dxh - sum dxh - xhat*sum(dxh*xhat))
                    g * is / count * (count * dy.data[p] - dbeta[ch] - cache.xhat[p] * dgamma[ch])
                } else {
                    dy.data[p] * g * is
                };
            }
        }
    }
    Ok((
        Tensor { shape: dy.shape.clone(), data: dx },
        Tensor { shape: vec![c], data: dgamma },
        Tensor { shape: vec![c], data: dbeta },
    ))
}

/// Exponential moving update of running statistics.
pub fn update_running_stats(running_mean: &mut [f64], running_var: &mut [f64], batch: &BatchStats) {
    for ch in 0..running_mean.len() {
        running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * batch.mean[ch];
        running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * batch.var_unbiased[ch];
    }
}

// ---------------------------------------------------------------------------
// pointwise, pooling, dense

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

/// Gradient of relu given its input; the subgradient at 0 is 0.
pub fn relu_backward(dy: &Tensor, x: &Tensor) -> Tensor {
    let data = dy.data.iter().zip(&x.data).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor { shape: dy.shape.clone(), data }
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_dims: [usize; 4],
}

/// 2×2 window, stride 2, floor boundary.
pub fn maxpool2d_forward(x: &Tensor) -> Result<(Tensor, MaxPoolCache), NnError> {
    let dims @ [m, c, h, w] = x.dims4("maxpool input")?;
    if h < 2 || w < 2 {
        return mismatch(format!("maxpool needs at least 2×2, got {h}×{w}"));
    }
    let (oh, ow) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
    let mut out = Vec::with_capacity(m * c * oh * ow);
    let mut argmax = Vec::with_capacity(m * c * oh * ow);
    for plane in 0..m * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[p] > x.data[best] {
                        best = p;
                    }
                }
                out.push(x.data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor { shape: vec![m, c, oh, ow], data: out }, MaxPoolCache { argmax, input_dims: dims }))
}

impl MaxPoolCache {
    /// Flat input index chosen by each output cell.
    pub fn argmax_positions(&self) -> &[usize] {
        &self.argmax
    }
}

pub fn maxpool2d_backward(dy: &Tensor, cache: &MaxPoolCache) -> Tensor {
    let mut dx = Tensor::zeros(&cache.input_dims);
    for (g, &p) in dy.data.iter().zip(&cache.argmax) {
        dx.data[p] += g;
    }
    dx
}

/// `x: [M, in]`, `weight: [out, in]`, `bias: [out]` → `x·Wᵀ + b`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let [m, d_in] = x.dims2("linear input")?;
    let [d_out, wi] = weight.dims2("linear weight")?;
    if wi != d_in || bias.shape != [d_out] {
        return mismatch(format!("linear weight {:?} bias {:?} for input {:?}", weight.shape, bias.shape, x.shape));
    }
    let mut out = vec![0.0; m * d_out];
    for row in out.chunks_mut(d_out) {
        row.copy_from_slice(&bias.data);
    }
    gemm(m, d_in, d_out, &x.data, false, &weight.data, true, 1.0, &mut out);
    Ok(Tensor { shape: vec![m, d_out], data: out })
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward(dy: &Tensor, x: &Tensor, weight: &Tensor) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let [m, d_in] = x.dims2("linear input")?;
    let d_out = weight.shape[0];
    if dy.shape != [m, d_out] {
        return mismatch(format!("linear grad {:?}", dy.shape));
    }
    let mut dx = vec![0.0; m * d_in];
    gemm(m, d_out, d_in, &dy.data, false, &weight.data, false, 0.0, &mut dx);
    let mut dw = vec![0.0; d_out * d_in];
    gemm(d_out, m, d_in, &dy.data, true, &x.data, false, 0.0, &mut dw);
    let mut db = vec![0.0; d_out];
    for row in dy.data.chunks(d_out) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((
        Tensor { shape: vec![m, d_in], data: dx },
        Tensor { shape: vec![d_out, d_in], data: dw },
        Tensor { shape: vec![d_out], data: db },
    ))
}

/// Row-wise log-softmax of `[M, C]`, stabilized by subtracting the row max.
pub fn log_softmax(x: &Tensor) -> Result<Tensor, NnError> {
    let [_, c] = x.dims2("log_softmax input")?;
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

pub fn softmax(x: &Tensor) -> Result<Tensor, NnError> {
    let mut t = log_softmax(x)?;
    t.data.iter_mut().for_each(|v| *v = v.exp());
    Ok(t)
}

/// Mean negative log-likelihood over rows of `logits: [M, C]` against class
/// indices (the one-hot labels' hot positions). Returns the loss and its
/// gradient `(softmax − onehot) / M`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let [m, c] = logits.dims2("cross_entropy logits")?;
    if labels.len() != m || labels.iter().any(|&l| l >= c) {
        return mismatch(format!("{} labels for {m}×{c} logits", labels.len()));
    }
    let logp = log_softmax(logits)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; m * c];
    for (r, &l) in labels.iter().enumerate() {
        loss -= logp.data[r * c + l];
        for k in 0..c {
            grad[r * c + k] = logp.data[r * c + k].exp() / m as f64;
        }
        grad[r * c + l] -= 1.0 / m as f64;
    }
    Ok((loss / m as f64, Tensor { shape: vec![m, c], data: grad }))
}

/// Cross entropy against one-hot label rows.
pub fn cross_entropy_one_hot(logits: &Tensor, one_hot: &Tensor) -> Result<(f64, Tensor), NnError> {
    let [m, c] = one_hot.dims2("one-hot labels")?;
    let mut idx = Vec::with_capacity(m);
    for row in one_hot.data.chunks(c) {
        let hot: Vec<usize> = (0..c).filter(|&k| row[k] != 0.0).collect();
        if hot.len() != 1 || row[hot[0]] != 1.0 {
            return mismatch("label row is not one-hot");
        }
        idx.push(hot[0]);
    }
    cross_entropy_loss(logits, &idx)
}

// ---------------------------------------------------------------------------
// graph filter

/// Filter taps `{A_k}`: `K` matrices of shape `F×G`, stored as `[K, F, G]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFilterBank {
    pub taps: Tensor,
}

impl GraphFilterBank {
    pub fn new(taps: Tensor) -> Result<Self, NnError> {
        match taps.shape[..] {
            [k, _, _] if k >= 1 => Ok(GraphFilterBank { taps }),
            _ => mismatch(format!("filter taps must be [K>=1, F, G], got {:?}", taps.shape)),
        }
    }

    pub fn k(&self) -> usize {
        self.taps.shape[0]
    }

    pub fn f(&self) -> usize {
        self.taps.shape[1]
    }

    pub fn g(&self) -> usize {
        self.taps.shape[2]
    }

    fn tap(&self, k: usize) -> &[f64] {
        let fg = self.f() * self.g();
        &self.taps.data[k * fg..(k + 1) * fg]
    }
}

#[derive(Clone, Debug)]
pub struct GraphFilterCache {
    /// Shifted signals `S^k X`, each `N×F`.
    shifted: Vec<Vec<f64>>,
    n: usize,
}

/// `Σ_k S^k X A_k`, with `S^k X` built by repeated one-hop shifts.
/// `x: [N, F]`, `shift: N×N` row-major.
pub fn graph_filter_forward(x: &Tensor, shift: &[f64], bank: &GraphFilterBank) -> Result<(Tensor, GraphFilterCache), NnError> {
    let [n, f] = x.dims2("graph filter input")?;
    if shift.len() != n * n || bank.f() != f {
        return mismatch(format!("graph filter: X {:?}, S {} entries, taps {:?}", x.shape, shift.len(), bank.taps.shape));
    }
    let g = bank.g();
    let mut out = vec![0.0; n * g];
    let mut shifted = Vec::with_capacity(bank.k());
    let mut z = x.data.clone();
    for k in 0..bank.k() {
        if k > 0 {
            let mut next = vec![0.0; n * f];
            gemm(n, n, f, shift, false, &z, false, 0.0, &mut next);
            z = next;
        }
        gemm(n, f, g, &z, false, bank.tap(k), false, 1.0, &mut out);
        shifted.push(z.clone());
    }
    Ok((Tensor { shape: vec![n, g], data: out }, GraphFilterCache { shifted, n }))
}

/// Returns `(d_input, d_taps)`; the shift operator is treated as constant.
pub fn graph_filter_backward(
    dy: &Tensor,
    shift: &[f64],
    bank: &GraphFilterBank,
    cache: &GraphFilterCache,
) -> Result<(Tensor, Tensor), NnError> {
    let (n, f, g, kk) = (cache.n, bank.f(), bank.g(), bank.k());
    if dy.shape != [n, g] {
        return mismatch(format!("graph filter grad {:?}", dy.shape));
    }
    let mut dtaps = vec![0.0; kk * f * g];
    for k in 0..kk {
        gemm(f, n, g, &cache.shifted[k], true, &dy.data, false, 0.0, &mut dtaps[k * f * g..(k + 1) * f * g]);
    }
    // Horner: dX = Σ_k (Sᵀ)^k dY A_kᵀ.
    let mut acc = vec![0.0; n * f];
    gemm(n, g, f, &dy.data, false, bank.tap(kk - 1), true, 0.0, &mut acc);
    for k in (0..kk - 1).rev() {
        let mut next = vec![0.0; n * f];
        gemm(n, n, f, shift, true, &acc, false, 0.0, &mut next);
        gemm(n, g, f, &dy.data, false, bank.tap(k), true, 1.0, &mut next);
        acc = next;
    }
    Ok((Tensor { shape: vec![n, f], data: acc }, Tensor { shape: bank.taps.shape.clone(), data: dtaps }))
}

pub fn graph_filter(x: &Tensor, shift: &[f64], bank: &GraphFilterBank) -> Result<Tensor, NnError> {
    graph_filter_forward(x, shift, bank).map(|(y, _)| y)
}

// ---------------------------------------------------------------------------
// gradient checking

/// Smallest denominator used when forming relative errors, so that
/// coordinates whose true gradient is ~0 are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference check of `analytic` against `f` at `point`, over
/// `coords` (all coordinates when `None`).
pub fn gradient_check(
    f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    h: f64,
) -> GradCheckReport {
    let mut f = f;
    gradient_check_with_kinks(|p| (f(p), 0u64), point, analytic, coords, h)
}

/// Like [`gradient_check`], but `f` also returns a fingerprint of its
/// discrete branch decisions (relu signs, pooling winners). Coordinates whose
/// perturbation changes the fingerprint straddle a kink and are skipped.
pub fn gradient_check_with_kinks<K: PartialEq>(
    mut f: impl FnMut(&[f64]) -> (f64, K),
    point: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    h: f64,
) -> GradCheckReport {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let (_, base_kinks) = f(point);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coord: None, checked: 0, skipped: 0 };
    let mut p = point.to_vec();
    for &i in coords {
        p[i] = point[i] + h;
        let (fp, kp) = f(&p);
        p[i] = point[i] - h;
        let (fm, km) = f(&p);
        p[i] = point[i];
        if kp != base_kinks || km != base_kinks {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_coord.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_coord = Some(i);
        }
    }
    report
}

// ---------------------------------------------------------------------------
// parameter storage

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named learnable parameters with gradient accumulators, plus non-learnable
/// buffers (batch-norm running statistics). Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, Param)>,
    buffers: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros(&value.shape);
        match self.index.get(name) {
            Some(&i) => self.params[i].1 = Param { value, grad },
            None => {
                self.index.insert(name.to_string(), self.params.len());
                self.params.push((name.to_string(), Param { value, grad }));
            }
        }
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) {
        match self.buffer_index.get(name) {
            Some(&i) => self.buffers[i].1 = value,
            None => {
                self.buffer_index.insert(name.to_string(), self.buffers.len());
                self.buffers.push((name.to_string(), value));
            }
        }
    }

    pub fn param(&self, name: &str) -> Result<&Param, NnError> {
        self.index.get(name).map(|&i| &self.params[i].1).ok_or_else(|| NnError::UnknownParameter(name.into()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param, NnError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].1),
            None => Err(NnError::UnknownParameter(name.into())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NnError> {
        self.param(name).map(|p| &p.value)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor, NnError> {
        self.buffer_index.get(name).map(|&i| &self.buffers[i].1).ok_or_else(|| NnError::UnknownParameter(name.into()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        match self.buffer_index.get(name) {
            Some(&i) => Ok(&mut self.buffers[i].1),
            None => Err(NnError::UnknownParameter(name.into())),
        }
    }

    /// Adds `grad` into the accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<(), NnError> {
        let p = self.param_mut(name)?;
        if p.grad.shape != grad.shape {
            return mismatch(format!("gradient for {name}: {:?} vs {:?}", grad.shape, p.grad.shape));
        }
        for (a, g) in p.grad.data.iter_mut().zip(&grad.data) {
            *a += g;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    /// All parameter values concatenated in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|(_, p)| p.value.data.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|(_, p)| p.grad.data.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.num_params() {
            return mismatch(format!("{} values for {} parameters", values.len(), self.num_params()));
        }
        let mut off = 0;
        for (_, p) in self.params.iter_mut() {
            let n = p.value.len();
            p.value.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::uniform(shape, 1.0, rng)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Naive direct convolution used as an independent reference.
    fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let [m, ci, h, ww] = x.dims4("x").unwrap();
        let co = w.shape[0];
        let mut out = vec![0.0; m * co * h * ww];
        for s in 0..m {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..ww {
                        let mut acc = b.data[o];
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < ww as isize {
                                        acc += w.data[((o * ci + c) * 3 + ky) * 3 + kx]
                                            * x.data[((s * ci + c) * h + sy as usize) * ww + sx as usize];
                                    }
                                }
                            }
                        }
                        out[((s * co + o) * h + y) * ww + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_shapes_and_zero_weights() {
        let mut rng = seed::rng_from(1);
        let x = rand_tensor(&[3, 9, 9], &mut rng);
        let w = Tensor::zeros(&[32, 3, 3, 3]);
        let b = Tensor::zeros(&[32]);
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[32, 9, 9]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(matches!(conv2d(&x, &Tensor::zeros(&[32, 4, 3, 3]), &b), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn conv_matches_direct_reference() {
        let mut rng = seed::rng_from(2);
        let x = rand_tensor(&[2, 3, 5, 4], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let (y, _) = conv2d_forward(&x, &w, &b).unwrap();
        for (a, r) in y.data().iter().zip(conv_reference(&x, &w, &b)) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = seed::rng_from(3);
        for _ in 0..100 {
            let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
            let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let r = rand_tensor(&[2, 3, 4, 4], &mut rng);
            let (_, cache) = conv2d_forward(&x, &w, &b).unwrap();
            let (dx, dw, db) = conv2d_backward(&r, &w, &cache).unwrap();
            let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(conv2d_forward(x, w, b).unwrap().0.data(), r.data());
            let rep = gradient_check(|p| loss(&Tensor::from_vec(x.shape(), p.to_vec()).unwrap(), &w, &b), x.data(), dx.data(), None, 1e-5);
            assert!(rep.max_rel_error < 1e-4, "dx {rep:?}");
            let rep = gradient_check(|p| loss(&x, &Tensor::from_vec(w.shape(), p.to_vec()).unwrap(), &b), w.data(), dw.data(), None, 1e-5);
            assert!(rep.max_rel_error < 1e-4, "dw {rep:?}");
            let rep = gradient_check(|p| loss(&x, &w, &Tensor::from_vec(b.shape(), p.to_vec()).unwrap()), b.data(), db.data(), None, 1e-5);
            assert!(rep.max_rel_error < 1e-4, "db {rep:?}");
        }
    }

    #[test]
    fn batchnorm_constant_channel_and_identity() {
        let x = Tensor::filled(&[4, 1, 2, 2], 3.5);
        let (y, _, stats) = batchnorm2d_forward(&x, &Tensor::filled(&[1], 2.0), &Tensor::filled(&[1], 0.25), &[0.0], &[1.0], Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert_eq!(stats.unwrap().mean, vec![3.5]);

        let mut rng = seed::rng_from(4);
        let x = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let (y, _, stats) = batchnorm2d_forward(&x, &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2]), &[0.0; 2], &[1.0; 2], Mode::Eval).unwrap();
        assert!(stats.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_single_value_falls_back_to_running_stats() {
        let x = Tensor::filled(&[1, 1, 1, 1], 2.0);
        let (y, _, stats) = batchnorm2d_forward(&x, &Tensor::filled(&[1], 1.0), &Tensor::zeros(&[1]), &[1.0], &[4.0], Mode::Train).unwrap();
        assert!(stats.is_none());
        assert!((y.data()[0] - 1.0 / (4.0f64 + BN_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn running_stats_update() {
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        update_running_stats(&mut m, &mut v, &BatchStats { mean: vec![2.0], var_unbiased: vec![3.0] });
        assert!((m[0] - 0.2).abs() < 1e-15 && (v[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = seed::rng_from(5);
        for trial in 0..100 {
            let mode = if trial % 2 == 0 { Mode::Train } else { Mode::Eval };
            let x = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let gamma = rand_tensor(&[2], &mut rng);
            let beta = rand_tensor(&[2], &mut rng);
            let rm = [0.1, -0.2];
            let rv = [0.7, 1.3];
            let r = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let (_, cache, _) = batchnorm2d_forward(&x, &gamma, &beta, &rm, &rv, mode).unwrap();
            let (dx, dg, dbt) = batchnorm2d_backward(&r, &gamma, &cache).unwrap();
            let loss = |x: &Tensor, g: &Tensor, b: &Tensor| dot(batchnorm2d_forward(x, g, b, &rm, &rv, mode).unwrap().0.data(), r.data());
            let rep = gradient_check(|p| loss(&Tensor::from_vec(x.shape(), p.to_vec()).unwrap(), &gamma, &beta), x.data(), dx.data(), None, 1e-5);
            assert!(rep.max_rel_error < 1e-4, "dx {mode:?} {rep:?}");
            let rep = gradient_check(|p| loss(&x, &Tensor::from_vec(&[2], p.to_vec()).unwrap(), &beta), gamma.data(), dg.data(), None, 1e-5);
            assert!(rep.max_rel_error < 1e-4, "dgamma {rep:?}");
            let rep = gradient_check(|p| loss(&x, &gamma, &Tensor::from_vec(&[2], p.to_vec()).unwrap()), beta.data(), dbt.data(), None, 1e-5);
            assert!(rep.max_rel_error < 1e-4, "dbeta {rep:?}");
        }
    }

    #[test]
    fn relu_and_pool_basics() {
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
        let mut rng = seed::rng_from(6);
        let x = rand_tensor(&[1, 2, 9, 9], &mut rng);
        let (p, _) = maxpool2d_forward(&x).unwrap();
        assert_eq!(p.shape(), &[1, 2, 4, 4]);
        let (p2, _) = maxpool2d_forward(&p).unwrap();
        assert_eq!(p2.shape(), &[1, 2, 2, 2]);
        let (p3, _) = maxpool2d_forward(&p2).unwrap();
        assert_eq!(p3.shape(), &[1, 2, 1, 1]);
    }

    #[test]
    fn relu_and_pool_gradients_away_from_kinks() {
        let mut rng = seed::rng_from(7);
        let h = 1e-5;
        for _ in 0..100 {
            // Keep every coordinate at least 1e-3 away from the relu kink.
            let x = Tensor::from_vec(
                &[2, 3, 4],
                (0..24).map(|_| {
                    let v: f64 = rng.gen_range(1e-3..1.0);
                    if rng.gen_bool(0.5) { v } else { -v }
                }).collect(),
            )
            .unwrap();
            let r = rand_tensor(&[2, 3, 4], &mut rng);
            let dx = relu_backward(&r, &x);
            let rep = gradient_check(|p| dot(relu_forward(&Tensor::from_vec(&[2, 3, 4], p.to_vec()).unwrap()).data(), r.data()), x.data(), dx.data(), None, h);
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");

            let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
            let r = rand_tensor(&[2, 2, 2, 2], &mut rng);
            let (_, cache) = maxpool2d_forward(&x).unwrap();
            let dx = maxpool2d_backward(&r, &cache);
            let rep = gradient_check_with_kinks(
                |p| {
                    let (y, c) = maxpool2d_forward(&Tensor::from_vec(&[2, 2, 5, 5], p.to_vec()).unwrap()).unwrap();
                    (dot(y.data(), r.data()), c.argmax)
                },
                x.data(),
                dx.data(),
                None,
                h,
            );
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = seed::rng_from(8);
        for _ in 0..100 {
            let x = rand_tensor(&[3, 4], &mut rng);
            let w = rand_tensor(&[5, 4], &mut rng);
            let b = rand_tensor(&[5], &mut rng);
            let r = rand_tensor(&[3, 5], &mut rng);
            let y = linear_forward(&x, &w, &b).unwrap();
            for i in 0..3 {
                for o in 0..5 {
                    let direct = b.data()[o] + dot(&x.data()[i * 4..][..4], &w.data()[o * 4..][..4]);
                    assert!((y.data()[i * 5 + o] - direct).abs() < 1e-12);
                }
            }
            let (dx, dw, db) = linear_backward(&r, &x, &w).unwrap();
            let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(linear_forward(x, w, b).unwrap().data(), r.data());
            for (rep, what) in [
                (gradient_check(|p| loss(&Tensor::from_vec(&[3, 4], p.to_vec()).unwrap(), &w, &b), x.data(), dx.data(), None, 1e-5), "dx"),
                (gradient_check(|p| loss(&x, &Tensor::from_vec(&[5, 4], p.to_vec()).unwrap(), &b), w.data(), dw.data(), None, 1e-5), "dw"),
                (gradient_check(|p| loss(&x, &w, &Tensor::from_vec(&[5], p.to_vec()).unwrap()), b.data(), db.data(), None, 1e-5), "db"),
            ] {
                assert!(rep.max_rel_error < 1e-6, "{what} {rep:?}");
            }
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut rng = seed::rng_from(9);
        let mut x = Tensor::uniform(&[50, 5], 30.0, &mut rng);
        x.data_mut()[0] = 700.0;
        let p = softmax(&x).unwrap();
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let uniform = Tensor::zeros(&[3, 5]);
        let (loss, _) = cross_entropy_loss(&uniform, &[0, 3, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        let mut confident = Tensor::zeros(&[1, 5]);
        confident.data_mut()[2] = 1e3;
        assert!(cross_entropy_loss(&confident, &[2]).unwrap().0 < 1e-300);

        let mut onehot = Tensor::zeros(&[2, 5]);
        onehot.data_mut()[1] = 1.0;
        onehot.data_mut()[9] = 1.0;
        let logits = Tensor::from_vec(&[2, 5], vec![0.1, 0.2, 0.3, 0.4, 0.5, -1.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(cross_entropy_one_hot(&logits, &onehot).unwrap(), cross_entropy_loss(&logits, &[1, 4]).unwrap());

        let mut rng = seed::rng_from(10);
        for _ in 0..100 {
            let logits = Tensor::uniform(&[4, 5], 3.0, &mut rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
            let rep = gradient_check(
                |p| cross_entropy_loss(&Tensor::from_vec(&[4, 5], p.to_vec()).unwrap(), &labels).unwrap().0,
                logits.data(),
                grad.data(),
                None,
                1e-5,
            );
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        }
    }

    fn bank(data: Vec<f64>, k: usize, f: usize, g: usize) -> GraphFilterBank {
        GraphFilterBank::new(Tensor::from_vec(&[k, f, g], data).unwrap()).unwrap()
    }

    #[test]
    fn graph_filter_hand_examples() {
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
        let s = [0.0, 1.0, 1.0, 0.0];
        let y = graph_filter(&x, &s, &bank(vec![1.0, 1.0], 2, 1, 1)).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);

        let mut rng = seed::rng_from(11);
        let x = rand_tensor(&[4, 3], &mut rng);
        let taps = rand_tensor(&[3, 3, 2], &mut rng);
        let a0 = bank(taps.data()[..6].to_vec(), 1, 3, 2);
        let s = rand_tensor(&[4, 4], &mut rng);
        let xa0 = linear_forward(&x, &Tensor::from_vec(&[2, 3], transpose(&taps.data()[..6], 3, 2)).unwrap(), &Tensor::zeros(&[2])).unwrap();
        let k1 = graph_filter(&x, s.data(), &a0).unwrap();
        let zero_shift = graph_filter(&x, &[0.0; 16], &GraphFilterBank::new(taps.clone()).unwrap()).unwrap();
        for ((a, b), c) in k1.data().iter().zip(xa0.data()).zip(zero_shift.data()) {
            assert!((a - b).abs() < 1e-12 && (c - b).abs() < 1e-12);
        }
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn graph_filter_gradients_match_finite_differences() {
        let mut rng = seed::rng_from(12);
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let k = rng.gen_range(1..4);
            let x = rand_tensor(&[n, 3], &mut rng);
            let s = rand_tensor(&[n, n], &mut rng);
            let b = GraphFilterBank::new(rand_tensor(&[k, 3, 2], &mut rng)).unwrap();
            let r = rand_tensor(&[n, 2], &mut rng);
            let (_, cache) = graph_filter_forward(&x, s.data(), &b).unwrap();
            let (dx, dtaps) = graph_filter_backward(&r, s.data(), &b, &cache).unwrap();
            let rep = gradient_check(|p| dot(graph_filter(&Tensor::from_vec(&[n, 3], p.to_vec()).unwrap(), s.data(), &b).unwrap().data(), r.data()), x.data(), dx.data(), None, 1e-5);
            assert!(rep.max_rel_error < 1e-4, "dx {rep:?}");
            let rep = gradient_check(
                |p| dot(graph_filter(&x, s.data(), &bank(p.to_vec(), k, 3, 2)).unwrap().data(), r.data()),
                b.taps.data(),
                dtaps.data(),
                None,
                1e-5,
            );
            assert!(rep.max_rel_error < 1e-4, "dtaps {rep:?}");
        }
    }

    #[test]
    fn graph_filter_is_permutation_equivariant() {
        use rand::seq::SliceRandom;
        let mut rng = seed::rng_from(13);
        for _ in 0..100 {
            let n = rng.gen_range(2..8);
            let x = rand_tensor(&[n, 4], &mut rng);
            let mut s = rand_tensor(&[n, n], &mut rng);
            for i in 0..n {
                for j in 0..i {
                    s.data_mut()[i * n + j] = s.data()[j * n + i];
                }
            }
            let b = GraphFilterBank::new(rand_tensor(&[3, 4, 3], &mut rng)).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let px: Vec<f64> = perm.iter().flat_map(|&p| x.data()[p * 4..][..4].to_vec()).collect();
            let mut ps = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    ps[i * n + j] = s.data()[perm[i] * n + perm[j]];
                }
            }
            let y = graph_filter(&x, s.data(), &b).unwrap();
            let yp = graph_filter(&Tensor::from_vec(&[n, 4], px).unwrap(), &ps, &b).unwrap();
            for i in 0..n {
                for g in 0..3 {
                    assert!((yp.data()[i * 3 + g] - y.data()[perm[i] * 3 + g]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn graph_filter_is_k_hop_local() {
        // Path graph 0-1-2-3-4: with K taps, row i only sees rows within K-1 hops.
        let n = 5;
        let mut s = vec![0.0; n * n];
        for i in 0..n - 1 {
            s[i * n + i + 1] = 0.5;
            s[(i + 1) * n + i] = 0.5;
        }
        let mut rng = seed::rng_from(14);
        for k in 1..=4 {
            let b = GraphFilterBank::new(rand_tensor(&[k, 3, 3], &mut rng)).unwrap();
            let x = rand_tensor(&[n, 3], &mut rng);
            let y = graph_filter(&x, &s, &b).unwrap();
            for j in 0..n {
                let mut xp = x.clone();
                for f in 0..3 {
                    xp.data_mut()[j * 3 + f] += 10.0;
                }
                let yp = graph_filter(&xp, &s, &b).unwrap();
                for i in 0..n {
                    let far = i.abs_diff(j) > k - 1;
                    let same = y.data()[i * 3..][..3] == yp.data()[i * 3..][..3];
                    if far {
                        assert!(same, "k={k} row {i} changed by row {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn param_store_bookkeeping() {
        let mut ps = ParamStore::new();
        ps.insert("a", Tensor::filled(&[2], 1.0));
        ps.insert("b", Tensor::filled(&[1, 3], 2.0));
        ps.insert_buffer("a.running_var", Tensor::filled(&[2], 1.0));
        assert_eq!(ps.num_params(), 5);
        assert_eq!(ps.flat_values(), vec![1.0, 1.0, 2.0, 2.0, 2.0]);
        ps.accumulate("b", &Tensor::filled(&[1, 3], 0.5)).unwrap();
        ps.accumulate("b", &Tensor::filled(&[1, 3], 0.5)).unwrap();
        assert_eq!(ps.flat_grads(), vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(ps.accumulate("b", &Tensor::zeros(&[3])).is_err());
        ps.zero_grads();
        assert!(ps.flat_grads().iter().all(|&g| g == 0.0));
        assert!(matches!(ps.value("zzz"), Err(NnError::UnknownParameter(_))));
        ps.set_flat_values(&[0.0; 5]).unwrap();
        assert_eq!(ps.value("b").unwrap().data(), &[0.0; 3]);
    }
}
