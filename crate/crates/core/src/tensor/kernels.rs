//! Forward kernels shared by the tape and by tape-free inference code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, optionally accumulating into `c`.
///
/// With `a_t` set, `a` is stored as `k×m`; with `b_t` set, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the strides
    // above address only those elements for the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (q2, r) = b.dims2()?;
    if q != q2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; p * r];
    gemm(p, q, r, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![p, r], out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (r, q2) = b.dims2()?;
    if q != q2 {
        return Err(Error::dim(format!(
            "matmul_nt inner dimensions disagree: {:?} × {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; p * r];
    gemm(p, q, r, a.data(), false, b.data(), true, &mut out, false);
    Tensor::new(vec![p, r], out)
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, q) = x.dims2()?;
    if bias.shape() != [q] {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(q.max(1)) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, q) = x.dims2()?;
    let mut out = x.data().to_vec();
    if q > 0 {
        for row in out.chunks_mut(q) {
            softmax_in_place(row);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalised activations plus the per-row statistics the backward pass needs.
pub(crate) struct LayerNormOutput {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_raw(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<LayerNormOutput> {
    let rows = if d == 0 { 0 } else { x.len() / d };
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        if var + eps <= 0.0 {
            return Err(Error::Numeric(format!(
                "layer_norm row {r} has zero variance and eps = {eps}"
            )));
        }
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    Ok(LayerNormOutput { out, xhat, inv_std })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    check_norm_params(d, gamma, beta, eps)?;
    let r = layer_norm_raw(x.data(), d, gamma.data(), beta.data(), eps)?;
    Tensor::new(x.shape().to_vec(), r.out)
}

pub(crate) fn check_norm_params(d: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<()> {
    if d == 0 {
        return Err(Error::dim("layer_norm needs at least one feature"));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(format!(
            "layer_norm parameters {:?}/{:?} do not match feature size {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::config(format!("layer_norm eps must be non-negative, got {eps}")));
    }
    Ok(())
}

/// Unrolls `x (L×c_in)` into `L × (k·c_in)` windows starting `pad_left` rows before each output row.
pub(crate) fn im2col(x: &[f64], len: usize, c_in: usize, kernel: usize, pad_left: usize) -> Vec<f64> {
    let width = kernel * c_in;
    let mut cols = vec![0.0; len * width];
    for t in 0..len {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad_left as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src = src as usize;
            cols[t * width + j * c_in..t * width + (j + 1) * c_in]
                .copy_from_slice(&x[src * c_in..(src + 1) * c_in]);
        }
    }
    cols
}

pub(crate) fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (len, c_in) = x.dims2()?;
    let (k, wc_in, c_out) = match w.shape() {
        &[k, ci, co] => (k, ci, co),
        other => return Err(Error::dim(format!("conv weight must be k×c_in×c_out, got {other:?}"))),
    };
    if wc_in != c_in {
        return Err(Error::dim(format!(
            "conv input channels {c_in} do not match weight {:?}",
            w.shape()
        )));
    }
    if b.shape() != [c_out] {
        return Err(Error::dim(format!(
            "conv bias {:?} does not match {c_out} output channels",
            b.shape()
        )));
    }
    if k == 0 {
        return Err(Error::config("conv kernel size must be positive"));
    }
    Ok((len, c_in, k, c_out))
}

/// 1-D convolution over the length axis with `pad_left` zeros before and
/// `k − 1 − pad_left` after, so the output keeps length `L`.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, pad_left: usize) -> Result<Tensor> {
    let (len, c_in, k, c_out) = check_conv(x, w, b)?;
    if pad_left >= k {
        return Err(Error::config(format!("left padding {pad_left} must be below kernel size {k}")));
    }
    let cols = im2col(x.data(), len, c_in, k, pad_left);
    let mut out = vec![0.0; len * c_out];
    gemm(len, k * c_in, c_out, &cols, false, w.data(), false, &mut out, false);
    let out = Tensor::new(vec![len, c_out], out)?;
    add_bias(&out, b)
}

pub fn conv1d_same(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let k = w.shape().first().copied().unwrap_or(0);
    if k % 2 == 0 {
        return Err(Error::config(format!("same-padding conv needs an odd kernel, got {k}")));
    }
    conv1d(x, w, b, (k - 1) / 2)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Keep-mask already scaled by `1/(1 − rate)`.
pub(crate) fn dropout_mask(len: usize, rate: f64, key: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn dropout(x: &Tensor, rate: f64, seed: u64, training: bool) -> Result<Tensor> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.numel(), rate, seed);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based key for one dropout site: the same `(seed, stream, step, site)` always
/// yields the same mask.
pub fn dropout_key(seed: u64, stream: u64, step: u64, site: u64) -> u64 {
    let mut h = splitmix64(seed);
    for part in [stream, step, site] {
        h = splitmix64(h ^ part);
    }
    h
}
