//! Value-level kernels shared by the autodiff graph and by callers that
//! only need forward results.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[idx(k)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub(crate) fn softmax_row_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Log-sum-exp of a row, stable for large magnitudes.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let (src, dst) = (x.row(r), &mut out.data_mut()[r * cols..(r + 1) * cols]);
        softmax_row_into(src, dst);
    }
    out
}

/// Normalised rows plus the per-row inverse standard deviation.
pub(crate) fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let cols = x.cols();
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Layer normalisation over the last axis followed by the affine `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::Shape(format!(
            "layer_norm affine of length {}/{} for last axis {cols}",
            gain.len(),
            bias.len()
        )));
    }
    let (mut xhat, _) = normalize_rows(x, eps);
    for r in 0..xhat.rows() {
        for ((v, g), b) in xhat.row_mut(r).iter_mut().zip(gain).zip(bias) {
            *v = *v * g + b;
        }
    }
    Ok(xhat)
}

/// Mean negative log-likelihood over rows whose label is `Some`.
pub fn cross_entropy(logits: &Tensor, labels: &[Option<usize>]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, label) in labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        if label >= classes {
            return Err(Error::Shape(format!("label {label} >= {classes} classes")));
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[label];
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(total / count as f64)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
