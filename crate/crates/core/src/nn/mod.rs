//! Dense numeric kernel: tensors, a reverse-mode tape, Adam and a
//! finite-difference gradient checker.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod ops;
mod param;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use ops::{cross_entropy, gelu, layer_norm, softmax};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub(crate) use ops::log_sum_exp;

/// `T² · mean_rows(−Σᵢ tᵢ log softmax(z/T)ᵢ)`; teacher rows must sum to one.
pub(crate) fn soft_cross_entropy_value(target: &Tensor, logits: &Tensor, temperature: f64) -> Result<f64> {
    if target.shape() != logits.shape() || logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            target.shape(),
            logits.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let t = target.row(r);
        let sum: f64 = t.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || t.iter().any(|&v| v < 0.0) {
            return Err(Error::TeacherNotNormalized { row: r, sum });
        }
        let z: Vec<f64> = logits.row(r).iter().map(|v| v / temperature).collect();
        let lse = log_sum_exp(&z);
        total += t
            .iter()
            .zip(&z)
            .filter(|(&tv, _)| tv > 0.0)
            .map(|(tv, zv)| -tv * (zv - lse))
            .sum::<f64>();
    }
    Ok(temperature * temperature * total / logits.rows() as f64)
}
