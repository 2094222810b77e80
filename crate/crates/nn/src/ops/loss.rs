use crate::error::{NnError, Result};
use crate::tensor::Tensor;

fn check(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(NnError::shape(op, format!("{:?}", target.shape()), format!("{:?}", pred.shape())));
    }
    if pred.is_empty() {
        return Err(NnError::InvalidArgument(format!("{op} on empty tensors")));
    }
    Ok(())
}

/// Mean absolute error and its subgradient `sign(pred - target) / count`
/// (zero where the residual is exactly zero).
pub fn mae_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check("mae_loss", pred, target)?;
    let n = pred.len() as f64;
    let inv = (1.0 / n) as f32;
    let mut sum = 0.0f64;
    let grad: Vec<f32> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += (d as f64).abs();
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

pub fn mae(pred: &[f32], target: &[f32]) -> f64 {
    let s: f64 = pred.iter().zip(target).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum();
    s / pred.len().max(1) as f64
}

pub fn rmse(pred: &[f32], target: &[f32]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    (s / pred.len().max(1) as f64).sqrt()
}

pub fn rmse_metric(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check("rmse_metric", pred, target)?;
    Ok(rmse(pred.data(), target.data()))
}
