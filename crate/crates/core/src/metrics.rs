//! Regression quality metrics.

use crate::error::{Error, Result};
use crate::stats::mean;

pub fn mse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Length {
            context: "mse inputs",
            got: y_pred.len(),
            expected: y_true.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::Degenerate("mse of an empty set".into()));
    }
    Ok(y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / y_true.len() as f64)
}

/// Coefficient of determination: 1 - SSE / SST with SST centered on the
/// mean of `y_true`. Undefined when the targets have no spread.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Length {
            context: "r2 inputs",
            got: y_pred.len(),
            expected: y_true.len(),
        });
    }
    if y_true.len() < 2 {
        return Err(Error::Degenerate("r2 needs at least two points".into()));
    }
    let m = mean(y_true);
    let sst: f64 = y_true.iter().map(|y| (y - m) * (y - m)).sum();
    if sst < 1e-300 {
        return Err(Error::Degenerate("r2 with constant targets".into()));
    }
    let sse: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok(1.0 - sse / sst)
}
