//! Training objectives and evaluation metrics.
//!
//! Loss functions return their value together with the gradient with respect
//! to the predictions, so the training loop can chain them into the network's
//! backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lienard::{lienard_operator, lienard_operator_grad, lienard_residual, LienardParams};
use crate::series::{derive_values, Alignment, DerivativeMode, CHANNELS};

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred.len(), truth.len())?;
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred.len(), truth.len())?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Root-mean-square of `r` and its gradient `r / (n * rms)`; the gradient is
/// zero when every entry is.
pub fn rms_with_grad(r: &[f64]) -> (f64, Vec<f64>) {
    let n = r.len() as f64;
    let value = (r.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let grad = if value > 0.0 {
        r.iter().map(|v| v / (n * value)).collect()
    } else {
        vec![0.0; r.len()]
    };
    (value, grad)
}

/// RMSE over every entry of two equally shaped buffers, with the gradient
/// with respect to `pred`.
pub fn data_loss(pred: &[f64], truth: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(pred.len(), truth.len())?;
    let diff: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    Ok(rms_with_grad(&diff))
}

fn triples(buf: &[f64]) -> Result<std::slice::ChunksExact<'_, f64>> {
    if !buf.len().is_multiple_of(CHANNELS) {
        return Err(Error::invalid(format!("buffer of {} values is not a list of triples", buf.len())));
    }
    Ok(buf.chunks_exact(CHANNELS))
}

fn accumulate_operator_grad(grad: &mut Vec<f64>, tr: &[f64], weight: f64, p: &LienardParams) {
    let g = lienard_operator_grad(tr[0], tr[1], p);
    grad.extend(g.iter().map(|v| v * weight));
}

/// RMS of the forced residual over predicted `(x, dx, d2x)` triples at their
/// absolute times. Returns the loss and its gradient with respect to the
/// flat triples.
pub fn phys_loss_synthetic_with_grad(pred: &[f64], times: &[f64], p: &LienardParams) -> Result<(f64, Vec<f64>)> {
    check_pair(pred.len() / CHANNELS, times.len())?;
    let rows = triples(pred)?;
    if rows.len() != times.len() {
        return Err(Error::LengthMismatch {
            left: rows.len(),
            right: times.len(),
        });
    }
    let r: Vec<f64> = rows
        .zip(times)
        .map(|(tr, &t)| lienard_residual(tr[0], tr[1], tr[2], t, p))
        .collect();
    let (value, dr) = rms_with_grad(&r);
    let mut grad = Vec::with_capacity(pred.len());
    for (tr, w) in pred.chunks_exact(CHANNELS).zip(dr) {
        accumulate_operator_grad(&mut grad, tr, w, p);
    }
    Ok((value, grad))
}

pub fn phys_loss_synthetic(pred: &[f64], times: &[f64], p: &LienardParams) -> Result<f64> {
    phys_loss_synthetic_with_grad(pred, times, p).map(|(v, _)| v)
}

/// RMSE between the forcing-free operator of predicted and true triples, with
/// the gradient with respect to the predictions.
pub fn phys_loss_real_with_grad(pred: &[f64], truth: &[f64], p: &LienardParams) -> Result<(f64, Vec<f64>)> {
    check_pair(pred.len(), truth.len())?;
    let r: Vec<f64> = triples(pred)?
        .zip(triples(truth)?)
        .map(|(a, b)| lienard_operator(a[0], a[1], a[2], p) - lienard_operator(b[0], b[1], b[2], p))
        .collect();
    let (value, dr) = rms_with_grad(&r);
    let mut grad = Vec::with_capacity(pred.len());
    for (tr, w) in pred.chunks_exact(CHANNELS).zip(dr) {
        accumulate_operator_grad(&mut grad, tr, w, p);
    }
    Ok((value, grad))
}

pub fn phys_loss_real(pred: &[f64], truth: &[f64], p: &LienardParams) -> Result<f64> {
    phys_loss_real_with_grad(pred, truth, p).map(|(v, _)| v)
}

/// How the squared operator differences are aggregated into PIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PicAggregation {
    /// Grows with the number of test points.
    #[default]
    Sum,
    Mean,
}

/// Physical inconsistency between a predicted and a true position series:
/// both are differenced with the same rule, and the squared differences of
/// their forcing-free operators are aggregated.
pub fn physical_inconsistency(
    pred_x: &[f64],
    true_x: &[f64],
    p: &LienardParams,
    mode: DerivativeMode,
    dt_sample: f64,
    aggregation: PicAggregation,
) -> Result<f64> {
    if pred_x.len() != true_x.len() {
        return Err(Error::LengthMismatch {
            left: pred_x.len(),
            right: true_x.len(),
        });
    }
    let dp = derive_values(pred_x, dt_sample, 0.0, mode, Alignment::Forward)?;
    let dt = derive_values(true_x, dt_sample, 0.0, mode, Alignment::Forward)?;
    let ss: f64 = (0..dp.len())
        .map(|i| {
            let a = lienard_operator(dp.x[i], dp.dx[i], dp.d2x[i], p);
            let b = lienard_operator(dt.x[i], dt.dx[i], dt.d2x[i], p);
            (a - b).powi(2)
        })
        .sum();
    Ok(match aggregation {
        PicAggregation::Sum => ss,
        PicAggregation::Mean => ss / dp.len() as f64,
    })
}

/// Components of a weighted objective; `l_total = l_data + lambda * l_phy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_data: f64,
    pub l_phy: f64,
    pub lambda: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_data: f64, l_phy: f64, lambda: f64) -> Self {
        LossBreakdown {
            l_data,
            l_phy,
            lambda,
            l_total: l_data + lambda * l_phy,
        }
    }
}
