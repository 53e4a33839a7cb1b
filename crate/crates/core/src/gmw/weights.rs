use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-edge fusion weights are read off the matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// Softmax of inverse matched cost `1 / (M[s, s] + eps)`.
    InverseCost,
    /// Normalized diagonal of the assignment, `w ∝ P[s, s]`.
    AssignmentDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub rule: WeightRule,
    pub eps: f64,
    /// Softmax temperature for [`WeightRule::InverseCost`].
    pub temperature: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            rule: WeightRule::InverseCost,
            eps: 1e-6,
            temperature: 1.0,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("weight eps must be positive, got {}", self.eps)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let mx = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - mx).exp());
    let z = e.sum();
    e / z
}

fn softmax_backward(w: &Array1<f64>, dw: ArrayView1<'_, f64>) -> Array1<f64> {
    let dot = w.dot(&dw);
    Array1::from_iter(w.iter().zip(dw).map(|(&wi, &g)| wi * (g - dot)))
}

/// `w = softmax(1 / ((d + eps) * temperature))` over the matched costs `d`.
pub fn weights_from_cost(diag: ArrayView1<'_, f64>, eps: f64, temperature: f64) -> Result<Array1<f64>> {
    if diag.is_empty() {
        return Err(Error::NoValidCandidates);
    }
    let logits = diag.mapv(|d| 1.0 / ((d + eps) * temperature));
    Ok(softmax(&logits))
}

pub fn weights_from_cost_backward(
    diag: ArrayView1<'_, f64>,
    w: ArrayView1<'_, f64>,
    dw: ArrayView1<'_, f64>,
    eps: f64,
    temperature: f64,
) -> Array1<f64> {
    let dx = softmax_backward(&w.to_owned(), dw);
    Array1::from_iter(
        diag.iter()
            .zip(&dx)
            .map(|(&d, &g)| -g / (temperature * (d + eps) * (d + eps))),
    )
}

/// `w = p / sum(p)` over the assignment diagonal.
pub fn weights_from_assignment(pdiag: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let z = pdiag.sum();
    if pdiag.is_empty() || !(z > 0.0) {
        return Err(Error::NoValidCandidates);
    }
    Ok(pdiag.mapv(|p| p / z))
}

pub fn weights_from_assignment_backward(pdiag: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>, dw: ArrayView1<'_, f64>) -> Array1<f64> {
    let z = pdiag.sum();
    let dot = w.dot(&dw);
    dw.mapv(|g| (g - dot) / z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingLosses {
    pub cls: f64,
    pub reg: f64,
    /// `cls + beta * reg`
    pub total: f64,
}

/// Summed binary cross-entropy between the clamped plan and the target.
pub fn bce_loss(plan: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, clamp: f64) -> Result<f64> {
    if plan.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!("plan {:?} vs target {:?}", plan.dim(), target.dim())));
    }
    Ok(plan
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

/// Gradient of [`bce_loss`]; zero where the clamp is active.
pub fn bce_loss_backward(plan: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, clamp: f64) -> Array2<f64> {
    let mut g = plan.to_owned();
    g.zip_mut_with(&target, |p, &y| {
        let v = *p;
        *p = if v <= clamp || v >= 1.0 - clamp {
            0.0
        } else {
            -(y / v) + (1.0 - y) / (1.0 - v)
        };
    });
    g
}

/// Classification loss against `target`, absolute depth error, and their
/// combination `cls + beta * reg`.
pub fn matching_losses(
    plan: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    z_fused: f64,
    z_star: f64,
    beta: f64,
    clamp: f64,
) -> Result<MatchingLosses> {
    let cls = bce_loss(plan, target, clamp)?;
    let reg = (z_fused - z_star).abs();
    Ok(MatchingLosses {
        cls,
        reg,
        total: cls + beta * reg,
    })
}
