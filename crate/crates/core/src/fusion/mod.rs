//! Turning weighted depth candidates into an object location, plus the
//! baseline weightings the learned one is compared against.

mod uncertainty;

pub use uncertainty::{candidate_features, UncertaintyConfig, UncertaintyHead, CANDIDATE_FEATURES};

use serde::{Deserialize, Serialize};

use crate::dgde::{keypoint_terms, recover_xy, DepthCandidate};
use crate::error::{Error, Result};
use crate::synth::KeypointView;

/// `sum_s w[s] * z[s]`.
pub fn fuse_values(z: &[f64], w: &[f64]) -> Result<f64> {
    if z.len() != w.len() {
        return Err(Error::ShapeMismatch(format!("{} depths vs {} weights", z.len(), w.len())));
    }
    if z.is_empty() {
        return Err(Error::NoValidCandidates);
    }
    Ok(z.iter().zip(w).map(|(z, w)| z * w).sum())
}

pub fn fuse_depth(cands: &[DepthCandidate], w: &[f64]) -> Result<f64> {
    let z: Vec<f64> = cands.iter().map(|c| c.z).collect();
    fuse_values(&z, w)
}

pub fn weight_uniform(count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::NoValidCandidates);
    }
    Ok(vec![1.0 / count as f64; count])
}

/// `w[s] ∝ 1 / sigma[s]`.
pub fn weight_uncertainty(sigmas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.is_empty() {
        return Err(Error::NoValidCandidates);
    }
    if let Some((index, &value)) = sigmas.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::NonPositiveSigma { index, value });
    }
    let inv: Vec<f64> = sigmas.iter().map(|s| 1.0 / s).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|x| x / total).collect())
}

/// `w[s] ∝ |denominator[s]|`: a candidate's error is amplified by the
/// inverse of its denominator, so weight by the denominator itself.
pub fn weight_inverse_denominator(cands: &[DepthCandidate]) -> Result<Vec<f64>> {
    let total: f64 = cands.iter().map(|c| c.denom.abs()).sum();
    if cands.is_empty() || !(total > 0.0) {
        return Err(Error::NoValidCandidates);
    }
    Ok(cands.iter().map(|c| c.denom.abs() / total).collect())
}

/// Shannon entropy (nats) of a weight vector.
pub fn weight_entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationEstimate {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Number of candidates that were fused.
    pub candidates: usize,
    pub weight_entropy: f64,
}

/// Object center at depth `z_fused`, with `x_c`, `y_c` averaged over the
/// per-keypoint recoveries.
pub fn estimate_location(view: &KeypointView<'_>, z_fused: f64, weights: &[f64]) -> Result<LocationEstimate> {
    if !(z_fused > 0.0) {
        return Err(Error::PointBehindCamera { depth: z_fused });
    }
    let kps = keypoint_terms(view);
    if kps.is_empty() {
        return Err(Error::TooFewKeypoints(0));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (_, terms, npx) in &kps {
        let (x, y) = recover_xy(z_fused, *terms, *npx);
        sx += x;
        sy += y;
    }
    let n = kps.len() as f64;
    Ok(LocationEstimate {
        x: sx / n,
        y: sy / n,
        z: z_fused,
        candidates: weights.len(),
        weight_entropy: weight_entropy(weights),
    })
}
