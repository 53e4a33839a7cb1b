//! Closed-form object depth from pairs of 2D-3D keypoint constraints.
//!
//! For keypoints `i`, `j` with normalized pixels `(u~, v~)` and yaw `r`,
//!
//! ```text
//! l_i = x cos r + z sin r + u~_i (x sin r - z cos r)
//! h_i = y + v~_i (x sin r - z cos r)
//! z_c = (l_i - l_j) / (u~_i - u~_j) = (h_i - h_j) / (v~_i - v~_j)
//! ```
//!
//! Every unordered pair (an "edge") gives one depth candidate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NormalizedPixel, Point3};
use crate::synth::{KeypointView, ObjectInstance};

/// Candidates whose denominator is below this are dropped before fusion.
pub const DEFAULT_TAU: f64 = 1e-3;
/// Number of candidates kept after masking.
pub const DEFAULT_TOP_K: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeTerms {
    pub l: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthCandidate {
    /// Canonical edge index `s` in `0..n(n-1)/2`.
    pub edge: usize,
    /// Semantic keypoint indices, `i < j`.
    pub i: usize,
    pub j: usize,
    pub z: f64,
    /// Absolute value of the denominator that produced `z`.
    pub denom: f64,
    pub axis: Axis,
    /// False for degenerate edges (both denominators zero).
    pub valid: bool,
}

pub fn edge_terms(yaw: f64, kp: Point3, npx: NormalizedPixel) -> EdgeTerms {
    let (s, c) = yaw.sin_cos();
    let depth_offset = kp.x * s - kp.z * c;
    EdgeTerms {
        l: kp.x * c + kp.z * s + npx.u * depth_offset,
        h: kp.y + npx.v * depth_offset,
    }
}

/// Depths from both closed forms of one edge, `None` where the
/// denominator is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeDepths {
    pub horizontal: Option<f64>,
    pub vertical: Option<f64>,
    pub denom_u: f64,
    pub denom_v: f64,
}

pub fn edge_depths(ti: EdgeTerms, tj: EdgeTerms, ni: NormalizedPixel, nj: NormalizedPixel) -> EdgeDepths {
    let du = ni.u - nj.u;
    let dv = ni.v - nj.v;
    EdgeDepths {
        horizontal: (du != 0.0).then(|| (ti.l - tj.l) / du),
        vertical: (dv != 0.0).then(|| (ti.h - tj.h) / dv),
        denom_u: du.abs(),
        denom_v: dv.abs(),
    }
}

/// Depth of edge `(i, j)` from whichever closed form has the larger
/// absolute denominator.
pub fn edge_depth(
    edge: (usize, usize),
    ti: EdgeTerms,
    tj: EdgeTerms,
    ni: NormalizedPixel,
    nj: NormalizedPixel,
) -> Result<DepthCandidate> {
    let (i, j) = edge;
    let d = edge_depths(ti, tj, ni, nj);
    let (z, denom, axis) = if d.denom_u >= d.denom_v {
        (d.horizontal, d.denom_u, Axis::Horizontal)
    } else {
        (d.vertical, d.denom_v, Axis::Vertical)
    };
    let z = z.ok_or(Error::DegenerateEdge { i, j })?;
    Ok(DepthCandidate {
        edge: 0,
        i: i.min(j),
        j: i.max(j),
        z,
        denom,
        axis,
        valid: z.is_finite(),
    })
}

/// Object center `(x_c, y_c)` implied by one keypoint at depth `z`.
pub fn recover_xy(z: f64, terms: EdgeTerms, npx: NormalizedPixel) -> (f64, f64) {
    (npx.u * z - terms.l, npx.v * z - terms.h)
}

/// Number of unordered pairs of `n` keypoints.
pub fn edge_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Canonical edge list `(a, b)`, `a < b`, in lexicographic order.
pub fn canonical_edges(n: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(edge_count(n));
    for a in 0..n {
        for b in a + 1..n {
            edges.push((a, b));
        }
    }
    edges
}

/// Per-keypoint normalized pixels and edge terms in canonical (semantic) order.
pub fn keypoint_terms(view: &KeypointView<'_>) -> Vec<(usize, EdgeTerms, NormalizedPixel)> {
    view.canonical_order()
        .into_iter()
        .map(|k| {
            let npx = view.camera.normalize(view.pixels[k]);
            (view.indices[k], edge_terms(view.yaw, view.points[k], npx), npx)
        })
        .collect()
}

/// All `n(n-1)/2` candidates of a view in canonical edge order. Degenerate
/// edges are kept with `denom = 0` and `valid = false`.
pub fn candidates_for_view(view: &KeypointView<'_>) -> Result<Vec<DepthCandidate>> {
    let n = view.indices.len();
    if n < 2 {
        return Err(Error::TooFewKeypoints(n));
    }
    let kps = keypoint_terms(view);
    let cands = canonical_edges(n)
        .into_iter()
        .enumerate()
        .map(|(edge, (a, b))| {
            let (i, ti, ni) = kps[a];
            let (j, tj, nj) = kps[b];
            match edge_depth((i, j), ti, tj, ni, nj) {
                Ok(c) => DepthCandidate { edge, ..c },
                Err(_) => DepthCandidate {
                    edge,
                    i,
                    j,
                    z: f64::NAN,
                    denom: 0.0,
                    axis: Axis::Horizontal,
                    valid: false,
                },
            }
        })
        .collect();
    Ok(cands)
}

/// Candidates from the observed (corrupted) keypoints of an instance.
pub fn generate_candidates(instance: &ObjectInstance) -> Result<Vec<DepthCandidate>> {
    candidates_for_view(&instance.observed())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Selection {
    /// Minimum absolute denominator (normalized-pixel units).
    pub tau: f64,
    /// Maximum number of candidates kept.
    pub k: usize,
}

impl Default for Selection {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            k: DEFAULT_TOP_K,
        }
    }
}

/// Drops invalid candidates and those with `denom < tau`, then keeps the
/// `k` largest denominators. Output preserves canonical edge order.
pub fn mask_and_select(cands: &[DepthCandidate], tau: f64, k: usize) -> Result<Vec<DepthCandidate>> {
    if !(tau >= 0.0) || k == 0 {
        return Err(Error::InvalidConfig(format!("need tau >= 0 and k >= 1, got tau={tau}, k={k}")));
    }
    let mut keep: Vec<usize> = (0..cands.len())
        .filter(|&s| cands[s].valid && cands[s].z.is_finite() && cands[s].denom >= tau)
        .collect();
    if keep.is_empty() {
        return Err(Error::NoValidCandidates);
    }
    if keep.len() > k {
        // stable sort keeps canonical order among equal denominators
        keep.sort_by(|&a, &b| cands[b].denom.total_cmp(&cands[a].denom));
        keep.truncate(k);
        keep.sort_unstable();
    }
    Ok(keep.into_iter().map(|s| cands[s]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Camera, Pixel, Pose};
    use crate::synth::{generate_instances, make_template, Dims, NoiseModel, PoseRanges, TemplateKind};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn edge_terms_trivial_cases() {
        let t = edge_terms(0.0, Point3::default(), NormalizedPixel::new(0.3, -0.2));
        assert_eq!((t.l, t.h), (0.0, 0.0));
        let t = edge_terms(0.0, Point3::new(1.0, 2.0, 3.0), NormalizedPixel::new(0.0, 0.0));
        assert_eq!((t.l, t.h), (1.0, 2.0));
    }

    #[test]
    fn edge_terms_satisfy_projection_residual() {
        let cam = Camera::kitti_like();
        let pose = Pose::new(PI / 6.0, Point3::new(1.5, 1.2, 17.0));
        let kp = Point3::new(1.0, 0.5, 2.0);
        let (px, _) = project(&cam, &pose, kp).unwrap();
        let npx = cam.normalize(px);
        let t = edge_terms(pose.yaw(), kp, npx);
        let (x, y) = recover_xy(pose.t.z, t, npx);
        assert!((x - pose.t.x).abs() < 1e-12);
        assert!((y - pose.t.y).abs() < 1e-12);
    }

    #[test]
    fn recover_xy_centered_ray() {
        let t = EdgeTerms { l: 0.0, h: 0.0 };
        assert_eq!(recover_xy(12.0, t, NormalizedPixel::new(0.0, 0.0)), (0.0, 0.0));
    }

    #[test]
    fn edge_depth_is_symmetric_and_flags_coincident_rays() {
        let ti = EdgeTerms { l: 1.0, h: 0.4 };
        let tj = EdgeTerms { l: -0.5, h: 0.1 };
        let ni = NormalizedPixel::new(0.1, 0.02);
        let nj = NormalizedPixel::new(-0.05, 0.01);
        let a = edge_depth((0, 1), ti, tj, ni, nj).unwrap();
        let b = edge_depth((1, 0), tj, ti, nj, ni).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!((a.i, a.j), (b.i, b.j));
        assert_eq!(a.axis, Axis::Horizontal);

        let same = edge_depth((0, 1), ti, tj, ni, ni);
        assert!(matches!(same, Err(Error::DegenerateEdge { i: 0, j: 1 })));
    }

    #[test]
    fn candidate_counts() {
        for (n, m) in [(2usize, 1usize), (10, 45), (73, 2628)] {
            let t = make_template(TemplateKind::CarLike, n - 10.min(n), Dims::default(), 1).unwrap();
            let t = if n < 10 {
                crate::synth::ObjectTemplate {
                    keypoints: t.keypoints[..n].to_vec(),
                    ..t
                }
            } else {
                t
            };
            let inst = generate_instances(&t, &PoseRanges::default(), &Camera::kitti_like(), &NoiseModel::zero(), 1, 3)
                .unwrap()
                .remove(0);
            let c = generate_candidates(&inst).unwrap();
            assert_eq!(c.len(), m);
            assert_eq!(c.len(), edge_count(n));
            assert!(c.iter().enumerate().all(|(s, c)| c.edge == s && c.i < c.j));
        }
    }

    #[test]
    fn too_few_keypoints() {
        let cam = Camera::kitti_like();
        let view = KeypointView {
            camera: &cam,
            yaw: 0.0,
            indices: &[0],
            points: &[Point3::default()],
            pixels: &[Pixel::new(0.0, 0.0)],
        };
        assert!(matches!(candidates_for_view(&view), Err(Error::TooFewKeypoints(1))));
    }

    #[test]
    fn degenerate_pair_is_kept_but_flagged() {
        let cam = Camera::kitti_like();
        let px = [Pixel::new(600.0, 170.0), Pixel::new(600.0, 170.0), Pixel::new(640.0, 190.0)];
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.5, 0.0)];
        let view = KeypointView {
            camera: &cam,
            yaw: 0.3,
            indices: &[0, 1, 2],
            points: &pts,
            pixels: &px,
        };
        let c = candidates_for_view(&view).unwrap();
        assert_eq!(c.len(), 3);
        assert!(!c[0].valid);
        assert_eq!(c[0].denom, 0.0);
        let sel = mask_and_select(&c, 0.0, 10).unwrap();
        assert_eq!(sel.iter().map(|c| c.edge).collect::<Vec<_>>(), vec![1, 2]);
    }

    fn fake(denoms: &[f64]) -> Vec<DepthCandidate> {
        denoms
            .iter()
            .enumerate()
            .map(|(s, &d)| DepthCandidate {
                edge: s,
                i: 0,
                j: s + 1,
                z: 10.0 + s as f64,
                denom: d,
                axis: Axis::Vertical,
                valid: true,
            })
            .collect()
    }

    #[test]
    fn selection_examples() {
        let c = fake(&[0.5, 0.1, 0.3, 0.3, 0.0005, 0.2]);
        let all = mask_and_select(&c, 1e-3, 100).unwrap();
        assert_eq!(all.iter().map(|c| c.edge).collect::<Vec<_>>(), vec![0, 1, 2, 3, 5]);
        // tie between edges 2 and 3 broken by canonical order
        let top = mask_and_select(&c, 1e-3, 2).unwrap();
        assert_eq!(top.iter().map(|c| c.edge).collect::<Vec<_>>(), vec![0, 2]);
        assert!(matches!(mask_and_select(&c, 1.0, 3), Err(Error::NoValidCandidates)));
        assert!(mask_and_select(&c, -1.0, 3).is_err());
        assert!(mask_and_select(&c, 0.0, 0).is_err());
    }

    #[test]
    fn full_size_selection_keeps_1500() {
        let t = make_template(TemplateKind::CarLike, 63, Dims::default(), 1).unwrap();
        let inst = generate_instances(&t, &PoseRanges::default(), &Camera::kitti_like(), &NoiseModel::zero(), 1, 8)
            .unwrap()
            .remove(0);
        let c = generate_candidates(&inst).unwrap();
        assert_eq!(c.len(), 2628);
        let s = mask_and_select(&c, 0.0, 1500).unwrap();
        assert_eq!(s.len(), 1500);
    }

    proptest! {
        #[test]
        fn selection_is_bounded_subset(denoms in proptest::collection::vec(0.0..1.0f64, 1..60),
                                       tau in 0.0..0.5f64, k in 1usize..70) {
            let c = fake(&denoms);
            match mask_and_select(&c, tau, k) {
                Ok(sel) => {
                    prop_assert!(sel.len() <= k);
                    prop_assert!(sel.iter().all(|x| x.denom >= tau && c[x.edge] == *x));
                    prop_assert!(sel.windows(2).all(|w| w[0].edge < w[1].edge));
                    let min_kept = sel.iter().map(|x| x.denom).fold(f64::INFINITY, f64::min);
                    let dropped_better = c.iter().filter(|x| x.denom >= tau && x.denom > min_kept
                        && !sel.iter().any(|y| y.edge == x.edge)).count();
                    prop_assert_eq!(dropped_better, 0);
                }
                Err(Error::NoValidCandidates) => prop_assert!(denoms.iter().all(|&d| d < tau)),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn noiseless_candidates_are_exact(seed in 0u64..5000) {
            let t = make_template(TemplateKind::CarLike, 6, Dims::default(), seed).unwrap();
            let inst = generate_instances(&t, &PoseRanges::default(), &Camera::kitti_like(), &NoiseModel::zero(), 1, seed)
                .unwrap().remove(0);
            let zc = inst.z_star();
            for c in generate_candidates(&inst).unwrap().iter().filter(|c| c.valid) {
                prop_assert!(((c.z - zc) / zc).abs() < 1e-9, "edge {} z {} vs {}", c.edge, c.z, zc);
            }
            // every keypoint recovers the same center
            for (_, t, n) in keypoint_terms(&inst.observed()) {
                let (x, y) = recover_xy(zc, t, n);
                prop_assert!((x - inst.pose.t.x).abs() < 1e-9 && (y - inst.pose.t.y).abs() < 1e-9);
            }
        }
    }
}
