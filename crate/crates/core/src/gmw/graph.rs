use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dgde::canonical_edges;
use crate::error::{Error, Result};
use crate::geometry::rotation_apply;
use crate::synth::{KeypointView, ObjectInstance};

/// How vertex coordinates are presented to the edge encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphInputs {
    /// Use normalized pixels `(u~, v~)` instead of raw pixels.
    pub normalized_pixels: bool,
    /// Rotate object-frame points by the object yaw so both graphs share
    /// camera-aligned axes.
    pub yaw_aligned_3d: bool,
}

impl Default for GraphInputs {
    fn default() -> Self {
        Self {
            normalized_pixels: true,
            yaw_aligned_3d: true,
        }
    }
}

/// Complete graph over one object's keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGraph {
    /// One row per keypoint, in semantic order.
    pub vertices: Array2<f64>,
    /// Canonical pairs of vertex rows, `a < b`.
    pub edges: Vec<(usize, usize)>,
    /// Row `s` is the concatenation of the endpoints of edge `s`.
    pub features: Array2<f64>,
}

impl EdgeGraph {
    fn from_vertices(vertices: Array2<f64>) -> Self {
        let n = vertices.nrows();
        let d = vertices.ncols();
        let edges = canonical_edges(n);
        let mut features = Array2::zeros((edges.len(), 2 * d));
        for (s, &(a, b)) in edges.iter().enumerate() {
            for c in 0..d {
                features[[s, c]] = vertices[[a, c]];
                features[[s, d + c]] = vertices[[b, c]];
            }
        }
        Self {
            vertices,
            edges,
            features,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// The 2D and 3D keypoint graphs of a view, with identical edge order.
pub fn build_graphs_for_view(view: &KeypointView<'_>, inputs: GraphInputs) -> Result<(EdgeGraph, EdgeGraph)> {
    let n = view.indices.len();
    if n < 2 {
        return Err(Error::TooFewKeypoints(n));
    }
    let order = view.canonical_order();
    let mut v2 = Array2::zeros((n, 2));
    let mut v3 = Array2::zeros((n, 3));
    for (row, &k) in order.iter().enumerate() {
        let (u, v) = if inputs.normalized_pixels {
            let p = view.camera.normalize(view.pixels[k]);
            (p.u, p.v)
        } else {
            (view.pixels[k].u, view.pixels[k].v)
        };
        v2[[row, 0]] = u;
        v2[[row, 1]] = v;
        let p = if inputs.yaw_aligned_3d {
            rotation_apply(view.yaw, view.points[k])
        } else {
            view.points[k]
        };
        v3[[row, 0]] = p.x;
        v3[[row, 1]] = p.y;
        v3[[row, 2]] = p.z;
    }
    Ok((EdgeGraph::from_vertices(v2), EdgeGraph::from_vertices(v3)))
}

pub fn build_graphs(instance: &ObjectInstance, inputs: GraphInputs) -> Result<(EdgeGraph, EdgeGraph)> {
    build_graphs_for_view(&instance.observed(), inputs)
}
