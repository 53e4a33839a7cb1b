//! Column standardization (shared by context and batch normalization) and
//! row-wise L2 normalization, each with its exact backward pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use std::ops::Range;

pub struct Standardized {
    pub xhat: Array2<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    /// `1 / sqrt(var + eps)`
    pub inv_std: Array1<f64>,
}

/// Per-column standardization over the rows of `x`:
/// `(x - mean) / sqrt(var + eps)` with the population variance.
pub fn standardize(x: ArrayView2<'_, f64>, eps: f64) -> Standardized {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = centered * &inv_std;
    Standardized {
        xhat,
        mean,
        var,
        inv_std,
    }
}

/// Gradient of [`standardize`] with respect to its input.
pub fn standardize_backward(
    xhat: ArrayView2<'_, f64>,
    inv_std: ArrayView1<'_, f64>,
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let n = xhat.nrows() as f64;
    let sum_dy = dy.sum_axis(Axis(0));
    let sum_dy_xhat = (&dy * &xhat).sum_axis(Axis(0));
    let mut dx = &dy * n - &sum_dy;
    dx -= &(&xhat * &sum_dy_xhat);
    dx * &(&inv_std / n)
}

/// Context normalization: [`standardize`] applied independently to each
/// row segment (one segment per object instance).
pub fn context_norm(x: ArrayView2<'_, f64>, segments: &[Range<usize>], eps: f64) -> (Array2<f64>, Vec<Array1<f64>>) {
    let mut out = Array2::zeros(x.raw_dim());
    let mut inv_stds = Vec::with_capacity(segments.len());
    for seg in segments {
        let st = standardize(x.slice(ndarray::s![seg.clone(), ..]), eps);
        out.slice_mut(ndarray::s![seg.clone(), ..]).assign(&st.xhat);
        inv_stds.push(st.inv_std);
    }
    (out, inv_stds)
}

pub fn context_norm_backward(
    xhat: ArrayView2<'_, f64>,
    inv_stds: &[Array1<f64>],
    segments: &[Range<usize>],
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut dx = Array2::zeros(dy.raw_dim());
    for (seg, inv_std) in segments.iter().zip(inv_stds) {
        let rows = ndarray::s![seg.clone(), ..];
        let d = standardize_backward(xhat.slice(rows), inv_std.view(), dy.slice(rows));
        dx.slice_mut(rows).assign(&d);
    }
    dx
}

/// Divides each row by its Euclidean norm; rows with norm `<= eps` pass
/// through unchanged. Returns the output and the row norms.
pub fn l2_normalize_rows(x: ArrayView2<'_, f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut y = x.to_owned();
    for (mut row, &n) in y.rows_mut().into_iter().zip(norms.iter()) {
        if n > eps {
            row /= n;
        }
    }
    (y, norms)
}

pub fn l2_normalize_rows_backward(
    y: ArrayView2<'_, f64>,
    norms: ArrayView1<'_, f64>,
    dy: ArrayView2<'_, f64>,
    eps: f64,
) -> Array2<f64> {
    let mut dx = dy.to_owned();
    for ((mut d, yr), &n) in dx.rows_mut().into_iter().zip(y.rows()).zip(norms.iter()) {
        if n > eps {
            let proj = yr.dot(&d);
            d.zip_mut_with(&yr, |g, &yv| *g = (*g - yv * proj) / n);
        }
    }
    dx
}
