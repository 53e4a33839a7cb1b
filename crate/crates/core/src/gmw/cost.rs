use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Distances below this get a zero (sub)gradient.
const MIN_GRAD_DIST: f64 = 1e-12;
/// Gram-matrix distances below this are recomputed directly to avoid
/// cancellation.
const DIRECT_BELOW: f64 = 1e-3;

fn check_shapes(f2d: &ArrayView2<'_, f64>, f3d: &ArrayView2<'_, f64>) -> Result<()> {
    if f2d.ncols() != f3d.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature widths differ: {} vs {}",
            f2d.ncols(),
            f3d.ncols()
        )));
    }
    Ok(())
}

fn direct(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `M[s, t] = || f2d[s] - f3d[t] ||`.
pub fn cost_matrix(f2d: ArrayView2<'_, f64>, f3d: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_shapes(&f2d, &f3d)?;
    let sq2 = f2d.map_axis(Axis(1), |r| r.dot(&r));
    let sq3 = f3d.map_axis(Axis(1), |r| r.dot(&r));
    let mut m = f2d.dot(&f3d.t());
    for ((s, t), v) in m.indexed_iter_mut() {
        let d = (sq2[s] + sq3[t] - 2.0 * *v).max(0.0).sqrt();
        *v = if d < DIRECT_BELOW {
            direct(f2d.row(s), f3d.row(t))
        } else {
            d
        };
    }
    Ok(m)
}

/// Gradients of `sum(dm * M)` with respect to both feature matrices.
pub fn cost_matrix_backward(
    f2d: ArrayView2<'_, f64>,
    f3d: ArrayView2<'_, f64>,
    m: ArrayView2<'_, f64>,
    dm: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    // G = dM / M, so dA = diag(rowsum G) A - G B and dB = diag(colsum G) B - G^T A
    let mut g = dm.to_owned();
    g.zip_mut_with(&m, |x, &d| *x = if d > MIN_GRAD_DIST { *x / d } else { 0.0 });
    let row = g.sum_axis(Axis(1));
    let col = g.sum_axis(Axis(0));
    let da = &f2d * &row.insert_axis(Axis(1)) - g.dot(&f3d);
    let db = &f3d * &col.insert_axis(Axis(1)) - g.t().dot(&f2d);
    (da, db)
}

/// Only the diagonal `M[s, s]`; both inputs need the same row count.
pub fn cost_diagonal(f2d: ArrayView2<'_, f64>, f3d: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_shapes(&f2d, &f3d)?;
    if f2d.nrows() != f3d.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "edge counts differ: {} vs {}",
            f2d.nrows(),
            f3d.nrows()
        )));
    }
    Ok(Array1::from_iter(
        f2d.rows().into_iter().zip(f3d.rows()).map(|(a, b)| direct(a, b)),
    ))
}

pub fn cost_diagonal_backward(
    f2d: ArrayView2<'_, f64>,
    f3d: ArrayView2<'_, f64>,
    diag: ArrayView1<'_, f64>,
    ddiag: ArrayView1<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut da = &f2d - &f3d;
    for ((mut row, &d), &g) in da.rows_mut().into_iter().zip(diag).zip(ddiag) {
        let k = if d > MIN_GRAD_DIST { g / d } else { 0.0 };
        row *= k;
    }
    let db = -&da;
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_features_have_zero_diagonal() {
        let f = array![[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]];
        let m = cost_matrix(f.view(), f.view()).unwrap();
        for s in 0..3 {
            assert_eq!(m[[s, s]], 0.0);
        }
        assert_eq!(cost_diagonal(f.view(), f.view()).unwrap(), array![0.0, 0.0, 0.0]);
    }

    #[test]
    fn orthogonal_unit_rows() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        let m = cost_matrix(a.view(), b.view()).unwrap();
        assert!((m[[0, 0]] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn matches_pairwise_oracle() {
        let unit = |x: f64, y: f64| {
            let n = (x * x + y * y).sqrt();
            [x / n, y / n]
        };
        let a = [unit(0.3, 0.9), unit(-1.0, 0.2), unit(0.5, -0.5)];
        let b = [unit(0.8, 0.1), unit(0.2, 0.3), unit(-0.4, -0.9)];
        let fa = Array2::from_shape_fn((3, 2), |(r, c)| a[r][c]);
        let fb = Array2::from_shape_fn((3, 2), |(r, c)| b[r][c]);
        let m = cost_matrix(fa.view(), fb.view()).unwrap();
        for s in 0..3 {
            for t in 0..3 {
                let d = ((a[s][0] - b[t][0]).powi(2) + (a[s][1] - b[t][1]).powi(2)).sqrt();
                assert!((m[[s, t]] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 2));
        assert!(cost_matrix(a.view(), b.view()).is_err());
        assert!(cost_diagonal(a.view(), Array2::zeros((3, 3)).view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fa = array![[0.3, 0.9, -0.2], [-1.0, 0.2, 0.4], [0.5, -0.5, 0.1]];
        let fb = array![[0.8, 0.1, 0.3], [0.2, 0.3, -0.6], [-0.4, -0.9, 0.2]];
        let w = array![[0.3, -1.0, 0.4], [0.7, 0.2, -0.5], [1.1, 0.6, 0.9]];
        let loss = |a: &Array2<f64>, b: &Array2<f64>| (cost_matrix(a.view(), b.view()).unwrap() * &w).sum();
        let m = cost_matrix(fa.view(), fb.view()).unwrap();
        let (da, db) = cost_matrix_backward(fa.view(), fb.view(), m.view(), w.view());
        let wd = array![0.5, -0.7, 1.3];
        let dloss = |a: &Array2<f64>, b: &Array2<f64>| cost_diagonal(a.view(), b.view()).unwrap().dot(&wd);
        let diag = cost_diagonal(fa.view(), fb.view()).unwrap();
        let (dda, ddb) = cost_diagonal_backward(fa.view(), fb.view(), diag.view(), wd.view());
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..3 {
                let bump = |x: &Array2<f64>, e: f64| {
                    let mut y = x.clone();
                    y[[r, c]] += e;
                    y
                };
                let fd_a = (loss(&bump(&fa, h), &fb) - loss(&bump(&fa, -h), &fb)) / (2.0 * h);
                let fd_b = (loss(&fa, &bump(&fb, h)) - loss(&fa, &bump(&fb, -h))) / (2.0 * h);
                assert!((fd_a - da[[r, c]]).abs() < 1e-8);
                assert!((fd_b - db[[r, c]]).abs() < 1e-8);
                let fd_da = (dloss(&bump(&fa, h), &fb) - dloss(&bump(&fa, -h), &fb)) / (2.0 * h);
                let fd_db = (dloss(&fa, &bump(&fb, h)) - dloss(&fa, &bump(&fb, -h))) / (2.0 * h);
                assert!((fd_da - dda[[r, c]]).abs() < 1e-8);
                assert!((fd_db - ddb[[r, c]]).abs() < 1e-8);
            }
        }
    }
}
