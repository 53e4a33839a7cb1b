//! Entropic optimal transport between two edge sets of equal size, with an
//! exact backward pass through the unrolled iterations.
//!
//! Iterates are kept as scalings of a row-shifted Gibbs kernel
//! `K = exp(-(M - rowmin(M)) / alpha)`. Shifting a row of `M` by a constant
//! leaves the plan unchanged, so the shift needs no gradient. When the
//! shifted exponents get large enough to underflow, a log-domain
//! (log-sum-exp) variant is used instead.
//!
//! For small `alpha` alternating normalization can stall (the error decays
//! sublinearly once the plan is close to a permutation). If it has not
//! converged after `max_iters`, the dual potentials are refined with damped
//! Newton steps, and the backward pass switches to implicit differentiation
//! of the optimality conditions at the refined solution.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest shifted exponent the kernel path accepts. The scalings can grow
/// to several times this in log terms, so it stays well below the f64 range.
const KERNEL_EXPONENT_LIMIT: f64 = 100.0;
const MAX_NEWTON_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop once every row and column sum is within `tol` of one.
    pub tol: f64,
    /// Refine with Newton steps when `max_iters` is reached unconverged.
    pub refine: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            max_iters: 200,
            tol: 1e-9,
            refine: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("sinkhorn alpha must be positive, got {}", self.alpha)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("sinkhorn max_iters must be at least 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("sinkhorn tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Tape {
    /// `u[k]`, `v[k]` for `k = 0..=T`, with `u[0]` unused and `v[0] = 1`.
    Kernel {
        kernel: Array2<f64>,
        u: Vec<Array1<f64>>,
        v: Vec<Array1<f64>>,
    },
    /// Potentials `f[k]`, `g[k]` with `g[0] = 0`.
    Log {
        m: Array2<f64>,
        f: Vec<Array1<f64>>,
        g: Vec<Array1<f64>>,
    },
}

/// Soft assignment produced by [`sinkhorn`].
#[derive(Debug, Clone)]
pub struct Assignment {
    /// `P[s, t]`: weight of matching edge `s` of the 2D graph to edge `t` of
    /// the 3D graph.
    pub plan: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest deviation of a row or column sum from one.
    pub marginal_error: f64,
    pub log_domain: bool,
    /// Newton steps taken after the alternating iterations.
    pub refine_steps: usize,
    alpha: f64,
    tape: Tape,
}

fn check_cost(m: &ArrayView2<'_, f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cost matrix must be square and non-empty, got {:?}",
            m.dim()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("cost matrix has non-finite entries".into()));
    }
    Ok(())
}

fn marginal_error(p: &Array2<f64>) -> f64 {
    let r = p.sum_axis(Axis(1)).iter().fold(0.0f64, |a, &x| a.max((x - 1.0).abs()));
    let c = p.sum_axis(Axis(0)).iter().fold(0.0f64, |a, &x| a.max((x - 1.0).abs()));
    r.max(c)
}

fn row_min(m: &ArrayView2<'_, f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.fold(f64::INFINITY, |a, &x| a.min(x)))
}

/// Runs Sinkhorn on cost `m` and keeps what the backward pass needs.
pub fn sinkhorn(m: ArrayView2<'_, f64>, cfg: &SinkhornConfig) -> Result<Assignment> {
    cfg.validate()?;
    check_cost(&m)?;
    let shift = row_min(&m);
    let shifted = &m - &shift.view().insert_axis(Axis(1));
    let max_exponent = shifted.fold(0.0f64, |a, &x| a.max(x)) / cfg.alpha;
    if max_exponent > KERNEL_EXPONENT_LIMIT {
        return sinkhorn_log(m, cfg);
    }
    let kernel = shifted.mapv(|x| (-x / cfg.alpha).exp());
    let n = m.nrows();
    let mut us = vec![Array1::ones(n)];
    let mut vs = vec![Array1::ones(n)];
    let mut kv = kernel.dot(&vs[0]);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let u = kv.mapv(|x| 1.0 / x);
        let v = kernel.t().dot(&u).mapv(|x| 1.0 / x);
        kv = kernel.dot(&v);
        if !u.iter().chain(&v).chain(&kv).all(|x| x.is_finite() && *x > 0.0) {
            return sinkhorn_log(m, cfg);
        }
        // columns are exact after the v update; rows are checked with the next K v
        let err = u.iter().zip(&kv).fold(0.0f64, |a, (&us, &k)| a.max((us * k - 1.0).abs()));
        us.push(u);
        vs.push(v);
        if err <= cfg.tol {
            converged = true;
            break;
        }
    }
    let u = &us[iterations];
    let v = &vs[iterations];
    let plan = &kernel * &u.view().insert_axis(Axis(1)) * &v.view().insert_axis(Axis(0));
    let f = Array1::from_shape_fn(n, |s| cfg.alpha * u[s].ln() + shift[s]);
    let g = v.mapv(|x| cfg.alpha * x.ln());
    finish(
        m,
        cfg,
        plan,
        (f, g),
        iterations,
        converged,
        Tape::Kernel {
            kernel,
            u: us,
            v: vs,
        },
    )
}

fn finish(
    m: ArrayView2<'_, f64>,
    cfg: &SinkhornConfig,
    plan: Array2<f64>,
    potentials: (Array1<f64>, Array1<f64>),
    iterations: usize,
    converged: bool,
    tape: Tape,
) -> Result<Assignment> {
    let log_domain = matches!(tape, Tape::Log { .. });
    let mut out = Assignment {
        marginal_error: marginal_error(&plan),
        plan,
        iterations,
        converged,
        log_domain,
        refine_steps: 0,
        alpha: cfg.alpha,
        tape,
    };
    if !converged && cfg.refine {
        let (f, g) = potentials;
        let r = newton_refine(m, cfg.alpha, f, g, cfg.tol);
        out.plan = r.plan;
        out.marginal_error = marginal_error(&out.plan);
        out.converged = r.converged;
        out.refine_steps = r.steps;
    }
    Ok(out)
}

struct Refined {
    plan: Array2<f64>,
    converged: bool,
    steps: usize,
}

fn plan_from(m: &ArrayView2<'_, f64>, alpha: f64, f: &Array1<f64>, g: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn(m.dim(), |(s, t)| ((f[s] + g[t] - m[[s, t]]) / alpha).exp())
}

/// Jacobian of the row/column sums with respect to `(f, g)`, times `alpha`,
/// with the last column potential fixed (the sums are invariant to
/// `f + c, g - c`).
fn marginal_jacobian(plan: &Array2<f64>) -> DMatrix<f64> {
    let n = plan.nrows();
    let dim = 2 * n - 1;
    let mut j = DMatrix::zeros(dim, dim);
    for s in 0..n {
        j[(s, s)] = plan.row(s).sum();
        for t in 0..n - 1 {
            j[(s, n + t)] = plan[[s, t]];
            j[(n + t, s)] = plan[[s, t]];
        }
    }
    for t in 0..n - 1 {
        j[(n + t, n + t)] = plan.column(t).sum();
    }
    j
}

/// Candidate solutions of `j x = b`: the LU solution, then pseudo-inverse
/// solutions that drop progressively more of the near-null directions a
/// nearly-permutation plan produces.
fn newton_directions(j: DMatrix<f64>, b: &DVector<f64>) -> Vec<DVector<f64>> {
    let finite = |x: &DVector<f64>| x.iter().all(|v| v.is_finite());
    if !j.iter().all(|v| v.is_finite()) {
        return Vec::new();
    }
    let mut out: Vec<DVector<f64>> = j.clone().lu().solve(b).filter(finite).into_iter().collect();
    if let Some(eig) = j.try_symmetric_eigen(f64::EPSILON, 10_000) {
        let top = eig.eigenvalues.amax();
        let coords = eig.eigenvectors.transpose() * b;
        for cut in [1e-14, 1e-11, 1e-8, 1e-5] {
            let scaled = DVector::from_fn(coords.len(), |k, _| {
                let l = eig.eigenvalues[k];
                if l > cut * top {
                    coords[k] / l
                } else {
                    0.0
                }
            });
            let x = &eig.eigenvectors * scaled;
            if finite(&x) {
                out.push(x);
            }
        }
    }
    out
}

fn residual(plan: &Array2<f64>) -> (DVector<f64>, f64) {
    let n = plan.nrows();
    let mut r = DVector::zeros(2 * n - 1);
    let mut worst = 0.0f64;
    for s in 0..n {
        r[s] = plan.row(s).sum() - 1.0;
        worst = worst.max(r[s].abs());
    }
    for t in 0..n {
        let c = plan.column(t).sum() - 1.0;
        worst = worst.max(c.abs());
        if t + 1 < n {
            r[n + t] = c;
        }
    }
    (r, worst)
}

fn newton_refine(m: ArrayView2<'_, f64>, alpha: f64, mut f: Array1<f64>, mut g: Array1<f64>, tol: f64) -> Refined {
    let n = m.nrows();
    let mut plan = plan_from(&m, alpha, &f, &g);
    let (mut r, mut err) = residual(&plan);
    let mut steps = 0;
    while err > tol && steps < MAX_NEWTON_STEPS && n > 1 {
        let directions = newton_directions(marginal_jacobian(&plan), &(-&r));
        steps += 1;
        let norm = r.norm();
        let mut improved = false;
        'directions: for delta in &directions {
            let mut t = 1.0;
            while t >= 1e-8 {
                let nf = Array1::from_shape_fn(n, |s| f[s] + t * alpha * delta[s]);
                let ng = Array1::from_shape_fn(n, |k| if k + 1 < n { g[k] + t * alpha * delta[n + k] } else { g[k] });
                let np = plan_from(&m, alpha, &nf, &ng);
                let (nr, nerr) = residual(&np);
                if nr.norm() < norm {
                    f = nf;
                    g = ng;
                    plan = np;
                    r = nr;
                    err = nerr;
                    improved = true;
                    break 'directions;
                }
                t *= 0.5;
            }
        }
        if !improved {
            break;
        }
    }
    if n == 1 {
        // a single entry is always 1 at the solution
        plan.fill(1.0);
        err = 0.0;
    }
    Refined {
        plan,
        converged: err <= tol,
        steps,
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Sinkhorn with dual potentials updated by log-sum-exp.
pub fn sinkhorn_log(m: ArrayView2<'_, f64>, cfg: &SinkhornConfig) -> Result<Assignment> {
    cfg.validate()?;
    check_cost(&m)?;
    let n = m.nrows();
    let a = cfg.alpha;
    let mut fs = vec![Array1::zeros(n)];
    let mut gs = vec![Array1::zeros(n)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let g_prev = &gs[iterations - 1];
        let f = Array1::from_shape_fn(n, |s| -a * logsumexp((0..n).map(|t| (g_prev[t] - m[[s, t]]) / a)));
        let g = Array1::from_shape_fn(n, |t| -a * logsumexp((0..n).map(|s| (f[s] - m[[s, t]]) / a)));
        let err = (0..n).fold(0.0f64, |acc, s| {
            let row: f64 = (0..n).map(|t| ((f[s] + g[t] - m[[s, t]]) / a).exp()).sum();
            acc.max((row - 1.0).abs())
        });
        fs.push(f);
        gs.push(g);
        if err <= cfg.tol {
            converged = true;
            break;
        }
    }
    let (f, g) = (fs[iterations].clone(), gs[iterations].clone());
    let plan = plan_from(&m, a, &f, &g);
    finish(
        m,
        cfg,
        plan,
        (f, g),
        iterations,
        converged,
        Tape::Log {
            m: m.to_owned(),
            f: fs,
            g: gs,
        },
    )
}

impl Assignment {
    pub fn size(&self) -> usize {
        self.plan.nrows()
    }

    /// `(R, Q)` at iteration `k >= 1`: `R` uses `(f[k], g[k-1])` and has unit
    /// row sums, `Q` uses `(f[k], g[k])` and has unit column sums.
    fn step_plans(&self, k: usize) -> (Array2<f64>, Array2<f64>) {
        match &self.tape {
            Tape::Kernel { kernel, u, v } => {
                let ku = kernel * &u[k].view().insert_axis(Axis(1));
                let r = &ku * &v[k - 1].view().insert_axis(Axis(0));
                let q = &ku * &v[k].view().insert_axis(Axis(0));
                (r, q)
            }
            Tape::Log { m, f, g } => {
                let a = self.alpha;
                let r = Array2::from_shape_fn(m.dim(), |(s, t)| ((f[k][s] + g[k - 1][t] - m[[s, t]]) / a).exp());
                let q = Array2::from_shape_fn(m.dim(), |(s, t)| ((f[k][s] + g[k][t] - m[[s, t]]) / a).exp());
                (r, q)
            }
        }
    }

    /// Plan after `k` full iterations (`1 <= k <= iterations`).
    pub fn iterate(&self, k: usize) -> Array2<f64> {
        assert!(k >= 1 && k <= self.iterations, "iterate {k} out of range");
        self.step_plans(k).1
    }

    /// Gradient of a scalar loss with respect to the cost matrix, given its
    /// gradient `dplan` with respect to the plan.
    pub fn backward(&self, dplan: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if dplan.dim() != self.plan.dim() {
            return Err(Error::ShapeMismatch(format!(
                "plan gradient {:?} vs plan {:?}",
                dplan.dim(),
                self.plan.dim()
            )));
        }
        let a = self.alpha;
        // P = exp((f + g - M) / alpha)
        let pp = &dplan * &self.plan / a;
        if self.refine_steps > 0 {
            return Ok(self.implicit_backward(pp));
        }
        let mut dm = -&pp;
        let mut df = pp.sum_axis(Axis(1));
        let mut dg = pp.sum_axis(Axis(0));
        if let Tape::Kernel { kernel, u, v } = &self.tape {
            unrolled_kernel_backward(kernel, u, v, df.to_vec(), dg.to_vec(), &mut dm);
            return Ok(dm);
        }
        for k in (1..=self.iterations).rev() {
            let (r, q) = self.step_plans(k);
            // g[k]_t = -alpha log sum_s exp((f[k]_s - M_st) / alpha)
            df -= &q.dot(&dg);
            dm += &(&q * &dg.view().insert_axis(Axis(0)));
            // f[k]_s = -alpha log sum_t exp((g[k-1]_t - M_st) / alpha)
            dg = -r.t().dot(&df);
            dm += &(&r * &df.view().insert_axis(Axis(1)));
            df.fill(0.0);
        }
        Ok(dm)
    }

    /// Differentiates the optimality conditions `P 1 = 1`, `P^T 1 = 1` at
    /// the returned plan. `pp` is `dplan * P / alpha`.
    fn implicit_backward(&self, pp: Array2<f64>) -> Array2<f64> {
        let n = self.size();
        let mut rhs = DVector::zeros(2 * n - 1);
        for s in 0..n {
            rhs[s] = pp.row(s).sum();
        }
        for t in 0..n - 1 {
            rhs[n + t] = pp.column(t).sum();
        }
        // J is symmetric; lambda = alpha J'^-1 a with J' = alpha J
        let lambda = newton_directions(marginal_jacobian(&self.plan), &rhs)
            .into_iter()
            .next()
            .unwrap_or_else(|| DVector::zeros(2 * n - 1));
        let lg = |t: usize| if t + 1 < n { lambda[n + t] } else { 0.0 };
        Array2::from_shape_fn((n, n), |(s, t)| -pp[[s, t]] + (lambda[s] + lg(t)) * self.plan[[s, t]])
    }

    /// Dual objective `sum f + sum g - alpha sum exp((f + g - M) / alpha)` at
    /// iteration `k`, up to the row-shift constant.
    pub fn dual_objective(&self, k: usize) -> f64 {
        match &self.tape {
            Tape::Kernel { kernel, u, v } => {
                let a = self.alpha;
                let f: f64 = u[k].iter().map(|x| a * x.ln()).sum();
                let g: f64 = v[k].iter().map(|x| a * x.ln()).sum();
                let mass = (kernel * &u[k].view().insert_axis(Axis(1)) * &v[k].view().insert_axis(Axis(0))).sum();
                f + g - a * mass
            }
            Tape::Log { m, f, g } => {
                let a = self.alpha;
                let mass: f64 = m
                    .indexed_iter()
                    .map(|((s, t), &c)| ((f[k][s] + g[k][t] - c) / a).exp())
                    .sum();
                f[k].sum() + g[k].sum() - a * mass
            }
        }
    }
}

/// The loop of [`Assignment::backward`] specialized to the kernel tape,
/// fused into one pass over the kernel per iteration.
fn unrolled_kernel_backward(
    kernel: &Array2<f64>,
    u: &[Array1<f64>],
    v: &[Array1<f64>],
    mut df: Vec<f64>,
    mut dg: Vec<f64>,
    dm: &mut Array2<f64>,
) {
    let n = kernel.nrows();
    let kernel = kernel.as_standard_layout();
    let ks = kernel.as_slice().expect("standard layout");
    let dms = dm.as_slice_mut().expect("standard layout");
    let mut dg_next = vec![0.0; n];
    let mut vdg = vec![0.0; n];
    for k in (1..u.len()).rev() {
        let (uk, vk, vp) = (&u[k], &v[k], &v[k - 1]);
        for t in 0..n {
            vdg[t] = vk[t] * dg[t];
        }
        dg_next.fill(0.0);
        for s in 0..n {
            let row = &ks[s * n..(s + 1) * n];
            let us = uk[s];
            // Q_st = u_s K_st v[k]_t, R_st = u_s K_st v[k-1]_t
            let acc: f64 = row.iter().zip(&vdg).map(|(a, b)| a * b).sum();
            let fs = df[s] - us * acc;
            let dmr = &mut dms[s * n..(s + 1) * n];
            for t in 0..n {
                let kt = us * row[t];
                let r = kt * vp[t] * fs;
                dmr[t] += kt * vdg[t] + r;
                dg_next[t] -= r;
            }
        }
        std::mem::swap(&mut dg, &mut dg_next);
        df.fill(0.0);
    }
}

/// Primal objective `<M, P> + alpha sum P (ln P - 1)`.
pub fn primal_objective(m: ArrayView2<'_, f64>, plan: ArrayView2<'_, f64>, alpha: f64) -> f64 {
    m.iter()
        .zip(plan)
        .map(|(&c, &p)| {
            let ent = if p > 0.0 { p * (p.ln() - 1.0) } else { 0.0 };
            c * p + alpha * ent
        })
        .sum()
}
