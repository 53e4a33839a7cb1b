//! Central-difference gradient checking over a random subset of parameters.

use rand::seq::SliceRandom;

use super::params::{Grads, ParamStore};
use crate::synth::rng_from;

/// One evaluation of the loss. `kinks` fingerprints every piecewise-linear
/// branch taken (rectifier signs, clamps); may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub kinks: Vec<bool>,
}

impl From<f64> for Evaluation {
    fn from(loss: f64) -> Self {
        Self { loss, kinks: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub h: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            h: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Parameters whose +-h perturbation crossed a kink and were resampled.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// Denominator floor: below this magnitude finite differences cannot
    /// resolve a 1e-4 relative error in f64.
    pub floor: f64,
    pub worst: Option<Worst>,
}

/// Compares `analytic` against central differences of `eval` for up to
/// `cfg.samples` trainable scalars.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)` where
/// `floor = 1e4 * f64::EPSILON * max(|L|, 1) / h`.
pub fn grad_check<F>(store: &mut ParamStore, analytic: &Grads, mut eval: F, cfg: GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> Evaluation,
{
    let base = eval(store);
    let floor = 1e4 * f64::EPSILON * base.loss.abs().max(1.0) / cfg.h;

    let mut pool: Vec<(usize, usize)> = store
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.trainable)
        .flat_map(|(id, t)| (0..t.numel()).map(move |k| (id, k)))
        .collect();
    pool.shuffle(&mut rng_from(cfg.seed));

    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        floor,
        worst: None,
    };
    for (id, k) in pool {
        if report.checked >= cfg.samples {
            break;
        }
        let orig = store.data(id)[k];
        store.data_mut(id)[k] = orig + cfg.h;
        let plus = eval(store);
        store.data_mut(id)[k] = orig - cfg.h;
        let minus = eval(store);
        store.data_mut(id)[k] = orig;
        if plus.kinks != base.kinks || minus.kinks != base.kinks {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * cfg.h);
        let a = analytic.get(id)[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst = Some(Worst {
                param: store.get(id).name.clone(),
                index: k,
                analytic: a,
                numeric,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    /// L(w) = sum_r (x_r . w - y_r)^2
    fn quad_loss(store: &ParamStore, xs: &[[f64; 3]], ys: &[f64]) -> f64 {
        let w = store.data(0);
        xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                let r = x[0] * w[0] + x[1] * w[1] + x[2] * w[2] - y;
                r * r
            })
            .sum()
    }

    fn quad_grad(store: &ParamStore, xs: &[[f64; 3]], ys: &[f64]) -> Grads {
        let w = store.data(0).to_vec();
        let mut g = store.zero_grads();
        for (x, y) in xs.iter().zip(ys) {
            let r = x[0] * w[0] + x[1] * w[1] + x[2] * w[2] - y;
            for c in 0..3 {
                g.get_mut(0)[c] += 2.0 * r * x[c];
            }
        }
        g
    }

    #[test]
    fn quadratic_is_exact() {
        let xs = [[1.0, 0.5, -0.3], [0.2, -1.0, 0.8], [0.7, 0.7, 0.1], [-0.4, 0.3, 1.2]];
        let ys = [0.3, -0.2, 1.1, 0.4];
        let mut store = ParamStore::new();
        store.add("w", vec![3], true, vec![0.4, -0.7, 0.25]);
        let g = quad_grad(&store, &xs, &ys);
        let r = grad_check(&mut store, &g, |s| quad_loss(s, &xs, &ys).into(), GradCheckConfig::default());
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let xs = [[1.0, 0.5, -0.3], [0.2, -1.0, 0.8]];
        let ys = [0.3, -0.2];
        let mut store = ParamStore::new();
        store.add("w", vec![3], true, vec![0.4, -0.7, 0.25]);
        let mut g = quad_grad(&store, &xs, &ys);
        g.get_mut(0)[1] *= 1.1;
        let r = grad_check(&mut store, &g, |s| quad_loss(s, &xs, &ys).into(), GradCheckConfig::default());
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst.unwrap().index, 1);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let mut store = ParamStore::new();
        store.add("w", vec![1], true, vec![0.0]);
        let g = store.zero_grads();
        let r = grad_check(
            &mut store,
            &g,
            |s| {
                let w = s.data(0)[0];
                Evaluation {
                    loss: w.abs(),
                    kinks: vec![w > 0.0],
                }
            },
            GradCheckConfig::default(),
        );
        assert_eq!(r.checked, 0);
        assert_eq!(r.skipped_kinks, 1);
    }
}
