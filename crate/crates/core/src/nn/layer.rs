use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use super::norm::{context_norm, context_norm_backward, standardize, standardize_backward};
use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch normalization uses the statistics of the current batch.
    Train,
    /// Batch normalization uses its running statistics.
    Eval,
}

/// Which stages follow the fully-connected map: FC -> CN -> BN -> ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub context_norm: bool,
    pub batch_norm: bool,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub eps: f64,
    /// Weight of the old value in the running-statistics update.
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub norm: NormConfig,
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct LayerCache {
    mode: Mode,
    input: Array2<f64>,
    segments: Vec<Range<usize>>,
    cn_out: Option<Array2<f64>>,
    cn_inv_std: Vec<Array1<f64>>,
    bn_xhat: Option<Array2<f64>>,
    bn_inv_std: Option<Array1<f64>>,
    /// Batch mean/variance, present in train mode.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    pre_relu: Array2<f64>,
}

impl LayerCache {
    /// Signs of the rectifier inputs; used to detect kinks in gradient checks.
    pub fn activation_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre_relu.iter().map(|&v| v > 0.0)
    }
}

impl Layer {
    /// Registers the layer's tensors under `prefix`. FC weights are drawn
    /// uniformly from +-sqrt(6 / (fan_in + fan_out)); biases start at zero,
    /// normalization scale at 1 and shift at 0.
    pub fn new(store: &mut ParamStore, prefix: &str, spec: LayerSpec, norm: NormConfig, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (spec.d_in + spec.d_out) as f64).sqrt();
        let w = (0..spec.d_in * spec.d_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let weight = store.add(format!("{prefix}.weight"), vec![spec.d_in, spec.d_out], true, w);
        let bias = store.add(format!("{prefix}.bias"), vec![spec.d_out], true, vec![0.0; spec.d_out]);
        let bn = spec.batch_norm.then(|| BatchNormParams {
            gamma: store.add(format!("{prefix}.bn.gamma"), vec![spec.d_out], true, vec![1.0; spec.d_out]),
            beta: store.add(format!("{prefix}.bn.beta"), vec![spec.d_out], true, vec![0.0; spec.d_out]),
            running_mean: store.add(format!("{prefix}.bn.running_mean"), vec![spec.d_out], false, vec![0.0; spec.d_out]),
            running_var: store.add(format!("{prefix}.bn.running_var"), vec![spec.d_out], false, vec![1.0; spec.d_out]),
        });
        Self {
            spec,
            norm,
            weight,
            bias,
            bn,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: ArrayView2<'_, f64>,
        segments: &[Range<usize>],
        mode: Mode,
    ) -> Result<(Array2<f64>, LayerCache)> {
        if x.ncols() != self.spec.d_in {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} input columns, got {}",
                self.spec.d_in,
                x.ncols()
            )));
        }
        if let Some(last) = segments.last() {
            if last.end != x.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "segments cover {} rows, input has {}",
                    last.end,
                    x.nrows()
                )));
            }
        }
        let mut y = x.dot(&store.matrix(self.weight)) + &store.vector(self.bias);

        let mut cn_out = None;
        let mut cn_inv_std = Vec::new();
        if self.spec.context_norm {
            let (out, inv) = context_norm(y.view(), segments, self.norm.eps);
            y = out.clone();
            cn_out = Some(out);
            cn_inv_std = inv;
        }

        let (mut bn_xhat, mut bn_inv_std, mut batch_stats) = (None, None, None);
        if let Some(bn) = &self.bn {
            let (xhat, inv_std) = match mode {
                Mode::Train => {
                    let st = standardize(y.view(), self.norm.eps);
                    batch_stats = Some((st.mean, st.var));
                    (st.xhat, st.inv_std)
                }
                Mode::Eval => {
                    let inv_std = store.vector(bn.running_var).mapv(|v| 1.0 / (v + self.norm.eps).sqrt());
                    let xhat = (&y - &store.vector(bn.running_mean)) * &inv_std;
                    (xhat, inv_std)
                }
            };
            y = &xhat * &store.vector(bn.gamma) + &store.vector(bn.beta);
            bn_xhat = Some(xhat);
            bn_inv_std = Some(inv_std);
        }

        let pre_relu = y.clone();
        if self.spec.relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
        Ok((
            y,
            LayerCache {
                mode,
                input: x.to_owned(),
                segments: segments.to_vec(),
                cn_out,
                cn_inv_std,
                bn_xhat,
                bn_inv_std,
                batch_stats,
                pre_relu,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, store: &ParamStore, cache: &LayerCache, dy: ArrayView2<'_, f64>, grads: &mut Grads) -> Result<Array2<f64>> {
        if dy.dim() != cache.pre_relu.dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} does not match layer output {:?}",
                dy.dim(),
                cache.pre_relu.dim()
            )));
        }
        let mut d = dy.to_owned();
        if self.spec.relu {
            d.zip_mut_with(&cache.pre_relu, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0
                }
            });
        }

        if let Some(bn) = &self.bn {
            let xhat = cache.bn_xhat.as_ref().expect("bn cache");
            let inv_std = cache.bn_inv_std.as_ref().expect("bn cache");
            let dgamma = (&d * xhat).sum_axis(Axis(0));
            let dbeta = d.sum_axis(Axis(0));
            add_into(grads.get_mut(bn.gamma), dgamma.iter());
            add_into(grads.get_mut(bn.beta), dbeta.iter());
            let dxhat = &d * &store.vector(bn.gamma);
            d = match cache.mode {
                Mode::Train => standardize_backward(xhat.view(), inv_std.view(), dxhat.view()),
                Mode::Eval => dxhat * inv_std,
            };
        }

        if self.spec.context_norm {
            let out = cache.cn_out.as_ref().expect("cn cache");
            d = context_norm_backward(out.view(), &cache.cn_inv_std, &cache.segments, d.view());
        }

        let dw = cache.input.t().dot(&d);
        add_into(grads.get_mut(self.weight), dw.iter());
        let db = d.sum_axis(Axis(0));
        add_into(grads.get_mut(self.bias), db.iter());
        Ok(d.dot(&store.matrix(self.weight).t()))
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// statistics.
    pub fn update_running_stats(&self, store: &mut ParamStore, cache: &LayerCache) {
        if let (Some(bn), Some((mean, var))) = (&self.bn, &cache.batch_stats) {
            let m = self.norm.momentum;
            for (r, b) in store.data_mut(bn.running_mean).iter_mut().zip(mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in store.data_mut(bn.running_var).iter_mut().zip(var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }
}

fn add_into<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::rng_from;
    use ndarray::array;

    fn make(spec: LayerSpec, seed: u64) -> (ParamStore, Layer) {
        let mut store = ParamStore::new();
        let layer = Layer::new(&mut store, "l", spec, NormConfig::default(), &mut rng_from(seed));
        (store, layer)
    }

    fn full(d_in: usize, d_out: usize) -> LayerSpec {
        LayerSpec {
            d_in,
            d_out,
            context_norm: true,
            batch_norm: true,
            relu: true,
        }
    }

    #[test]
    fn equal_rows_give_zero_context_norm() {
        let spec = LayerSpec {
            relu: false,
            batch_norm: false,
            ..full(2, 2)
        };
        let (mut store, layer) = make(spec, 1);
        store.data_mut(layer.weight).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = array![[0.4, -2.0], [0.4, -2.0], [0.4, -2.0]];
        let (y, _) = layer.forward(&store, x.view(), &[0..3], Mode::Train).unwrap();
        // the mean of equal values can be off by an ulp, amplified by 1/sqrt(eps)
        assert!(y.iter().all(|&v| v.abs() < 1e-12), "{y:?}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (store, layer) = make(full(3, 2), 1);
        let x = Array2::zeros((4, 2));
        assert!(matches!(
            layer.forward(&store, x.view(), &[0..4], Mode::Train),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Scalar re-implementation of FC -> CN -> BN(train) -> ReLU.
    fn scalar_oracle(x: &[[f64; 2]; 3], w: &[f64], b: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> [[f64; 2]; 3] {
        let mut y = [[0.0; 2]; 3];
        for r in 0..3 {
            for c in 0..2 {
                y[r][c] = x[r][0] * w[c] + x[r][1] * w[2 + c] + b[c];
            }
        }
        for _stage in 0..2 {
            for c in 0..2 {
                let mean = (y[0][c] + y[1][c] + y[2][c]) / 3.0;
                let var = ((y[0][c] - mean).powi(2) + (y[1][c] - mean).powi(2) + (y[2][c] - mean).powi(2)) / 3.0;
                for row in y.iter_mut() {
                    row[c] = (row[c] - mean) / (var + eps).sqrt();
                }
            }
        }
        for row in y.iter_mut() {
            for c in 0..2 {
                row[c] = (gamma[c] * row[c] + beta[c]).max(0.0);
            }
        }
        y
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let (mut store, layer) = make(full(2, 2), 7);
        let bn = layer.bn.unwrap();
        store.data_mut(layer.bias).copy_from_slice(&[0.3, -0.1]);
        store.data_mut(bn.gamma).copy_from_slice(&[1.3, 0.7]);
        store.data_mut(bn.beta).copy_from_slice(&[0.2, -0.4]);
        let xs = [[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]];
        let x = Array2::from_shape_fn((3, 2), |(r, c)| xs[r][c]);
        let (y, _) = layer.forward(&store, x.view(), &[0..3], Mode::Train).unwrap();
        let expect = scalar_oracle(
            &xs,
            store.data(layer.weight),
            store.data(layer.bias),
            store.data(bn.gamma),
            store.data(bn.beta),
            1e-8,
        );
        for r in 0..3 {
            for c in 0..2 {
                assert!((y[[r, c]] - expect[r][c]).abs() < 1e-12, "{r},{c}");
            }
        }
    }

    fn fd_check(spec: LayerSpec, mode: Mode, seed: u64) {
        let (mut store, layer) = make(spec, seed);
        if let Some(bn) = layer.bn {
            store.data_mut(bn.running_mean).copy_from_slice(&vec![0.1; spec.d_out]);
            store.data_mut(bn.running_var).copy_from_slice(&vec![0.8; spec.d_out]);
            store.data_mut(bn.gamma).iter_mut().enumerate().for_each(|(k, g)| *g = 1.0 + 0.1 * k as f64);
            store.data_mut(bn.beta).iter_mut().enumerate().for_each(|(k, g)| *g = 0.5 - 0.2 * k as f64);
        }
        let x = array![[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]];
        let dy = array![[0.3, -0.8], [1.1, 0.4], [-0.6, 0.9]];
        let segs = [0..3];
        let loss = |store: &ParamStore, x: &Array2<f64>| {
            let (y, _) = layer.forward(store, x.view(), &segs, mode).unwrap();
            (y * &dy).sum()
        };
        let (_, cache) = layer.forward(&store, x.view(), &segs, mode).unwrap();
        let mut grads = store.zero_grads();
        let dx = layer.backward(&store, &cache, dy.view(), &mut grads).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for r in 0..3 {
            for c in 0..2 {
                let mut p = x.clone();
                p[[r, c]] += h;
                let mut m = x.clone();
                m[[r, c]] -= h;
                let fd = (loss(&store, &p) - loss(&store, &m)) / (2.0 * h);
                assert!(rel(dx[[r, c]], fd) < 1e-4, "dx[{r},{c}] {} vs {fd}", dx[[r, c]]);
            }
        }
        for id in 0..store.tensors().len() {
            if !store.get(id).trainable {
                continue;
            }
            for k in 0..store.get(id).numel() {
                let orig = store.data(id)[k];
                store.data_mut(id)[k] = orig + h;
                let lp = loss(&store, &x);
                store.data_mut(id)[k] = orig - h;
                let lm = loss(&store, &x);
                store.data_mut(id)[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = grads.get(id)[k];
                assert!(rel(a, fd) < 1e-4, "{}[{k}] {a} vs {fd}", store.get(id).name);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(full(2, 2), Mode::Train, 3);
        fd_check(full(2, 2), Mode::Eval, 4);
        let plain = LayerSpec {
            context_norm: false,
            batch_norm: false,
            ..full(2, 2)
        };
        fd_check(plain, Mode::Train, 5);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (store, layer) = make(full(2, 3), 2);
        let x = array![[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]];
        let (_, cache) = layer.forward(&store, x.view(), &[0..3], Mode::Train).unwrap();
        let mut grads = store.zero_grads();
        let dx = layer.backward(&store, &cache, Array2::zeros((3, 3)).view(), &mut grads).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn dead_rectifier_blocks_gradient() {
        let spec = LayerSpec {
            context_norm: false,
            batch_norm: false,
            ..full(1, 1)
        };
        let (mut store, layer) = make(spec, 2);
        store.data_mut(layer.weight)[0] = 1.0;
        let x = array![[-2.0], [3.0]];
        let (_, cache) = layer.forward(&store, x.view(), &[0..2], Mode::Train).unwrap();
        let mut grads = store.zero_grads();
        let dx = layer.backward(&store, &cache, array![[1.0], [1.0]].view(), &mut grads).unwrap();
        assert_eq!(dx[[0, 0]], 0.0);
        assert_eq!(dx[[1, 0]], 1.0);
        assert_eq!(grads.get(layer.weight)[0], 3.0);
    }

    #[test]
    fn context_norm_is_permutation_equivariant() {
        let (store, layer) = make(full(2, 4), 11);
        let x = array![[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0], [0.1, 0.1]];
        let perm = [2usize, 0, 3, 1];
        let xp = Array2::from_shape_fn((4, 2), |(r, c)| x[[perm[r], c]]);
        let (y, _) = layer.forward(&store, x.view(), &[0..4], Mode::Train).unwrap();
        let (yp, _) = layer.forward(&store, xp.view(), &[0..4], Mode::Train).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert!((yp[[r, c]] - y[[perm[r], c]]).abs() < 1e-12);
            }
        }
    }
}
