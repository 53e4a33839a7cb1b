//! Per-candidate depth uncertainty predicted by a small MLP, trained with a
//! Laplacian negative log-likelihood. Baseline for the learned matching
//! weights.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dgde::{candidates_for_view, mask_and_select, DepthCandidate, Selection};
use crate::error::{Error, Result};
use crate::gmw::{build_graphs_for_view, GraphInputs};
use crate::nn::{AdamW, AdamWConfig, Layer, LayerSpec, Mode, NormConfig, ParamStore};
use crate::synth::{rng_from, ObjectInstance};

/// Normalized pixels of both endpoints, yaw-aligned 3D endpoints, and
/// `ln |denominator|`.
pub const CANDIDATE_FEATURES: usize = 11;

/// Features and depths of the selected candidates of one object.
pub fn candidate_features(instance: &ObjectInstance, selection: Selection) -> Result<(Array2<f64>, Vec<DepthCandidate>)> {
    let view = instance.observed();
    let (g2, g3) = build_graphs_for_view(&view, GraphInputs::default())?;
    let kept = mask_and_select(&candidates_for_view(&view)?, selection.tau, selection.k)?;
    let mut x = Array2::zeros((kept.len(), CANDIDATE_FEATURES));
    for (row, c) in kept.iter().enumerate() {
        let mut r = x.row_mut(row);
        for k in 0..4 {
            r[k] = g2.features[[c.edge, k]];
        }
        for k in 0..6 {
            r[4 + k] = g3.features[[c.edge, k]];
        }
        r[10] = c.denom.ln();
    }
    Ok((x, kept))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    /// Objects per optimizer step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 2,
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

/// MLP from candidate features to `ln sigma`.
#[derive(Debug, Clone)]
pub struct UncertaintyHead {
    pub config: UncertaintyConfig,
    pub store: ParamStore,
    layers: Vec<Layer>,
}

impl UncertaintyHead {
    pub fn new(config: UncertaintyConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.batch_size == 0 {
            return Err(Error::InvalidConfig(format!("bad uncertainty head config {config:?}")));
        }
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed);
        let mut layers = Vec::new();
        for k in 0..=config.layers {
            let d_in = if k == 0 { CANDIDATE_FEATURES } else { config.hidden };
            let last = k == config.layers;
            let spec = LayerSpec {
                d_in,
                d_out: if last { 1 } else { config.hidden },
                context_norm: false,
                batch_norm: false,
                relu: !last,
            };
            layers.push(Layer::new(&mut store, &format!("sigma.layer{k}"), spec, NormConfig::default(), &mut rng));
        }
        Ok(Self { config, store, layers })
    }

    fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Result<(Array1<f64>, Vec<crate::nn::LayerCache>)> {
        let seg = [0..x.nrows()];
        let mut h = x.clone();
        let mut caches = Vec::new();
        for layer in &self.layers {
            let (y, c) = layer.forward(store, h.view(), &seg, Mode::Eval)?;
            caches.push(c);
            h = y;
        }
        Ok((h.column(0).to_owned(), caches))
    }

    /// Predicted standard deviations, one per feature row.
    pub fn sigmas(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.forward(&self.store, x)?.0.iter().map(|s| s.exp()).collect())
    }

    /// Mean Laplacian NLL `|z - z*| / sigma + ln sigma` over all candidates
    /// and, when `grads` is requested, its gradient.
    fn loss(&self, store: &ParamStore, x: &Array2<f64>, err: &Array1<f64>, grads: bool) -> Result<(f64, Option<crate::nn::Grads>)> {
        let (log_sigma, caches) = self.forward(store, x)?;
        let n = err.len() as f64;
        let loss = log_sigma.iter().zip(err).map(|(s, e)| e * (-s).exp() + s).sum::<f64>() / n;
        if !grads {
            return Ok((loss, None));
        }
        let ds = Array1::from_iter(log_sigma.iter().zip(err).map(|(s, e)| (1.0 - e * (-s).exp()) / n));
        let mut g = store.zero_grads();
        let mut d = ds.insert_axis(Axis(1));
        for (layer, c) in self.layers.iter().zip(&caches).rev() {
            d = layer.backward(store, c, d.view(), &mut g)?;
        }
        Ok((loss, Some(g)))
    }

    /// Trains on `(features, candidate depths, z*)` triples; returns the
    /// mean loss of each epoch.
    pub fn fit(&mut self, data: &[(Array2<f64>, Vec<f64>, f64)], seed: u64) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut opt = AdamW::new(&self.store, self.config.optimizer);
        let mut rng = rng_from(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::new();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.config.batch_size) {
                let parts: Vec<_> = chunk.iter().map(|&k| data[k].0.view()).collect();
                let x = ndarray::concatenate(Axis(0), &parts).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                let err: Array1<f64> = chunk
                    .iter()
                    .flat_map(|&k| data[k].1.iter().map(move |z| (z - data[k].2).abs()))
                    .collect();
                let (loss, g) = self.loss(&self.store, &x, &err, true)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("uncertainty head loss {loss}")));
                }
                opt.step(&mut self.store, &g.expect("requested"))?;
                total += loss;
                batches += 1;
            }
            history.push(total / batches as f64);
        }
        Ok(history)
    }

    /// Rebuilds the head for `config` and loads tensors from `store`.
    pub fn from_store(config: UncertaintyConfig, store: &ParamStore) -> Result<Self> {
        let mut head = Self::new(config, 0)?;
        head.store.load_from(store)?;
        Ok(head)
    }
}
