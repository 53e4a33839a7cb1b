use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use super::layer::{Layer, LayerCache, LayerSpec, Mode, NormConfig};
use super::norm::{l2_normalize_rows, l2_normalize_rows_backward};
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of FC -> CN -> BN -> ReLU blocks.
    pub layers: usize,
    pub hidden: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::InvalidConfig(format!("encoder sizes must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Stack of full layers followed by row-wise L2 normalization.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Layer>,
    eps: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub layers: Vec<LayerCache>,
    output: Array2<f64>,
    norms: Array1<f64>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, norm: NormConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|k| {
                let d_in = if k == 0 { config.d_in } else { config.hidden };
                let d_out = if k + 1 == config.layers { config.d_out } else { config.hidden };
                let spec = LayerSpec {
                    d_in,
                    d_out,
                    context_norm: true,
                    batch_norm: true,
                    relu: true,
                };
                Layer::new(store, &format!("{prefix}.layer{k}"), spec, norm, rng)
            })
            .collect();
        Ok(Self {
            config,
            layers,
            eps: norm.eps,
        })
    }

    /// Encodes the stacked edge rows of several instances; `segments`
    /// gives each instance's row range.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: ArrayView2<'_, f64>,
        segments: &[Range<usize>],
        mode: Mode,
    ) -> Result<(Array2<f64>, EncoderCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let (y, cache) = layer.forward(store, h.view(), segments, mode)?;
            caches.push(cache);
            h = y;
        }
        let (out, norms) = l2_normalize_rows(h.view(), self.eps);
        Ok((
            out.clone(),
            EncoderCache {
                layers: caches,
                output: out,
                norms,
            },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &EncoderCache, dy: ArrayView2<'_, f64>, grads: &mut Grads) -> Result<Array2<f64>> {
        let mut d = l2_normalize_rows_backward(cache.output.view(), cache.norms.view(), dy, self.eps);
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            d = layer.backward(store, lc, d.view(), grads)?;
        }
        Ok(d)
    }

    pub fn update_running_stats(&self, store: &mut ParamStore, cache: &EncoderCache) {
        for (layer, lc) in self.layers.iter().zip(&cache.layers) {
            layer.update_running_stats(store, lc);
        }
    }
}
