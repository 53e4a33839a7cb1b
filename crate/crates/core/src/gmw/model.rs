//! The learnable weighting network: two edge encoders, a cost matrix, a
//! Sinkhorn assignment and the weight rule, with a batched backward pass.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::ops::Range;

use super::cost::{cost_diagonal, cost_diagonal_backward, cost_matrix, cost_matrix_backward};
use super::graph::{build_graphs_for_view, GraphInputs};
use super::sinkhorn::{sinkhorn, Assignment, SinkhornConfig};
use super::weights::{
    bce_loss, bce_loss_backward, weights_from_assignment, weights_from_assignment_backward, weights_from_cost,
    weights_from_cost_backward, WeightConfig, WeightRule,
};
use crate::dgde::{candidates_for_view, mask_and_select, DepthCandidate, Selection};
use crate::error::{Error, Result};
use crate::nn::{Encoder, EncoderCache, EncoderConfig, Grads, Mode, NormConfig, ParamStore};
use crate::synth::{rng_from, ObjectInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSizes {
    pub layers: usize,
    pub hidden: usize,
    pub d_out: usize,
}

impl Default for EncoderSizes {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 128,
            d_out: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmwConfig {
    pub encoder: EncoderSizes,
    pub norm: NormConfig,
    pub sinkhorn: SinkhornConfig,
    pub weights: WeightConfig,
    pub inputs: GraphInputs,
    /// Plan entries are clamped to `[clamp, 1 - clamp]` inside the
    /// cross-entropy.
    pub bce_clamp: f64,
}

impl Default for GmwConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSizes::default(),
            norm: NormConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            weights: WeightConfig::default(),
            inputs: GraphInputs::default(),
            bce_clamp: 1e-9,
        }
    }
}

impl GmwConfig {
    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        self.weights.validate()?;
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return Err(Error::InvalidConfig(format!("bce_clamp must be in (0, 0.5), got {}", self.bce_clamp)));
        }
        if !(self.norm.eps > 0.0) || !(0.0..=1.0).contains(&self.norm.momentum) {
            return Err(Error::InvalidConfig(format!("bad normalization settings {:?}", self.norm)));
        }
        Ok(())
    }

    fn encoder(&self, d_in: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.encoder.layers,
            hidden: self.encoder.hidden,
            d_in,
            d_out: self.encoder.d_out,
        }
    }
}

/// Network inputs and fusion targets for one object.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    /// `m x 4` raw 2D edge features.
    pub x2d: Array2<f64>,
    /// `m x 6` raw 3D edge features.
    pub x3d: Array2<f64>,
    /// All `m` candidates in canonical edge order.
    pub candidates: Vec<DepthCandidate>,
    /// Edge indices that survive masking and selection.
    pub selected: Vec<usize>,
    /// Depths of the selected candidates.
    pub z: Array1<f64>,
    pub z_star: f64,
}

impl PreparedInstance {
    pub fn new(instance: &ObjectInstance, selection: Selection, inputs: GraphInputs) -> Result<Self> {
        let view = instance.observed();
        let (g2, g3) = build_graphs_for_view(&view, inputs)?;
        let candidates = candidates_for_view(&view)?;
        let kept = mask_and_select(&candidates, selection.tau, selection.k)?;
        Ok(Self {
            x2d: g2.features,
            x3d: g3.features,
            selected: kept.iter().map(|c| c.edge).collect(),
            z: kept.iter().map(|c| c.z).collect(),
            candidates,
            z_star: instance.z_star(),
        })
    }

    pub fn edge_count(&self) -> usize {
        self.x2d.nrows()
    }
}

/// Multipliers of the two loss terms: `cls * L_c + reg * L_r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub mode: Mode,
    pub loss: LossWeights,
    pub backward: bool,
    /// Collect the kink fingerprint used by gradient checks.
    pub kinks: bool,
}

#[derive(Debug, Clone)]
pub struct InstanceOutput {
    /// Weights over the selected candidates.
    pub weights: Array1<f64>,
    pub z_fused: f64,
    pub cls: f64,
    pub reg: f64,
    /// `None` when the assignment was not needed.
    pub sinkhorn_iterations: Option<usize>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Batch mean of `cls * L_c + reg * L_r`.
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub instances: Vec<InstanceOutput>,
    pub grads: Option<Grads>,
    pub kinks: Vec<bool>,
    caches: (EncoderCache, EncoderCache),
}

#[derive(Debug, Clone)]
pub struct GmwModel {
    pub config: GmwConfig,
    pub store: ParamStore,
    enc2d: Encoder,
    enc3d: Encoder,
}

fn segments(batch: &[&PreparedInstance]) -> Vec<Range<usize>> {
    let mut start = 0;
    batch
        .iter()
        .map(|p| {
            let r = start..start + p.edge_count();
            start = r.end;
            r
        })
        .collect()
}

fn stack(parts: Vec<ndarray::ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
    concatenate(Axis(0), &parts).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

impl GmwModel {
    pub fn new(config: GmwConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed);
        let enc2d = Encoder::new(&mut store, "enc2d", config.encoder(4), config.norm, &mut rng)?;
        let enc3d = Encoder::new(&mut store, "enc3d", config.encoder(6), config.norm, &mut rng)?;
        Ok(Self {
            config,
            store,
            enc2d,
            enc3d,
        })
    }

    fn needs_assignment(&self, loss: LossWeights) -> bool {
        loss.cls != 0.0 || self.config.weights.rule == WeightRule::AssignmentDiagonal
    }

    /// Forward pass (and optionally backward) over a batch using the
    /// parameters in `store`.
    pub fn run(&self, store: &ParamStore, batch: &[&PreparedInstance], opts: RunOptions) -> Result<RunOutput> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let segs = segments(batch);
        let x2 = stack(batch.iter().map(|p| p.x2d.view()).collect())?;
        let x3 = stack(batch.iter().map(|p| p.x3d.view()).collect())?;
        let (f2, c2) = self.enc2d.forward(store, x2.view(), &segs, opts.mode)?;
        let (f3, c3) = self.enc3d.forward(store, x3.view(), &segs, opts.mode)?;

        let mut kinks = Vec::new();
        if opts.kinks {
            for lc in c2.layers.iter().chain(&c3.layers) {
                kinks.extend(lc.activation_pattern());
            }
        }
        let mut df2 = opts.backward.then(|| Array2::zeros(f2.dim()));
        let mut df3 = opts.backward.then(|| Array2::zeros(f3.dim()));
        let scale = 1.0 / batch.len() as f64;
        let wcfg = self.config.weights;
        let mut instances = Vec::with_capacity(batch.len());
        let (mut total, mut cls_sum, mut reg_sum) = (0.0, 0.0, 0.0);

        for (p, seg) in batch.iter().zip(&segs) {
            let a2 = f2.slice(s![seg.clone(), ..]);
            let a3 = f3.slice(s![seg.clone(), ..]);
            let sel2 = a2.select(Axis(0), &p.selected);
            let sel3 = a3.select(Axis(0), &p.selected);

            let mut assignment: Option<(Array2<f64>, Assignment)> = None;
            if self.needs_assignment(opts.loss) {
                let m = cost_matrix(a2, a3)?;
                let a = sinkhorn(m.view(), &self.config.sinkhorn)?;
                assignment = Some((m, a));
            }

            let (w, diag) = match wcfg.rule {
                WeightRule::InverseCost => {
                    let d = cost_diagonal(sel2.view(), sel3.view())?;
                    (weights_from_cost(d.view(), wcfg.eps, wcfg.temperature)?, d)
                }
                WeightRule::AssignmentDiagonal => {
                    let plan = &assignment.as_ref().expect("assignment computed").1.plan;
                    let d: Array1<f64> = p.selected.iter().map(|&s| plan[[s, s]]).collect();
                    (weights_from_assignment(d.view())?, d)
                }
            };
            let z_fused = w.dot(&p.z);
            let residual = z_fused - p.z_star;
            let reg = residual.abs();
            let eye = assignment.as_ref().map(|(m, _)| Array2::eye(m.nrows()));
            let cls = match (&assignment, &eye) {
                (Some((_, a)), Some(eye)) => bce_loss(a.plan.view(), eye.view(), self.config.bce_clamp)?,
                _ => f64::NAN,
            };
            let mut loss = opts.loss.reg * reg;
            if opts.loss.cls != 0.0 {
                loss += opts.loss.cls * cls;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "instance with z*={} gave cls={cls} reg={reg} z_fused={z_fused}",
                    p.z_star
                )));
            }
            total += loss;
            cls_sum += cls;
            reg_sum += reg;
            if opts.kinks {
                kinks.push(residual > 0.0);
                if let Some((_, a)) = &assignment {
                    let c = self.config.bce_clamp;
                    kinks.extend(a.plan.iter().map(|&v| v <= c || v >= 1.0 - c));
                    kinks.extend((0..32).map(|b| (a.iterations >> b) & 1 == 1));
                    kinks.push(a.log_domain);
                    kinks.push(a.refine_steps > 0);
                }
            }

            if let (Some(df2), Some(df3)) = (df2.as_mut(), df3.as_mut()) {
                let dz = scale * opts.loss.reg * if residual > 0.0 { 1.0 } else if residual < 0.0 { -1.0 } else { 0.0 };
                let dw = p.z.mapv(|z| dz * z);
                let mut dplan = match (&assignment, &eye) {
                    (Some((_, a)), Some(eye)) if opts.loss.cls != 0.0 => {
                        bce_loss_backward(a.plan.view(), eye.view(), self.config.bce_clamp) * (scale * opts.loss.cls)
                    }
                    (Some((m, _)), _) => Array2::zeros(m.dim()),
                    _ => Array2::zeros((0, 0)),
                };
                let mut d2 = Array2::zeros(a2.dim());
                let mut d3 = Array2::zeros(a3.dim());
                match wcfg.rule {
                    WeightRule::InverseCost => {
                        let dd = weights_from_cost_backward(diag.view(), w.view(), dw.view(), wcfg.eps, wcfg.temperature);
                        let (g2, g3) = cost_diagonal_backward(sel2.view(), sel3.view(), diag.view(), dd.view());
                        for (k, &s) in p.selected.iter().enumerate() {
                            d2.row_mut(s).assign(&g2.row(k));
                            d3.row_mut(s).assign(&g3.row(k));
                        }
                    }
                    WeightRule::AssignmentDiagonal => {
                        let dd = weights_from_assignment_backward(diag.view(), w.view(), dw.view());
                        for (k, &s) in p.selected.iter().enumerate() {
                            dplan[[s, s]] += dd[k];
                        }
                    }
                }
                if let Some((m, a)) = &assignment {
                    let dm = a.backward(dplan.view())?;
                    let (g2, g3) = cost_matrix_backward(a2, a3, m.view(), dm.view());
                    d2 += &g2;
                    d3 += &g3;
                }
                df2.slice_mut(s![seg.clone(), ..]).assign(&d2);
                df3.slice_mut(s![seg.clone(), ..]).assign(&d3);
            }

            instances.push(InstanceOutput {
                weights: w,
                z_fused,
                cls,
                reg,
                sinkhorn_iterations: assignment.as_ref().map(|(_, a)| a.iterations),
                converged: assignment.as_ref().is_none_or(|(_, a)| a.converged),
            });
        }

        let grads = match (df2, df3) {
            (Some(df2), Some(df3)) => {
                let mut g = store.zero_grads();
                self.enc2d.backward(store, &c2, df2.view(), &mut g)?;
                self.enc3d.backward(store, &c3, df3.view(), &mut g)?;
                Some(g)
            }
            _ => None,
        };
        Ok(RunOutput {
            loss: total * scale,
            cls: cls_sum * scale,
            reg: reg_sum * scale,
            instances,
            grads,
            kinks,
            caches: (c2, c3),
        })
    }

    /// Folds the batch statistics of a train-mode run into the running
    /// statistics.
    pub fn update_running_stats(&mut self, out: &RunOutput) {
        self.enc2d.update_running_stats(&mut self.store, &out.caches.0);
        self.enc3d.update_running_stats(&mut self.store, &out.caches.1);
    }

    /// Eval-mode fusion weights and fused depth for a batch.
    pub fn infer(&self, batch: &[&PreparedInstance]) -> Result<Vec<InstanceOutput>> {
        let opts = RunOptions {
            mode: Mode::Eval,
            loss: LossWeights { cls: 0.0, reg: 0.0 },
            backward: false,
            kinks: false,
        };
        Ok(self.run(&self.store, batch, opts)?.instances)
    }
}
