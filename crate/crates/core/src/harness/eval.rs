use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::{EdgeBudget, RunConfig, Strategy};
use super::data::load_split;
use crate::dgde::{candidates_for_view, mask_and_select, Selection};
use crate::error::{Error, Result};
use crate::fusion::{
    candidate_features, estimate_location, fuse_depth, weight_inverse_denominator, weight_uncertainty, weight_uniform,
    UncertaintyHead,
};
use crate::gmw::{GmwModel, PreparedInstance};
use crate::synth::ObjectInstance;

/// A weighting strategy ready to run.
#[derive(Debug, Clone)]
pub enum Weighter {
    Uniform,
    InverseDenominator,
    Uncertainty(UncertaintyHead),
    Gmw(GmwModel),
}

impl Weighter {
    pub fn strategy(&self) -> Strategy {
        match self {
            Weighter::Uniform => Strategy::Uniform,
            Weighter::InverseDenominator => Strategy::InverseDenominator,
            Weighter::Uncertainty(_) => Strategy::Uncertainty,
            Weighter::Gmw(_) => Strategy::Gmw,
        }
    }

    /// Builds the configured strategy, loading its checkpoint if it has one.
    pub fn load(cfg: &RunConfig, strategy: Strategy) -> Result<Self> {
        Ok(match strategy {
            Strategy::Uniform => Weighter::Uniform,
            Strategy::InverseDenominator => Weighter::InverseDenominator,
            Strategy::Uncertainty => {
                Weighter::Uncertainty(Checkpoint::load(&cfg.checkpoint_path(strategy))?.uncertainty_head(cfg)?)
            }
            Strategy::Gmw => Weighter::Gmw(Checkpoint::load(&cfg.checkpoint_path(strategy))?.gmw_model(cfg)?),
        })
    }
}

/// Outcome for one object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectResult {
    pub z_fused: f64,
    pub z_star: f64,
    pub candidates: usize,
    /// `None` when the fused depth is not in front of the camera.
    pub x_error: Option<f64>,
    pub y_error: Option<f64>,
}

impl ObjectResult {
    pub fn abs_error(&self) -> f64 {
        (self.z_fused - self.z_star).abs()
    }
}

fn object_result(instance: &ObjectInstance, z_fused: f64, weights: &[f64]) -> ObjectResult {
    let loc = estimate_location(&instance.observed(), z_fused, weights).ok();
    let t = instance.pose.t;
    ObjectResult {
        z_fused,
        z_star: instance.z_star(),
        candidates: weights.len(),
        x_error: loc.map(|l| (l.x - t.x).abs()),
        y_error: loc.map(|l| (l.y - t.y).abs()),
    }
}

/// Fuses the selected candidates of every object with `weighter`.
pub fn fused_results(weighter: &Weighter, instances: &[ObjectInstance], selection: Selection) -> Result<Vec<ObjectResult>> {
    match weighter {
        Weighter::Gmw(model) => {
            let prepared = instances
                .iter()
                .map(|i| PreparedInstance::new(i, selection, model.config.inputs))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PreparedInstance> = prepared.iter().collect();
            let mut out = Vec::with_capacity(instances.len());
            for (chunk, insts) in refs.chunks(64).zip(instances.chunks(64)) {
                for (o, inst) in model.infer(chunk)?.iter().zip(insts) {
                    out.push(object_result(inst, o.z_fused, o.weights.as_slice().expect("contiguous")));
                }
            }
            Ok(out)
        }
        _ => instances
            .iter()
            .map(|inst| {
                let (cands, w) = match weighter {
                    Weighter::Uniform => {
                        let c = mask_and_select(&candidates_for_view(&inst.observed())?, selection.tau, selection.k)?;
                        let w = weight_uniform(c.len())?;
                        (c, w)
                    }
                    Weighter::InverseDenominator => {
                        let c = mask_and_select(&candidates_for_view(&inst.observed())?, selection.tau, selection.k)?;
                        let w = weight_inverse_denominator(&c)?;
                        (c, w)
                    }
                    Weighter::Uncertainty(head) => {
                        let (x, c) = candidate_features(inst, selection)?;
                        let w = weight_uncertainty(&head.sigmas(&x)?)?;
                        (c, w)
                    }
                    Weighter::Gmw(_) => unreachable!(),
                };
                Ok(object_result(inst, fuse_depth(&cands, &w)?, &w))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    /// `None` for the overflow bin.
    pub hi: Option<f64>,
    pub count: usize,
}

/// Fixed-width bins from 0 plus one overflow bin; counts sum to
/// `errors.len()`.
pub fn error_histogram(errors: &[f64], width: f64, bins: usize) -> Vec<HistogramBin> {
    let mut out: Vec<HistogramBin> = (0..=bins)
        .map(|b| HistogramBin {
            lo: b as f64 * width,
            hi: (b < bins).then(|| (b + 1) as f64 * width),
            count: 0,
        })
        .collect();
    for &e in errors {
        let b = (e / width).floor();
        // NaN and everything past the last bin land in the overflow bin
        let idx = if b >= 0.0 && b < bins as f64 { b as usize } else { bins };
        out[idx].count += 1;
    }
    out
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: Strategy,
    pub objects: usize,
    pub mean_abs_error: f64,
    pub median_abs_error: f64,
    pub p90_abs_error: f64,
    pub p95_abs_error: f64,
    pub max_abs_error: f64,
    pub mean_abs_x_error: Option<f64>,
    pub mean_abs_y_error: Option<f64>,
    pub mean_candidates: f64,
    pub histogram: Vec<HistogramBin>,
    /// Per-object absolute depth error, in dataset order.
    pub errors: Vec<f64>,
    pub config: RunConfig,
    pub wall_clock_s: f64,
}

impl MetricsReport {
    pub fn new(strategy: Strategy, results: &[ObjectResult], cfg: &RunConfig, wall_clock_s: f64) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let errors: Vec<f64> = results.iter().map(|r| r.abs_error()).collect();
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            strategy,
            objects: results.len(),
            mean_abs_error: mean_of(errors.iter().copied()).expect("nonempty"),
            median_abs_error: quantile(&sorted, 0.5),
            p90_abs_error: quantile(&sorted, 0.9),
            p95_abs_error: quantile(&sorted, 0.95),
            max_abs_error: sorted[sorted.len() - 1],
            mean_abs_x_error: mean_of(results.iter().filter_map(|r| r.x_error)),
            mean_abs_y_error: mean_of(results.iter().filter_map(|r| r.y_error)),
            mean_candidates: mean_of(results.iter().map(|r| r.candidates as f64)).expect("nonempty"),
            histogram: error_histogram(&errors, cfg.eval.hist_bin_width, cfg.eval.hist_bins),
            errors,
            config: cfg.clone(),
            wall_clock_s,
        })
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for b in &self.histogram {
            let _ = writeln!(s, "{},{},{}", b.lo, b.hi.unwrap_or(f64::INFINITY), b.count);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub report_path: PathBuf,
    pub histogram_path: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Evaluates `strategy` (the configured one when `None`) on the val split.
pub fn cmd_eval(cfg: &RunConfig, strategy: Option<Strategy>) -> Result<EvalOutput> {
    cfg.validate()?;
    let strategy = strategy.unwrap_or(cfg.eval.strategy);
    let val = load_split(&cfg.data.val_path())?;
    let weighter = Weighter::load(cfg, strategy)?;
    let start = Instant::now();
    let results = fused_results(&weighter, &val, cfg.selection)?;
    let report = MetricsReport::new(strategy, &results, cfg, start.elapsed().as_secs_f64())?;
    let report_path = cfg.output_dir.join(format!("eval_{strategy}.json"));
    let histogram_path = cfg.output_dir.join(format!("eval_{strategy}_hist.csv"));
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_text(&report_path, &json)?;
    write_text(&histogram_path, &report.histogram_csv())?;
    Ok(EvalOutput {
        report,
        report_path,
        histogram_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub budget: EdgeBudget,
    /// The budget with `all` resolved to the edge count.
    pub k: usize,
    pub mean_candidates: f64,
    pub mean_abs_error: f64,
    pub median_abs_error: f64,
}

/// Mean and median error of `weighter` for each candidate budget.
pub fn ablate_edges(weighter: &Weighter, instances: &[ObjectInstance], tau: f64, ks: &[EdgeBudget]) -> Result<Vec<AblationRow>> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let edges = instances.iter().map(|i| i.len() * (i.len().saturating_sub(1)) / 2).max().unwrap_or(0);
    ks.iter()
        .map(|&budget| {
            let k = budget.limit().min(edges.max(1));
            let results = fused_results(weighter, instances, Selection { tau, k })?;
            let mut errors: Vec<f64> = results.iter().map(|r| r.abs_error()).collect();
            errors.sort_by(f64::total_cmp);
            Ok(AblationRow {
                budget,
                k: match budget {
                    EdgeBudget::Top(k) => k,
                    EdgeBudget::All(_) => edges,
                },
                mean_candidates: mean_of(results.iter().map(|r| r.candidates as f64)).expect("nonempty"),
                mean_abs_error: mean_of(errors.iter().copied()).expect("nonempty"),
                median_abs_error: quantile(&errors, 0.5),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("k,mean_candidates,mean_abs_error,median_abs_error\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.k, r.mean_candidates, r.mean_abs_error, r.median_abs_error);
    }
    s
}

/// Runs the edge-budget ablation on the val split and writes
/// `<output_dir>/ablate_edges.csv`. `ks` overrides the configured budgets.
pub fn cmd_ablate_edges(cfg: &RunConfig, ks: Option<&[EdgeBudget]>) -> Result<(Vec<AblationRow>, PathBuf)> {
    cfg.validate()?;
    let ks = ks.unwrap_or(&cfg.eval.ablation_ks);
    if ks.is_empty() {
        return Err(Error::InvalidConfig("no edge budgets given".into()));
    }
    let val = load_split(&cfg.data.val_path())?;
    let weighter = Weighter::load(cfg, cfg.eval.strategy)?;
    let rows = ablate_edges(&weighter, &val, cfg.selection.tau, ks)?;
    let path = cfg.output_dir.join("ablate_edges.csv");
    write_text(&path, &ablation_csv(&rows))?;
    Ok((rows, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenomBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Candidates within the good-depth threshold.
    pub count_good: usize,
}

/// `(|denominator|, |z - z*|)` of every valid candidate, unmasked.
pub fn candidate_errors(instances: &[ObjectInstance]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for inst in instances {
        let z_star = inst.z_star();
        for c in candidates_for_view(&inst.observed())? {
            if c.valid && c.z.is_finite() {
                out.push((c.denom, (c.z - z_star).abs()));
            }
        }
    }
    Ok(out)
}

/// Log-spaced bins over `range`, with an underflow bin `[0, lo)` and an
/// overflow bin `[hi, inf)`.
pub fn denominator_histogram(pairs: &[(f64, f64)], bins: usize, range: (f64, f64), good: f64) -> Vec<DenomBin> {
    let (lo, hi) = range;
    let step = (hi / lo).ln() / bins as f64;
    let mut edges = vec![0.0];
    edges.extend((0..=bins).map(|b| if b == bins { hi } else { lo * (step * b as f64).exp() }));
    edges.push(f64::INFINITY);
    let mut out: Vec<DenomBin> = edges
        .windows(2)
        .map(|w| DenomBin {
            lo: w[0],
            hi: w[1],
            count: 0,
            count_good: 0,
        })
        .collect();
    for &(d, err) in pairs {
        let idx = out.partition_point(|b| b.hi <= d).min(out.len() - 1);
        out[idx].count += 1;
        if err < good {
            out[idx].count_good += 1;
        }
    }
    out
}

/// Equal-count bins by denominator (10 for deciles).
pub fn denominator_quantile_bins(pairs: &[(f64, f64)], bins: usize, good: f64) -> Vec<DenomBin> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    (0..bins)
        .filter_map(|b| {
            let part = &sorted[b * n / bins..(b + 1) * n / bins];
            Some(DenomBin {
                lo: part.first()?.0,
                hi: part.last()?.0,
                count: part.len(),
                count_good: part.iter().filter(|p| p.1 < good).count(),
            })
        })
        .collect()
}

pub fn denominator_csv(bins: &[DenomBin]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count,count_good\n");
    for b in bins {
        let _ = writeln!(s, "{},{},{},{}", b.lo, b.hi, b.count, b.count_good);
    }
    s
}

/// Denominator histogram of the val split, written to
/// `<output_dir>/denom_hist.csv`.
pub fn cmd_denominator_histogram(cfg: &RunConfig) -> Result<(Vec<DenomBin>, PathBuf)> {
    cfg.validate()?;
    let val = load_split(&cfg.data.val_path())?;
    let e = &cfg.eval;
    let bins = denominator_histogram(&candidate_errors(&val)?, e.denom_bins, e.denom_range, e.good_threshold);
    let path = cfg.output_dir.join("denom_hist.csv");
    write_text(&path, &denominator_csv(&bins))?;
    Ok((bins, path))
}
