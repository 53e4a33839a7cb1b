//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line for
//! each. With `EDGEDEPTH_ACCEPTANCE_STRICT=1` it exits non-zero if any failed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use edgedepth::dgde::{candidates_for_view, edge_depths, keypoint_terms, Selection};
use edgedepth::fusion::{fuse_depth, weight_uniform};
use edgedepth::geometry::Camera;
use edgedepth::gmw::{
    sinkhorn, EncoderSizes, GmwConfig, GmwModel, LossWeights, PreparedInstance, RunOptions, SinkhornConfig,
};
use edgedepth::harness::{
    ablate_edges, candidate_errors, denominator_quantile_bins, fused_results, generate_splits, train_gmw, Checkpoint,
    EdgeBudget, EpochRecord, RunConfig, Weighter,
};
use edgedepth::nn::{grad_check, Evaluation, GradCheckConfig, Mode};
use edgedepth::synth::{
    generate_instances, make_template, read_dataset, write_dataset, Dims, NoiseModel, ObjectInstance, PoseRanges,
    TemplateKind,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn instances(n_extra: usize, noise: NoiseModel, count: usize, seed: u64) -> Vec<ObjectInstance> {
    let t = make_template(TemplateKind::CarLike, n_extra, Dims::default(), seed).unwrap();
    generate_instances(&t, &PoseRanges::default(), &Camera::kitti_like(), &noise, count, seed + 1).unwrap()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn noiseless_exactness() -> Outcome {
    let start = Instant::now();
    let data = instances(6, NoiseModel::zero(), 1000, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_cand, mut worst_fused, mut checked) = (0.0f64, 0.0f64, 0usize);
    for inst in &data {
        let z_star = inst.z_star();
        let cands: Vec<_> = candidates_for_view(&inst.observed()).unwrap().into_iter().filter(|c| c.valid).collect();
        for c in &cands {
            worst_cand = worst_cand.max((c.z - z_star).abs() / z_star);
            checked += 1;
        }
        let raw: Vec<f64> = (0..cands.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let random: Vec<f64> = raw.iter().map(|x| x / total).collect();
        for w in [weight_uniform(cands.len()).unwrap(), random] {
            worst_fused = worst_fused.max((fuse_depth(&cands, &w).unwrap() - z_star).abs() / z_star);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_cand <= 1e-9 && worst_fused <= 1e-9 && secs < 10.0,
        format!(
            "{checked} candidates from 1000 objects (n=16), max rel err candidate {worst_cand:.2e}, fused {worst_fused:.2e}, {secs:.2} s"
        ),
    )
}

fn closed_form_agreement() -> Outcome {
    let data = instances(6, NoiseModel::zero(), 1000, 100);
    let (mut worst, mut pairs) = (0.0f64, 0usize);
    for inst in &data {
        let kps = keypoint_terms(&inst.observed());
        for a in 0..kps.len() {
            for b in a + 1..kps.len() {
                let d = edge_depths(kps[a].1, kps[b].1, kps[a].2, kps[b].2);
                if d.denom_u > 1e-6 && d.denom_v > 1e-6 {
                    worst = worst.max((d.horizontal.unwrap() - d.vertical.unwrap()).abs());
                    pairs += 1;
                }
            }
        }
    }
    outcome(
        worst <= 1e-8 && pairs > 0,
        format!("{pairs} edges with both denominators > 1e-6, max |z_u - z_v| {worst:.2e} m"),
    )
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Returns (max marginal error, argmax matches, converged count).
fn sinkhorn_scan(alpha: f64, trials: usize, m: usize) -> (f64, usize, usize) {
    let perms = permutations(m);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = SinkhornConfig {
        alpha,
        ..SinkhornConfig::default()
    };
    let (mut worst, mut matches, mut converged) = (0.0f64, 0usize, 0usize);
    for _ in 0..trials {
        let cost = Array2::from_shape_fn((m, m), |_| rng.random_range(0.0..2.0));
        let a = sinkhorn(cost.view(), &cfg).unwrap();
        for k in 0..m {
            worst = worst.max((a.plan.row(k).sum() - 1.0).abs());
            worst = worst.max((a.plan.column(k).sum() - 1.0).abs());
        }
        converged += a.converged as usize;
        let best = perms
            .iter()
            .min_by(|p, q| {
                let c = |p: &Vec<usize>| p.iter().enumerate().map(|(s, &t)| cost[[s, t]]).sum::<f64>();
                c(p).total_cmp(&c(q))
            })
            .unwrap();
        let argmax_ok = (0..m).all(|s| {
            let row = a.plan.row(s);
            let t = (0..m).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
            t == best[s]
        });
        matches += argmax_ok as usize;
    }
    (worst, matches, converged)
}

fn sinkhorn_correctness() -> Outcome {
    let (worst, matches, converged) = sinkhorn_scan(0.005, 100, 6);
    let blur: Vec<String> = [0.05, 0.02]
        .iter()
        .map(|&a| {
            let (_, m, _) = sinkhorn_scan(a, 100, 6);
            format!("{m}/100 at alpha={a}")
        })
        .collect();
    outcome(
        worst <= 1e-9 && matches >= 99,
        format!(
            "m=6, alpha=0.005, 100 costs U[0,2]: max marginal err {worst:.2e}, converged {converged}/100, argmax = brute-force optimum in {matches}/100 (entropic blur: {})",
            blur.join(", ")
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let t = make_template(TemplateKind::Box, 0, Dims::default(), 3).unwrap();
    let mut data = generate_instances(&t, &PoseRanges::default(), &Camera::kitti_like(), &NoiseModel::default(), 2, 4).unwrap();
    for inst in &mut data {
        inst.indices.truncate(6);
        inst.kp3d_clean.truncate(6);
        inst.kp3d.truncate(6);
        inst.px_clean.truncate(6);
        inst.px.truncate(6);
    }
    let prepared: Vec<PreparedInstance> = data
        .iter()
        .map(|i| PreparedInstance::new(i, Selection::default(), Default::default()).unwrap())
        .collect();
    let batch: Vec<&PreparedInstance> = prepared.iter().collect();
    let cfg = GmwConfig {
        encoder: EncoderSizes {
            layers: 3,
            hidden: 16,
            d_out: 16,
        },
        ..GmwConfig::default()
    };
    let model = GmwModel::new(cfg, 5).unwrap();
    let opts = RunOptions {
        mode: Mode::Train,
        loss: LossWeights { cls: 1.0, reg: 1.0 },
        backward: true,
        kinks: true,
    };
    let out = model.run(&model.store, &batch, opts).unwrap();
    let grads = out.grads.unwrap();
    let mut store = model.store.clone();
    let report = grad_check(
        &mut store,
        &grads,
        |s| {
            let o = model.run(s, &batch, RunOptions { backward: false, ..opts }).unwrap();
            Evaluation {
                loss: o.loss,
                kinks: o.kinks,
            }
        },
        GradCheckConfig {
            samples: 1200,
            h: 1e-5,
            seed: 9,
        },
    );
    outcome(
        report.checked >= 1000 && report.max_rel_error < 1e-4,
        format!(
            "n=6, beta=1, {} of {} parameters checked ({} resampled at kinks), max rel err {:.2e}",
            report.checked,
            model.store.num_trainable(),
            report.skipped_kinks,
            report.max_rel_error
        ),
    )
}

fn denominator_quality() -> Outcome {
    let data = instances(6, NoiseModel::pixel_only(1.0), 1000, 200);
    let pairs = candidate_errors(&data).unwrap();
    let bins = denominator_quantile_bins(&pairs, 10, 0.5);
    let frac = |b: &edgedepth::harness::DenomBin| b.count_good as f64 / b.count as f64;
    let (lo, hi) = (frac(&bins[0]), frac(&bins[9]));
    outcome(
        lo <= 0.5 * hi,
        format!(
            "sigma_px=1, 1000 objects, {} candidates: good fraction lowest decile {lo:.3}, highest decile {hi:.3}",
            pairs.len()
        ),
    )
}

/// Reduced training configuration shared by the learning criteria.
fn learning_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 2024;
    cfg.data.train_count = 1000;
    cfg.data.val_count = 300;
    cfg.train.cls_epochs = 4;
    cfg.train.joint_epochs = 4;
    cfg
}

fn held_out() -> Vec<ObjectInstance> {
    let mut cfg = learning_config();
    cfg.seed = 77;
    cfg.data.train_count = 0;
    cfg.data.val_count = 1000;
    generate_splits(&cfg).unwrap().1
}

fn mean_error(weighter: &Weighter, data: &[ObjectInstance]) -> f64 {
    mean(fused_results(weighter, data, Selection::default()).unwrap().iter().map(|r| r.abs_error()))
}

struct Trained {
    model: GmwModel,
    val_mae: f64,
    secs: f64,
}

fn train(cfg: &RunConfig) -> Trained {
    let (train, val) = generate_splits(cfg).unwrap();
    let start = Instant::now();
    let (_, best) = train_gmw(cfg, &train, &val, &mut |_, _| Ok(())).unwrap();
    Trained {
        model: best.gmw_model(cfg).unwrap(),
        val_mae: best.val_mae,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn gmw_beats_baselines(test: &[ObjectInstance], trained: &Trained, cfg: &RunConfig) -> Outcome {
    let gmw = mean_error(&Weighter::Gmw(trained.model.clone()), test);
    let uniform = mean_error(&Weighter::Uniform, test);
    let invd = mean_error(&Weighter::InverseDenominator, test);
    let t = &cfg.train;
    let steps = (cfg.data.train_count * (t.cls_epochs + t.joint_epochs)) as f64;
    let d = RunConfig::default();
    let default_steps = (d.data.train_count * (d.train.cls_epochs + d.train.joint_epochs)) as f64;
    let projected_min = trained.secs / steps * default_steps / 60.0;
    let gain = 1.0 - gmw / uniform;
    outcome(
        gain >= 0.10 && gmw < invd && projected_min < 30.0,
        format!(
            "held-out 1000 objects: gmw {gmw:.3} m, uniform {uniform:.3} m ({:.0}% lower), inverse-denominator {invd:.3} m; trained {} objects x {} epochs in {:.0} s, projected {projected_min:.1} min at defaults",
            gain * 100.0,
            cfg.data.train_count,
            t.cls_epochs + t.joint_epochs,
            trained.secs
        ),
    )
}

fn supervision_priority(test: &[ObjectInstance], staged: &Trained) -> Outcome {
    let mut cfg = learning_config();
    cfg.train.joint_epochs += cfg.train.cls_epochs;
    cfg.train.cls_epochs = 0;
    let from_start = train(&cfg);
    let a = mean_error(&Weighter::Gmw(staged.model.clone()), test);
    let b = mean_error(&Weighter::Gmw(from_start.model), test);
    outcome(
        a <= b && staged.val_mae <= from_start.val_mae,
        format!(
            "beta={}: cls-then-reg (4+4) {a:.3} m vs reg from epoch 0 (0+8) {b:.3} m on held-out objects; best val {:.3} vs {:.3} m",
            cfg.train.beta, staged.val_mae, from_start.val_mae
        ),
    )
}

fn edge_count_ablation(trained: &Trained) -> Outcome {
    let data = instances(63, NoiseModel::default(), 300, 300);
    let ks = [
        EdgeBudget::Top(50),
        EdgeBudget::Top(500),
        EdgeBudget::Top(1000),
        EdgeBudget::Top(1500),
        EdgeBudget::Top(2000),
        EdgeBudget::ALL,
    ];
    let tau = Selection::default().tau;
    let rows = ablate_edges(&Weighter::Gmw(trained.model.clone()), &data, tau, &ks).unwrap();
    let all = rows.last().unwrap();
    let best = rows[..rows.len() - 1]
        .iter()
        .min_by(|a, b| a.mean_abs_error.total_cmp(&b.mean_abs_error))
        .unwrap();
    let table = |rows: &[edgedepth::harness::AblationRow]| {
        rows.iter().map(|r| format!("k={} {:.3}", r.k, r.mean_abs_error)).collect::<Vec<_>>().join(", ")
    };
    let uniform = ablate_edges(&Weighter::Uniform, &data, tau, &[EdgeBudget::Top(1500), EdgeBudget::ALL]).unwrap();
    outcome(
        all.k == 2628 && best.mean_abs_error <= all.mean_abs_error,
        format!(
            "n=73, 300 objects, gmw weights (m): {}; uniform weights: {}",
            table(&rows),
            table(&uniform)
        ),
    )
}

fn determinism_and_serialization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.data.train_count = 60;
    cfg.data.val_count = 20;
    cfg.model.encoder = EncoderSizes {
        layers: 1,
        hidden: 8,
        d_out: 8,
    };
    cfg.train.cls_epochs = 1;
    cfg.train.joint_epochs = 1;
    let mut failures = Vec::new();

    let (tr1, va1) = generate_splits(&cfg).unwrap();
    let (tr2, _) = generate_splits(&cfg).unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_dataset(&p1, &tr1).unwrap();
    write_dataset(&p2, &tr2).unwrap();
    if std::fs::read(&p1).unwrap() != std::fs::read(&p2).unwrap() {
        failures.push("dataset bytes differ");
    }
    if read_dataset(&p1).unwrap() != tr1 {
        failures.push("dataset round trip");
    }

    let run = |tag: &str| {
        let mut log = Vec::new();
        let (_, best) = train_gmw(&cfg, &tr1, &va1, &mut |r: &EpochRecord, _| {
            log.push(serde_json::to_string(r).unwrap());
            Ok(())
        })
        .unwrap();
        let path = dir.path().join(format!("{tag}.json"));
        best.save(&path).unwrap();
        (log, best, path)
    };
    let (log1, best1, c1) = run("c1");
    let (log2, _, c2) = run("c2");
    if log1 != log2 {
        failures.push("loss logs differ");
    }
    if std::fs::read(&c1).unwrap() != std::fs::read(&c2).unwrap() {
        failures.push("checkpoint bytes differ");
    }
    let loaded = Checkpoint::load(&c1).unwrap();
    if loaded != best1 {
        failures.push("checkpoint round trip");
    }
    let a = fused_results(&Weighter::Gmw(best1.gmw_model(&cfg).unwrap()), &va1, cfg.selection).unwrap();
    let b = fused_results(&Weighter::Gmw(loaded.gmw_model(&cfg).unwrap()), &va1, cfg.selection).unwrap();
    if a != b {
        failures.push("reloaded model predicts differently");
    }
    let detail = if failures.is_empty() {
        format!(
            "datasets, {}-line loss logs and checkpoints bit-identical across runs; dataset and checkpoint round trips exact",
            log1.len()
        )
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] criterion {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "noiseless exactness", noiseless_exactness());
    report(2, "closed-form agreement", closed_form_agreement());
    report(3, "sinkhorn correctness", sinkhorn_correctness());
    report(4, "gradient fidelity", gradient_fidelity());
    report(5, "denominator quality", denominator_quality());
    let test = held_out();
    let cfg = learning_config();
    let staged = train(&cfg);
    report(6, "gmw beats uniform", gmw_beats_baselines(&test, &staged, &cfg));
    report(7, "supervision priority", supervision_priority(&test, &staged));
    report(8, "edge-count ablation", edge_count_ablation(&staged));
    report(9, "determinism and serialization", determinism_and_serialization());
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        if std::env::var("EDGEDEPTH_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
