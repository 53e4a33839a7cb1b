use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use edgedepth::harness::{
    cmd_ablate_edges, cmd_denominator_histogram, cmd_eval, cmd_generate, cmd_train, EdgeBudget, RunConfig, Strategy,
};
use edgedepth::synth::TemplateKind;
use edgedepth::{Error, Result};

#[derive(Parser)]
#[command(name = "edgedepth", version, about = "Edge-based depth estimation experiments on synthetic objects")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and val splits into the data directory.
    Generate,
    /// Train the weighting model (or the uncertainty head).
    Train,
    /// Evaluate a weighting strategy on the val split.
    Eval,
    /// Mean/median error against the number of kept candidates.
    AblateEdges {
        /// Comma-separated budgets, e.g. `50,500,1500,all`.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<EdgeBudget>>,
    },
    /// Candidate quality binned by denominator magnitude.
    DenomHist,
    /// Print the effective configuration as TOML.
    Config,
}

/// Command-line values override the config file, which overrides defaults.
#[derive(Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "EDGEDEPTH_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    train_count: Option<usize>,
    #[arg(long, global = true)]
    val_count: Option<usize>,
    #[arg(long, global = true, value_parser = parse_template)]
    template: Option<TemplateKind>,
    /// Surface keypoints added to the 10 box keypoints.
    #[arg(long, global = true)]
    n_extra: Option<usize>,
    #[arg(long, global = true)]
    sigma_px: Option<f64>,
    #[arg(long, global = true)]
    sigma_3d: Option<f64>,
    #[arg(long, global = true)]
    p_outlier: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    cls_epochs: Option<usize>,
    #[arg(long, global = true)]
    joint_epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

fn parse_template(s: &str) -> std::result::Result<TemplateKind, String> {
    match s {
        "box" => Ok(TemplateKind::Box),
        "car_like" => Ok(TemplateKind::CarLike),
        _ => Err(format!("unknown template `{s}` (box | car_like)")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Overrides {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        set(&mut c.output_dir, self.output_dir);
        set(&mut c.data.dir, self.data_dir);
        set(&mut c.data.train_count, self.train_count);
        set(&mut c.data.val_count, self.val_count);
        set(&mut c.scene.template, self.template);
        set(&mut c.scene.n_extra, self.n_extra);
        set(&mut c.scene.noise.sigma_px, self.sigma_px);
        set(&mut c.scene.noise.sigma_3d, self.sigma_3d);
        set(&mut c.scene.noise.p_outlier, self.p_outlier);
        set(&mut c.selection.tau, self.tau);
        set(&mut c.selection.k, self.k);
        set(&mut c.model.encoder.layers, self.layers);
        if let Some(h) = self.hidden {
            c.model.encoder.hidden = h;
            c.model.encoder.d_out = h;
        }
        set(&mut c.model.sinkhorn.alpha, self.alpha);
        set(&mut c.model.sinkhorn.max_iters, self.max_iters);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.cls_epochs, self.cls_epochs);
        set(&mut c.train.joint_epochs, self.joint_epochs);
        set(&mut c.train.optimizer.lr, self.lr);
        set(&mut c.train.optimizer.weight_decay, self.weight_decay);
        set(&mut c.train.beta, self.beta);
        set(&mut c.eval.strategy, self.strategy);
        if self.checkpoint.is_some() {
            c.eval.checkpoint = self.checkpoint;
        }
        c.validate()?;
        Ok(c)
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    let out = match cli.command {
        Command::Config => cfg.to_toml()?,
        Command::Generate => to_json(&cmd_generate(&cfg)?)?,
        Command::Train => {
            let start = Instant::now();
            let summary = cmd_train(&cfg, &mut |r| {
                let val = r.val_mae.map_or("-".to_string(), |v| format!("{v:.4}"));
                eprintln!(
                    "epoch {:>3} phase {} loss {:.4} cls {:.4} reg {:.4} val_mae {val}{} [{:.1}s]",
                    r.epoch,
                    r.phase,
                    r.train_loss,
                    r.train_cls,
                    r.train_reg,
                    if r.best { " *" } else { "" },
                    start.elapsed().as_secs_f64()
                );
            })?;
            to_json(&serde_json::json!({
                "checkpoint": summary.checkpoint_path,
                "log": summary.log_path,
                "best_epoch": summary.best.epoch,
                "best_val_mae": summary.best.val_mae,
                "epochs": summary.records.len(),
                "wall_clock_s": start.elapsed().as_secs_f64(),
            }))?
        }
        Command::Eval => {
            let e = cmd_eval(&cfg, None)?;
            let r = &e.report;
            to_json(&serde_json::json!({
                "strategy": r.strategy,
                "objects": r.objects,
                "mean_abs_error": r.mean_abs_error,
                "median_abs_error": r.median_abs_error,
                "p90_abs_error": r.p90_abs_error,
                "report": e.report_path,
                "histogram": e.histogram_path,
            }))?
        }
        Command::AblateEdges { ks } => {
            let (rows, path) = cmd_ablate_edges(&cfg, ks.as_deref())?;
            to_json(&serde_json::json!({ "rows": rows, "csv": path }))?
        }
        Command::DenomHist => {
            let (bins, path) = cmd_denominator_histogram(&cfg)?;
            to_json(&serde_json::json!({ "bins": bins, "csv": path }))?
        }
    };
    println!("{out}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let record = serde_json::json!({ "error": "UsageError", "message": e.to_string().trim_end() });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
