//! Experiment runner behind the command-line tool: dataset generation,
//! two-phase training, evaluation and the ablations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{
    DataConfig, EdgeBudget, EvalConfig, RunConfig, SceneConfig, Strategy, Stream, TrainConfig, CONFIG_SCHEMA_VERSION,
};
pub use data::{cmd_generate, generate_splits, load_split, GenerateSummary};
pub use eval::{
    ablate_edges, ablation_csv, candidate_errors, cmd_ablate_edges, cmd_denominator_histogram, cmd_eval,
    denominator_csv, denominator_histogram, denominator_quantile_bins, error_histogram, fused_results, quantile,
    AblationRow, DenomBin, EvalOutput, HistogramBin, MetricsReport, ObjectResult, Weighter,
};
pub use train::{cmd_train, gmw_val_mae, prepare, train_gmw, train_uncertainty, EpochRecord, TrainSummary};
