//! Optimization, metrics, checkpoints, evaluation and the ablation harness.

mod ablation;
mod checkpoint;
mod config;
mod metrics;
mod optim;
mod run;

pub use ablation::{run_ablation, AblationConfig, AblationReport, MeanStd};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use metrics::{average_scores, composite_dice, dice_metric, edge_dice, region_dice, DiceScores, MetricsRecord};
pub use optim::{adam_step, lr_schedule, AdamHyper, AdamState};
pub use run::{
    checkpoint_path, evaluate, evaluate_samples, predict, threshold_edges, train, train_samples, PredictOutputs,
    Sample, TrainOptions, TrainSummary, METRICS_FILE,
};
