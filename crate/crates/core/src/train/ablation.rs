use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_phantoms, Modality, VolumeRecord};
use crate::error::{Error, Result};
use crate::train::config::TrainConfig;
use crate::train::metrics::MetricsRecord;
use crate::train::run::{evaluate_samples, train_samples, Sample, TrainOptions};
use crate::data::{split_dataset, Split};

/// With/without edge stream comparison over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub phantoms: usize,
    pub extent: usize,
    pub modality: Modality,
    pub data_seed: u64,
    pub train_fraction: f64,
    /// One paired run per seed; each sets both the model and the data-order seed.
    pub seeds: Vec<u64>,
    /// Template for every run; `model.edge_stream` and the seeds are overridden.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_edge: Vec<MetricsRecord>,
    pub without_edge: Vec<MetricsRecord>,
    pub with_edge_dice: MeanStd,
    pub without_edge_dice: MeanStd,
    pub with_composite: Option<MeanStd>,
    pub without_composite: Option<MeanStd>,
    pub edge_head_dice: MeanStd,
}

impl AblationReport {
    /// With-edge mean foreground Dice is at least the baseline minus `margin`.
    pub fn non_inferior(&self, margin: f64) -> bool {
        self.with_edge_dice.mean >= self.without_edge_dice.mean - margin
    }
}

fn mean_std_of(records: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> Option<f64>) -> Option<MeanStd> {
    records.iter().map(f).collect::<Option<Vec<_>>>().map(|v| MeanStd::of(&v))
}

/// Generates the phantoms, trains each seed with and without the edge stream
/// and scores the final models on the validation split.
pub fn run_ablation(
    config: &AblationConfig,
    out_dir: &Path,
    progress: bool,
) -> Result<AblationReport> {
    if config.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let records: Vec<VolumeRecord> = generate_phantoms(
        config.phantoms,
        config.extent,
        config.train.model.classes,
        config.modality,
        config.data_seed,
    )?;
    let samples = records.iter().map(Sample::from_record).collect::<Result<Vec<_>>>()?;
    let (train_set, val_set) = split_dataset(&samples, config.train_fraction, config.data_seed)?;
    let mut with_edge = Vec::new();
    let mut without_edge = Vec::new();
    for &seed in &config.seeds {
        for edge in [true, false] {
            let mut cfg = config.train.clone();
            cfg.seed = seed;
            cfg.model.seed = seed;
            cfg.model.edge_stream = edge;
            cfg.eval_every = 0;
            let dir = out_dir.join(format!("seed{seed}_{}", if edge { "edge" } else { "plain" }));
            let opts = TrainOptions {
                progress,
                ..TrainOptions::default()
            };
            let summary = train_samples(&cfg, &train_set, &[], &dir, &opts)?;
            let record = evaluate_samples(&summary.model, &val_set, summary.epochs_completed, Split::Val)?;
            if progress {
                eprintln!(
                    "seed {seed} edge_stream={edge}: val fg dice {:.4} edge dice {:?}",
                    record.dice.mean_foreground, record.edge_dice
                );
            }
            if edge {
                with_edge.push(record);
            } else {
                without_edge.push(record);
            }
        }
    }
    let fg = |r: &MetricsRecord| Some(r.dice.mean_foreground);
    let composite = |r: &MetricsRecord| r.dice.composite;
    Ok(AblationReport {
        with_edge_dice: mean_std_of(&with_edge, fg).expect("present"),
        without_edge_dice: mean_std_of(&without_edge, fg).expect("present"),
        with_composite: mean_std_of(&with_edge, composite),
        without_composite: mean_std_of(&without_edge, composite),
        edge_head_dice: mean_std_of(&with_edge, |r| r.edge_dice)
            .ok_or_else(|| Error::invalid("ablation", "edge runs produced no edge Dice"))?,
        with_edge,
        without_edge,
    })
}
