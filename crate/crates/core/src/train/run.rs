use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{load_volume, normalize, save_volume, Manifest, Split, VolumeRecord};
use crate::edge::{edges_from_labels, BoundaryMode, EdgeMap};
use crate::error::{Error, Result};
use crate::labels::{argmax_channels, LabelVolume};
use crate::losses::{total_loss, LossValues};
use crate::nn::EgModel;
use crate::tape::sigmoid;
use crate::tensor::Tensor;
use crate::train::checkpoint::Checkpoint;
use crate::train::config::TrainConfig;
use crate::train::metrics::{average_scores, composite_dice, edge_dice, DiceScores, MetricsRecord};
use crate::train::optim::{adam_step, lr_schedule, AdamState};

pub const METRICS_FILE: &str = "metrics.jsonl";

/// A normalized record ready for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `[C, D, H, W]`.
    pub image: Tensor,
    /// `[1, D, H, W]`.
    pub labels: LabelVolume,
}

impl Sample {
    pub fn from_record(record: &VolumeRecord) -> Result<Self> {
        let image = normalize(record.image(), record.modality).map_err(|e| Error::Record {
            id: record.id.clone(),
            source: Box::new(e),
        })?;
        Ok(Self {
            id: record.id.clone(),
            image,
            labels: record.labels().clone(),
        })
    }
}

fn stack(samples: &[&Sample]) -> Result<(Tensor, LabelVolume)> {
    let first = samples[0];
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::Record {
                id: s.id.clone(),
                source: Box::new(Error::shape(
                    "batch",
                    format!("image {:?} differs from {:?} of {}", s.image.shape(), first.image.shape(), first.id),
                )),
            });
        }
        data.extend_from_slice(s.image.data());
    }
    let labels = LabelVolume::stack(&samples.iter().map(|s| &s.labels).collect::<Vec<_>>())?;
    Ok((Tensor::new(shape, data)?, labels))
}

fn with_ids<T>(samples: &[&Sample], r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Record {
        id: samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(","),
        source: Box::new(e),
    })
}

/// Binary edge map of edge logits: probability above one half.
pub fn threshold_edges(edge_logits: &Tensor) -> Result<EdgeMap> {
    let d = edge_logits.dims5("threshold_edges")?;
    if d.c != 1 {
        return Err(Error::shape("threshold_edges", "edge logits must have one channel"));
    }
    EdgeMap::new(
        [d.n, d.d, d.h, d.w],
        edge_logits.data().iter().map(|&v| (v > 0.0) as u8).collect(),
    )
}

/// Scores of one batch of logits against their labels, one entry per sample.
fn score_batch(
    semantic: &Tensor,
    edge_logits: Option<&Tensor>,
    labels: &LabelVolume,
    classes: usize,
) -> Result<Vec<(DiceScores, Option<f64>)>> {
    let pred = argmax_channels(semantic)?;
    let edges_pred = edge_logits.map(threshold_edges).transpose()?;
    let mut out = Vec::with_capacity(labels.batch());
    for s in 0..labels.batch() {
        let truth = labels.sample(s);
        let dice = composite_dice(&pred.sample(s), &truth, classes)?;
        let edge = match &edges_pred {
            Some(e) => {
                let spatial = truth.len();
                let dims = truth.dims();
                let mine = EdgeMap::new(dims, e.data()[s * spatial..(s + 1) * spatial].to_vec())?;
                Some(edge_dice(&mine, &edges_from_labels(&truth, classes)?)?)
            }
            None => None,
        };
        out.push((dice, edge));
    }
    Ok(out)
}

fn summarize(epoch: usize, split: Split, scores: &[(DiceScores, Option<f64>)]) -> Result<MetricsRecord> {
    let dice = average_scores(&scores.iter().map(|(d, _)| d.clone()).collect::<Vec<_>>())?;
    let edge = scores.iter().map(|(_, e)| *e).collect::<Option<Vec<f64>>>();
    Ok(MetricsRecord {
        epoch,
        split,
        dice,
        edge_dice: edge.map(|e| e.iter().sum::<f64>() / e.len() as f64),
    })
}

/// Deterministic evaluation of `model` on `samples`, one volume at a time.
pub fn evaluate_samples(model: &EgModel, samples: &[Sample], epoch: usize, split: Split) -> Result<MetricsRecord> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", format!("{split} split is empty")));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let (x, labels) = stack(&[s])?;
        let (semantic, edge) = with_ids(&[s], model.predict(&x))?;
        scores.extend(with_ids(&[s], score_batch(&semantic, edge.as_ref(), &labels, model.config.classes))?);
    }
    summarize(epoch, split, &scores)
}

/// One line of the metrics file.
#[derive(Serialize)]
struct MetricsLine<'a> {
    epoch: usize,
    split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<LossValues>,
    metrics: &'a MetricsRecord,
}

fn write_line(file: &mut File, path: &Path, line: &MetricsLine) -> Result<()> {
    let mut text = serde_json::to_string(line).expect("metrics serialize");
    text.push('\n');
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Controls for [`train`] beyond the config file.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint, appending to the metrics file.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs, writing a checkpoint.
    pub stop_after: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: EgModel,
    /// Running scores of the final epoch's training batches, if any epoch ran.
    pub train_metrics: Option<MetricsRecord>,
    pub val_metrics: Option<MetricsRecord>,
    /// Mean loss of each epoch run in this invocation.
    pub losses: Vec<LossValues>,
    pub final_checkpoint: PathBuf,
    pub epochs_completed: usize,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_epoch{epoch:04}.egck"))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains from a config file's manifest, writing metrics and checkpoints to `out_dir`.
pub fn train(config: &TrainConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    config.validate()?;
    if config.manifest.as_os_str().is_empty() {
        return Err(Error::Config("train config names no manifest".into()));
    }
    let manifest = Manifest::load(&config.manifest)?;
    if manifest.classes != config.model.classes {
        return Err(Error::Config(format!(
            "manifest has {} classes, model {}",
            manifest.classes, config.model.classes
        )));
    }
    let load = |split| -> Result<Vec<Sample>> { manifest.load_split(split)?.iter().map(Sample::from_record).collect() };
    let train_set = load(Split::Train)?;
    let val_set = if config.eval_every > 0 { load(Split::Val)? } else { Vec::new() };
    train_samples(config, &train_set, &val_set, out_dir, opts)
}

/// Training loop over prepared samples.
pub fn train_samples(
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "training split is empty"));
    }
    for s in train_set.iter().chain(val_set) {
        if s.image.shape()[0] != config.model.in_channels {
            return Err(Error::Record {
                id: s.id.clone(),
                source: Box::new(Error::Config(format!(
                    "record has {} channels, model expects {}",
                    s.image.shape()[0],
                    config.model.in_channels
                ))),
            });
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (mut model, mut adam, start) = match &opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model_config != config.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            if ckpt.rng_seed != config.seed {
                return Err(Error::Config("checkpoint seed differs from config seed".into()));
            }
            if ckpt.epoch > config.epochs {
                return Err(Error::Config(format!(
                    "checkpoint epoch {} beyond configured {} epochs",
                    ckpt.epoch, config.epochs
                )));
            }
            (ckpt.model()?, ckpt.adam, ckpt.epoch)
        }
        None => {
            let model = EgModel::new(config.model.clone())?;
            let adam = AdamState::new(model.params.values());
            (model, adam, 0)
        }
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics_file = if opts.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let end = opts.stop_after.map_or(config.epochs, |s| s.min(config.epochs)).max(start);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut losses = Vec::new();
    let mut train_metrics = None;
    let mut val_metrics = None;
    let mut last_checkpoint = None;
    if start == end && opts.resume.is_none() {
        let path = checkpoint_path(out_dir, start);
        Checkpoint::capture(&model, &adam, start, config.seed).save(&path)?;
        last_checkpoint = Some(path);
    }
    for epoch in start..end {
        let lr = lr_schedule(config.alpha0, epoch, config.epochs)?;
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        let mut scores = Vec::with_capacity(train_set.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mode = if config.stochastic_consistency {
                BoundaryMode::Stochastic { seed: rng.next_u64() }
            } else {
                BoundaryMode::Deterministic
            };
            let (x, labels) = stack(&batch)?;
            let step = with_ids(&batch, (|| {
                let mut g = model.graph(true)?;
                let xv = g.tape.constant(x)?;
                let out = model.forward(&mut g, xv)?;
                let bundle = total_loss(&mut g.tape, &out, &labels, &config.weights, mode)?;
                g.tape.backward(bundle.total)?;
                let values = bundle.values(&g.tape)?;
                let semantic = g.tape.value(out.semantic_logits).clone();
                let edge = out.edge_logits.map(|e| g.tape.value(e).clone());
                let grads = g.param_grads()?;
                Ok((values, semantic, edge, grads))
            })())?;
            let (values, semantic, edge, grads) = step;
            scores.extend(score_batch(&semantic, edge.as_ref(), &labels, config.model.classes)?);
            adam_step(model.params.values_mut(), &grads, &mut adam, lr, &config.adam, &names)?;
            let w = batch.len() as f64;
            sums.semantic += values.semantic * w;
            sums.edge += values.edge * w;
            sums.consistency += values.consistency * w;
            sums.total += values.total * w;
        }
        let n = train_set.len() as f64;
        let mean = LossValues {
            semantic: sums.semantic / n,
            edge: sums.edge / n,
            consistency: sums.consistency / n,
            total: sums.total / n,
        };
        let done = epoch + 1;
        let record = summarize(done, Split::Train, &scores)?;
        write_line(
            &mut metrics_file,
            &metrics_path,
            &MetricsLine {
                epoch: done,
                split: Split::Train,
                lr: Some(lr),
                loss: Some(mean),
                metrics: &record,
            },
        )?;
        if opts.progress {
            eprintln!(
                "epoch {done}/{} lr {lr:.3e} loss {:.5} (sem {:.5} edge {:.5} cons {:.5}) train fg dice {:.4}",
                config.epochs, mean.total, mean.semantic, mean.edge, mean.consistency, record.dice.mean_foreground
            );
        }
        losses.push(mean);
        train_metrics = Some(record);
        if config.eval_every > 0 && !val_set.is_empty() && (done % config.eval_every == 0 || done == config.epochs) {
            let record = evaluate_samples(&model, val_set, done, Split::Val)?;
            write_line(
                &mut metrics_file,
                &metrics_path,
                &MetricsLine {
                    epoch: done,
                    split: Split::Val,
                    lr: None,
                    loss: None,
                    metrics: &record,
                },
            )?;
            val_metrics = Some(record);
        }
        if done == end || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            let path = checkpoint_path(out_dir, done);
            Checkpoint::capture(&model, &adam, done, config.seed).save(&path)?;
            last_checkpoint = Some(path);
        }
    }
    metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = match last_checkpoint {
        Some(p) => p,
        None => {
            let path = checkpoint_path(out_dir, end);
            Checkpoint::capture(&model, &adam, end, config.seed).save(&path)?;
            path
        }
    };
    Ok(TrainSummary {
        model,
        train_metrics,
        val_metrics,
        losses,
        final_checkpoint,
        epochs_completed: end,
    })
}

/// Evaluates a checkpoint on one split of a manifest; optionally appends the
/// result to a metrics file.
pub fn evaluate(checkpoint: &Path, manifest: &Path, split: Split, metrics_out: Option<&Path>) -> Result<MetricsRecord> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = Manifest::load(manifest)?;
    if manifest.classes != ckpt.model_config.classes {
        return Err(Error::Config(format!(
            "manifest has {} classes, checkpoint model {}",
            manifest.classes, ckpt.model_config.classes
        )));
    }
    let model = ckpt.model()?;
    let samples = manifest
        .load_split(split)?
        .iter()
        .map(Sample::from_record)
        .collect::<Result<Vec<_>>>()?;
    for s in &samples {
        if s.image.shape()[0] != model.config.in_channels {
            return Err(Error::Record {
                id: s.id.clone(),
                source: Box::new(Error::Config("channel count differs from the model".into())),
            });
        }
    }
    let record = evaluate_samples(&model, &samples, ckpt.epoch, split)?;
    if let Some(path) = metrics_out {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        write_line(
            &mut file,
            path,
            &MetricsLine {
                epoch: ckpt.epoch,
                split,
                lr: None,
                loss: None,
                metrics: &record,
            },
        )?;
    }
    Ok(record)
}

/// Files written by [`predict`].
#[derive(Clone, Debug)]
pub struct PredictOutputs {
    pub labels: PathBuf,
    pub edges: Option<PathBuf>,
    pub renders: Vec<PathBuf>,
}

const LABEL_GLYPHS: &[u8] = b".o#+*%@&$";
const SHADES: &[u8] = b" .:-=+*#%@";

/// Text render of the axial mid-slice `z = D / 2` of a `[D, H, W]` field.
fn render_slice(dims: [usize; 3], glyph: impl Fn(usize) -> u8) -> String {
    let [d, h, w] = dims;
    let z = d / 2;
    let mut out = String::with_capacity(h * (w + 1));
    for y in 0..h {
        for x in 0..w {
            out.push(glyph((z * h + y) * w + x) as char);
        }
        out.push('\n');
    }
    out
}

/// Segments one EGV1 volume and writes the predicted labels, the edge
/// probabilities and axial mid-slice renders to `out_dir`.
///
/// The label file carries the input image with predicted labels; the edge
/// file carries edge probabilities as its image and the thresholded edge map
/// as two-class labels.
pub fn predict(checkpoint: &Path, input: &Path, out_dir: &Path) -> Result<PredictOutputs> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let record = load_volume(input)?;
    if record.num_classes != model.config.classes || record.channels() != model.config.in_channels {
        return Err(Error::Config(format!(
            "{} has {} channels and {} classes, model expects {} and {}",
            input.display(),
            record.channels(),
            record.num_classes,
            model.config.in_channels,
            model.config.classes
        )));
    }
    let sample = Sample::from_record(&record)?;
    let (x, _) = stack(&[&sample])?;
    let (semantic, edge_logits) = with_ids(&[&sample], model.predict(&x))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let [d, h, w] = record.extent();
    let pred = argmax_channels(&semantic)?;
    let label_record = VolumeRecord::new(
        format!("{}-pred", record.id),
        record.modality,
        record.spacing,
        record.num_classes,
        record.image().clone(),
        pred.clone(),
    )?;
    let labels_path = out_dir.join(format!("{}_labels.egv", record.id));
    save_volume(&label_record, &labels_path)?;
    let labels_render = out_dir.join(format!("{}_labels_mid.txt", record.id));
    let text = render_slice([d, h, w], |i| LABEL_GLYPHS[pred.data()[i] as usize % LABEL_GLYPHS.len()]);
    fs::write(&labels_render, text).map_err(|e| Error::io(&labels_render, e))?;
    let mut renders = vec![labels_render];
    let mut edges = None;
    if let Some(logits) = edge_logits {
        let probs = logits.map(sigmoid).reshape(&[1, d, h, w])?;
        let thresholded = threshold_edges(&logits)?;
        let edge_record = VolumeRecord::new(
            format!("{}-edges", record.id),
            record.modality,
            record.spacing,
            2,
            probs.clone(),
            LabelVolume::new([1, d, h, w], thresholded.data().to_vec())?,
        )?;
        let path = out_dir.join(format!("{}_edges.egv", record.id));
        save_volume(&edge_record, &path)?;
        let render = out_dir.join(format!("{}_edges_mid.txt", record.id));
        let text = render_slice([d, h, w], |i| {
            let p = edge_record.image().data()[i];
            SHADES[((p * SHADES.len() as f64) as usize).min(SHADES.len() - 1)]
        });
        fs::write(&render, text).map_err(|e| Error::io(&render, e))?;
        renders.push(render);
        edges = Some(path);
    }
    Ok(PredictOutputs {
        labels: labels_path,
        edges,
        renders,
    })
}
