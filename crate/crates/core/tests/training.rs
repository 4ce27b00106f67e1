use std::fs;
use std::path::Path;

use egcnn::data::{generate_phantoms, load_volume, write_dataset, Manifest, Modality, Split};
use egcnn::nn::ModelConfig;
use egcnn::train::{
    checkpoint_path, evaluate, predict, train, train_samples, Checkpoint, Sample, TrainConfig, TrainOptions,
    METRICS_FILE,
};

fn tiny_model(edge_stream: bool) -> ModelConfig {
    ModelConfig {
        resolutions: 2,
        base_channels: 4,
        classes: 3,
        groups: 4,
        edge_stream,
        seed: 3,
        ..ModelConfig::default()
    }
}

/// Four 8^3 phantoms split 3/1, plus a config pointing at them.
fn tiny_dataset(dir: &Path, epochs: usize) -> TrainConfig {
    let records = generate_phantoms(4, 8, 3, Modality::MriLike, 17).unwrap();
    write_dataset(&records, dir, 0.75, 2).unwrap();
    TrainConfig {
        alpha0: 1e-3,
        seed: 5,
        eval_every: 2,
        model: tiny_model(true),
        ..TrainConfig::new(dir.join("manifest.toml"), epochs)
    }
}

fn quiet() -> TrainOptions {
    TrainOptions::default()
}

#[test]
fn zero_epochs_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_dataset(dir.path(), 0);
    let out = dir.path().join("run");
    let summary = train(&cfg, &out, &quiet()).unwrap();
    assert_eq!(summary.epochs_completed, 0);
    assert!(summary.losses.is_empty());
    let ckpts: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "egck"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    let ckpt = Checkpoint::load(&checkpoint_path(&out, 0)).unwrap();
    assert_eq!(ckpt.epoch, 0);
    assert_eq!(ckpt.adam.step, 0);
    let fresh = egcnn::nn::EgModel::new(cfg.model.clone()).unwrap();
    assert_eq!(ckpt.model().unwrap().params.values(), fresh.params.values());
    assert_eq!(fs::read_to_string(out.join(METRICS_FILE)).unwrap(), "");
}

#[test]
fn loss_on_a_fixed_batch_decreases() {
    let records = generate_phantoms(1, 8, 3, Modality::MriLike, 4).unwrap();
    let samples: Vec<Sample> = records.iter().map(|r| Sample::from_record(r).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        alpha0: 1e-4,
        batch_size: 1,
        stochastic_consistency: false,
        model: tiny_model(true),
        ..TrainConfig::new("", 5)
    };
    let summary = train_samples(&cfg, &samples, &[], dir.path(), &quiet()).unwrap();
    let totals: Vec<f64> = summary.losses.iter().map(|l| l.total).collect();
    assert_eq!(totals.len(), 5);
    for w in totals.windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {totals:?}");
    }
    for l in &summary.losses {
        assert_eq!(l.total, l.semantic + l.consistency + l.edge);
    }
}

#[test]
fn runs_are_reproducible_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_dataset(dir.path(), 4);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    train(&cfg, &a, &quiet()).unwrap();
    train(&cfg, &b, &quiet()).unwrap();
    let metrics_a = fs::read(a.join(METRICS_FILE)).unwrap();
    assert!(!metrics_a.is_empty());
    assert_eq!(metrics_a, fs::read(b.join(METRICS_FILE)).unwrap());
    let final_a = fs::read(checkpoint_path(&a, 4)).unwrap();
    assert_eq!(final_a, fs::read(checkpoint_path(&b, 4)).unwrap());

    let stop = TrainOptions { stop_after: Some(2), ..quiet() };
    let half = train(&cfg, &c, &stop).unwrap();
    assert_eq!(half.epochs_completed, 2);
    let resume = TrainOptions { resume: Some(checkpoint_path(&c, 2)), ..quiet() };
    train(&cfg, &c, &resume).unwrap();
    assert_eq!(fs::read(checkpoint_path(&c, 4)).unwrap(), final_a);
    assert_eq!(fs::read(c.join(METRICS_FILE)).unwrap(), metrics_a);

    let other = TrainConfig { seed: 6, ..cfg.clone() };
    assert!(train(&other, &c, &resume).is_err());
}

#[test]
fn evaluation_is_deterministic_and_appends() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_dataset(dir.path(), 1);
    let out = dir.path().join("run");
    let summary = train(&cfg, &out, &quiet()).unwrap();
    let manifest = dir.path().join("manifest.toml");
    let log = dir.path().join("eval.jsonl");
    let first = evaluate(&summary.final_checkpoint, &manifest, Split::Train, Some(&log)).unwrap();
    let second = evaluate(&summary.final_checkpoint, &manifest, Split::Train, Some(&log)).unwrap();
    assert_eq!(first, second);
    assert!(first.edge_dice.is_some());
    assert_eq!(first.dice.per_class.len(), 3);
    let lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1]);
    let val = evaluate(&summary.final_checkpoint, &manifest, Split::Val, None).unwrap();
    assert_eq!(val.split, Split::Val);
}

#[test]
fn ablation_checkpoint_reports_no_edge_dice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        model: tiny_model(false),
        ..tiny_dataset(dir.path(), 1)
    };
    let summary = train(&cfg, &dir.path().join("run"), &quiet()).unwrap();
    let record = evaluate(&summary.final_checkpoint, &dir.path().join("manifest.toml"), Split::Val, None).unwrap();
    assert_eq!(record.edge_dice, None);
    assert!(summary.losses.iter().all(|l| l.edge == 0.0 && l.consistency == 0.0));
}

#[test]
fn mismatched_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        model: ModelConfig { classes: 2, ..tiny_model(true) },
        ..tiny_dataset(dir.path(), 1)
    };
    assert!(train(&cfg, &dir.path().join("run"), &quiet()).is_err());
}

#[test]
fn predictions_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_dataset(dir.path(), 1);
    let summary = train(&cfg, &dir.path().join("run"), &quiet()).unwrap();
    let manifest = Manifest::load(&dir.path().join("manifest.toml")).unwrap();
    let input = manifest.paths(Split::Val)[0].clone();
    let out = dir.path().join("pred");
    let files = predict(&summary.final_checkpoint, &input, &out).unwrap();
    let source = load_volume(&input).unwrap();
    let labels = load_volume(&files.labels).unwrap();
    assert_eq!(labels.image(), source.image());
    assert_eq!(labels.extent(), source.extent());
    assert_eq!(labels.num_classes, 3);
    let edges = load_volume(files.edges.as_ref().unwrap()).unwrap();
    assert!(edges.image().data().iter().all(|p| (0.0..=1.0).contains(p)));
    for (p, e) in edges.image().data().iter().zip(edges.labels().data()) {
        assert_eq!(*e == 1, *p > 0.5, "probability {p} vs label {e}");
    }
    assert_eq!(files.renders.len(), 2);
    for r in &files.renders {
        let text = fs::read_to_string(r).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().all(|l| l.chars().count() == 8));
    }
}
