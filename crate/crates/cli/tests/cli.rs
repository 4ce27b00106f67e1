use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn egcnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egcnn")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const CONFIG: &str = r#"epochs = 2
alpha0 = 1e-3
manifest = "data/manifest.toml"
seed = 2

[model]
resolutions = 2
base_channels = 4
classes = 3
groups = 4
seed = 2
"#;

/// Generates five 8^3 phantoms and trains two epochs on them.
fn trained(dir: &Path, extra: &[&str]) -> Output {
    let gen = egcnn(&["gen", "--count", "5", "--extent", "8", "--classes", "3", "--seed", "4", "--out", "data"], dir);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    fs::write(dir.join("train.toml"), CONFIG).unwrap();
    let mut args = vec!["train", "--config", "train.toml", "--out", "run", "--quiet"];
    args.extend_from_slice(extra);
    egcnn(&args, dir)
}

#[test]
fn gen_writes_volumes_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = egcnn(&["gen", "--count", "5", "--extent", "8", "--out", "data"], dir.path());
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("wrote 5 volumes"));
    assert!(dir.path().join("data/manifest.toml").exists());
    let volumes = fs::read_dir(dir.path().join("data"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "egv"))
        .count();
    assert_eq!(volumes, 5);
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = trained(d, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = d.join("run/checkpoint_epoch0002.egck");
    assert!(ckpt.exists());
    assert!(d.join("run/metrics.jsonl").exists());

    let ckpt = ckpt.to_str().unwrap();
    let eval = egcnn(&["eval", "--checkpoint", ckpt, "--manifest", "data/manifest.toml", "--split", "train"], d);
    assert!(eval.status.success());
    let record: serde_json::Value = serde_json::from_str(stdout(&eval).trim()).unwrap();
    assert_eq!(record["split"], "train");
    assert!(record["edge_dice"].is_number());
    let again = egcnn(&["eval", "--checkpoint", ckpt, "--manifest", "data/manifest.toml", "--split", "train"], d);
    assert_eq!(stdout(&eval), stdout(&again));

    let strict = egcnn(
        &["eval", "--checkpoint", ckpt, "--manifest", "data/manifest.toml", "--split", "val", "--min-dice", "1.5"],
        d,
    );
    assert_eq!(strict.status.code(), Some(1));

    let input = fs::read_dir(d.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "egv"))
        .unwrap();
    let pred = egcnn(&["predict", "--checkpoint", ckpt, "--input", input.to_str().unwrap(), "--out", "pred"], d);
    assert!(pred.status.success());
    let listed: Vec<String> = stdout(&pred).lines().map(String::from).collect();
    assert_eq!(listed.len(), 4);
    assert!(listed.iter().all(|p| d.join(p).exists()));
}

#[test]
fn ablation_flag_drops_edge_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(trained(d, &["--no-edge-stream"]).status.success());
    let eval = egcnn(
        &["eval", "--checkpoint", "run/checkpoint_epoch0002.egck", "--manifest", "data/manifest.toml"],
        d,
    );
    assert!(eval.status.success());
    let record: serde_json::Value = serde_json::from_str(stdout(&eval).trim()).unwrap();
    assert!(record["edge_dice"].is_null());
}

#[test]
fn gradcheck_reports_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = egcnn(&["gradcheck", "--module", "losses"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 4);
    assert!(!text.contains("FAIL"));
    assert_eq!(egcnn(&["gradcheck", "--module", "nope"], dir.path()).status.code(), Some(2));
}

#[test]
fn errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(egcnn(&["train", "--config", "missing.toml", "--out", "run"], d).status.code(), Some(2));
    fs::write(d.join("bad.egv"), b"EGV2").unwrap();
    fs::write(d.join("fake.egck"), b"nope").unwrap();
    let out = egcnn(&["predict", "--checkpoint", "fake.egck", "--input", "bad.egv", "--out", "p"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
