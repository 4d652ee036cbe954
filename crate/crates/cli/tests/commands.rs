use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use coda::checkpoint::load_checkpoint;
use serde_json::Value;

const TRAIN: &str = "\
a good film\t1
a bad film\t0
great acting\t1
awful acting\t0
the plot was fine\t1
the plot was poor\t0
nice score and good cast\t1
weak score and bad cast\t0
";

const PARAPHRASES: &str = "\
a good film\tone fine movie
a bad film\tone poor movie
great acting\tsuperb acting
awful acting\tterrible acting
";

fn setup(dir: &Path, extra: &str) -> String {
    fs::write(dir.join("train.tsv"), TRAIN).unwrap();
    fs::write(dir.join("dev.tsv"), TRAIN).unwrap();
    fs::write(dir.join("para.tsv"), PARAPHRASES).unwrap();
    let conf = dir.join("run.conf");
    fs::write(
        &conf,
        format!(
            "train_path = train.tsv\ndev_path = dev.tsv\nparaphrase_path = para.tsv\n\
             d_emb = 6\nd_hid = 8\nd_proj = 4\nbatch_size = 4\nepochs = 2\nbank_capacity = 8\n{extra}"
        ),
    )
    .unwrap();
    conf.display().to_string()
}

fn coda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_manifest_metrics_report_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = setup(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = coda(&["train", "--config", &conf, "--out", out.to_str().unwrap(), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["seed"], 5);
    assert_eq!(manifest["command"], "train");

    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let records: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 2 batches per epoch plus one dev record per epoch
    assert_eq!(records.iter().filter(|r| r["split"] == "train").count(), 4);
    assert_eq!(records.iter().filter(|r| r["split"] == "dev").count(), 2);

    let report = json(&out.join("report.json"));
    assert_eq!(report["steps"], 4);
    assert!(report["best_dev_accuracy"].is_f64());
    assert!(report["final_loss"]["total"].is_f64());
    // one lookup per example per epoch; half the examples have paraphrases
    assert_eq!(report["paraphrase_hits"], 8);
    assert_eq!(report["paraphrase_misses"], 8);
    for name in ["step000002.ckpt", "step000004.ckpt", "final.ckpt"] {
        assert!(out.join("checkpoints").join(name).exists(), "{name}");
    }
    let ckpt = out.join("checkpoints/final.ckpt");
    assert!(load_checkpoint(&ckpt).unwrap().bank.is_none());
    let with_bank = tmp.path().join("with-bank");
    let o = coda(&["train", "--config", &conf, "--out", with_bank.to_str().unwrap(), "--set", "checkpoint_bank=true"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(load_checkpoint(&with_bank.join("checkpoints/final.ckpt")).unwrap().bank.is_some());

    let eval_out = tmp.path().join("eval");
    let o = coda(&[
        "eval",
        "--config",
        &conf,
        "--out",
        eval_out.to_str().unwrap(),
        "--set",
        &format!("checkpoint={}", ckpt.display()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&eval_out.join("report.json"));
    assert_eq!(report["step"], 4);
    assert_eq!(report["splits"].as_array().unwrap().len(), 2);
}

#[test]
fn manifest_rerun_reproduces_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = setup(tmp.path(), "command = train\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(coda(&["--config", &conf, "--out", a.to_str().unwrap()]).status.success());
    let o = coda(&["--manifest", a.join("manifest.json").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());

    let c = tmp.path().join("c");
    assert!(coda(&["--config", &conf, "--out", c.to_str().unwrap(), "--seed", "1"]).status.success());
    assert_ne!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(c.join("metrics.jsonl")).unwrap());
}

#[test]
fn mmd_writes_tsv_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = setup(tmp.path(), "mmd_strategies = ori;back;cutoff\nmmd_sample_size = 0\n");
    let out = tmp.path().join("mmd");
    let o = coda(&["mmd", "--config", &conf, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = fs::read_to_string(out.join("diversity.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.starts_with("strategy\tmmd\tsample_count"));
    let rows = json(&out.join("diversity.json"))["rows"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["sample_count"] == 8));
    let ori = rows.iter().find(|r| r["strategy"] == "ori").unwrap();
    assert!(ori["mmd"].as_f64().unwrap().abs() < 1e-9);
    let mmds: Vec<f64> = rows.iter().map(|r| r["mmd"].as_f64().unwrap()).collect();
    assert!(mmds.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn augment_writes_one_record_per_example() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = setup(tmp.path(), "strategy = stack(back,cutoff)\n");
    let out = tmp.path().join("aug");
    let o = coda(&["augment", "--config", &conf, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = fs::read_to_string(out.join("augmented.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|r| r["embedding_digest"].as_str().map_or(0, str::len) == 64));
    assert_eq!(lines[0]["original_text"], "a good film");
    assert_eq!(lines[0]["provenance"], serde_json::json!(["back", "cutoff"]));

    let out = tmp.path().join("aug-back");
    let o = coda(&["augment", "--config", &conf, "--out", out.to_str().unwrap(), "--set", "strategy=back"]);
    assert!(o.status.success());
    let first: Value = serde_json::from_str(fs::read_to_string(out.join("augmented.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["augmented_text"], "one fine movie");
}

#[test]
fn sweep_writes_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = setup(tmp.path(), "sweep_fractions = 0.5,1\nsweep_seeds = 1,2\n");
    let out = tmp.path().join("sweep");
    let o = coda(&["sweep", "--config", &conf, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("sweep.tsv")).unwrap().lines().count(), 1 + 2 * 2 * 3);
    assert_eq!(fs::read_to_string(out.join("sweep.jsonl")).unwrap().lines().count(), 12);
    let summary = json(&out.join("report.json"));
    assert_eq!(summary.as_array().unwrap().len(), 6);
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = setup(tmp.path(), "");
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();

    let o = coda(&["--config", &conf, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no command"));

    let o = coda(&["train", "--config", &conf, "--out", out, "--set", "lambda_weight=0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[0, 0.03]"));
    let o = coda(&["train", "--config", &conf, "--out", out, "--set", "lambda_weight=0.5", "--force-weights"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = coda(&["train", "--config", &conf, "--out", out, "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = coda(&["train", "--config", &conf, "--out", out, "--set", "train_path=missing.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    // the manifest is written before anything can fail
    assert!(Path::new(out).join("manifest.json").exists());

    // a diverging run aborts with a nonzero status and keeps the metrics written so far
    let bad = tmp.path().join("diverge");
    let o = coda(&[
        "train",
        "--config",
        &conf,
        "--out",
        bad.to_str().unwrap(),
        "--set",
        "lr=1e300",
        "--set",
        "weight_decay=0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&bad.join("report.json"));
    assert!(report["error"].as_str().unwrap().contains("non-finite"));
}
