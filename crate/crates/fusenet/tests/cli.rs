use std::fs;
use std::path::Path;

use fusenet::cli::run;

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("fusenet").chain(list.iter().copied()).map(String::from).collect()
}

fn ok(list: &[&str]) {
    assert_eq!(run(args(list)), 0, "{list:?}");
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "pretrain_scans = 6\n[pretrain]\nepochs = 1\n[train]\nepochs = 1\nbatch_size = 4\n[classifier]\nbase_channels = 4\nmax_channels = 8\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn unknown_verb_is_a_usage_error() {
    assert_eq!(run(args(&["frobnicate"])), 2);
    assert_eq!(run(args(&["train", "--mode", "sideways", "--data", "x"])), 2);
    assert_eq!(run(args(&["--help"])), 0);
}

#[test]
fn roc_export_needs_an_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    assert_eq!(run(args(&["roc-export", "--run", &d, "--out", &d])), 1);
    assert!(!dir.path().join("roc.svg").exists());
}

#[test]
fn gen_synth_writes_manifest_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-synth", "--n", "10", "--seed", "7", "--out", data.to_str().unwrap()]);
    let text = fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert_eq!(fs::read_dir(data.join("volumes")).unwrap().count(), 10);
    assert_eq!(fs::read_dir(data.join("masks")).unwrap().count(), 10);
    assert!(data.join("config.json").exists());
    let prov: serde_json::Value = serde_json::from_slice(&fs::read(data.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["verb"], "gen-synth");
    assert_eq!(prov["outputs"].as_object().unwrap().len(), 22);
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root);
    let p = |s: &str| root.join(s).display().to_string();
    ok(&["gen-synth", "--n", "14", "--seed", "3", "--out", &p("raw")]);
    ok(&["preprocess", "--config", &cfg, "--data", &p("raw"), "--out", &p("data")]);
    ok(&["pretrain-seg", "--config", &cfg, "--data", &p("data"), "--out", &p("seg")]);
    let seg = p("seg/segnet.ckpt");
    ok(&["select-features", "--config", &cfg, "--data", &p("data"), "--segnet", &seg, "--out", &p("sel")]);
    let sel = p("sel/selection.json");
    for run_dir in ["r1", "r2"] {
        ok(&["train", "--config", &cfg, "--mode", "dyfa", "--data", &p("data"), "--segnet", &seg, "--selection", &sel, "--out", &p(run_dir)]);
    }
    for f in ["classifier.ckpt", "train_log.csv", "segnet.ckpt"] {
        assert_eq!(fs::read(root.join("r1").join(f)).unwrap(), fs::read(root.join("r2").join(f)).unwrap(), "{f}");
    }
    // training leaves the frozen segnet untouched
    assert_eq!(fs::read(root.join("r1/segnet.ckpt")).unwrap(), fs::read(&seg).unwrap());
    let log = fs::read_to_string(root.join("r1/train_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,lr,loss\n"));

    ok(&["infer", "--config", &cfg, "--data", &p("data"), "--run", &p("r1"), "--subset", "all", "--out", &p("inf")]);
    let preds: serde_json::Value = serde_json::from_slice(&fs::read(root.join("inf/predictions.json")).unwrap()).unwrap();
    assert_eq!(preds.as_array().unwrap().len(), 14);
    assert_eq!(preds[0]["patch_probabilities"].as_array().unwrap().len(), 6);

    ok(&["evaluate", "--data", &p("data"), "--predictions", &p("inf/predictions.json"), "--out", &p("eval")]);
    ok(&["roc-export", "--run", &p("eval"), "--out", &p("eval")]);
    let svg = fs::read(root.join("eval/roc.svg")).unwrap();
    assert_eq!(String::from_utf8_lossy(&svg).matches("(AUC").count(), 5);
    for class in ["pneumonia_atelectasis", "mass", "emphysema", "nodules", "pooled"] {
        assert!(root.join(format!("eval/roc_{class}.csv")).exists());
    }
    ok(&["roc-export", "--run", &p("eval"), "--out", &p("eval")]);
    assert_eq!(fs::read(root.join("eval/roc.svg")).unwrap(), svg);
}

#[test]
fn train_without_segnet_runs_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root);
    let p = |s: &str| root.join(s).display().to_string();
    ok(&["gen-synth", "--n", "10", "--seed", "5", "--out", &p("data")]);
    ok(&["train", "--config", &cfg, "--mode", "baseline", "--preset", "desk", "--data", &p("data"), "--out", &p("r")]);
    for f in ["classifier.ckpt", "train_log.csv", "segnet.ckpt", "selection.json", "config.json", "provenance.json"] {
        assert!(root.join("r").join(f).exists(), "{f}");
    }
}
