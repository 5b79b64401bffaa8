use std::path::Path;
use std::process::{Command, Output};

fn dilunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dilunet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const MODEL: &str = r#"{"input_size": 32, "in_channels": 1, "embed_dim": 4,
    "stage_depths": [1,1,1,1], "decoder_depths": [1,1,1], "kernel_size": 3,
    "head_dim": 4, "num_skips": 3, "num_classes": 2, "mlp_ratio": 4}"#;

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    for args in [&["nope"][..], &["synth", "--n", "1", "--wat"], &[]] {
        let o = dilunet(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = dilunet(&["synth", "--n", "4", "--size", "32", "--classes", "2", "--seed", "3", "--out", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("img_0003.pgm").exists() && data.join("manifest.json").exists());

    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"model": {MODEL}, "train": {{"epochs": 1, "max_iterations": 3, "batch_size": 2, "seed": 1, "eval_interval": 2}}}}"#),
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let o = dilunet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("model.ckpt.log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2, "one epoch of 4 images at batch 2");
    assert_eq!(lines[0]["iter"], 1);
    assert!(lines[0]["loss"].as_f64().unwrap().is_finite());
    assert!(lines[0].get("eval_dsc").is_none() && lines[1]["eval_dsc"].is_number());

    let o = dilunet(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["images"], 4);
    for key in ["dsc", "se", "sp", "acc", "hd", "hd95"] {
        let v = &report["mean"][key];
        assert!(v.as_f64().is_some_and(f64::is_finite) || v == "undefined", "{key}: {v}");
    }

    let mask = dir.path().join("pred.pgm");
    let o = dilunet(&["predict", "--ckpt", s(&ckpt), "--image", s(&data.join("img_0000.pgm")), "--out", s(&mask)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = dilunet::io::pgm::read_gray(&mask).unwrap();
    assert_eq!((pred.width, pred.height), (32, 32));
    assert!(pred.pixels.iter().all(|&l| l < 2));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(dilunet(&["synth", "--n", "2", "--size", "32", "--seed", "9", "--out", s(d)]).status.success());
    }
    for name in ["img_0000.pgm", "msk_0001.pgm", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = dilunet(&["eval", "--ckpt", s(&junk), "--data", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));

    let o = dilunet(&["synth", "--n", "1", "--size", "30", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("p2.pgm");
    std::fs::write(&bad, b"P2\n1 1\n255\n0\n").unwrap();
    let o = dilunet(&["predict", "--ckpt", s(&junk), "--image", s(&bad), "--out", s(&dir.path().join("o.pgm"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_f64_passes_for_seed_7() {
    let o = dilunet(&["gradcheck", "--seed", "7", "--f64"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-6);
    assert_eq!(v["passed"], true);
}

#[test]
fn bench_prints_json() {
    let o = dilunet(&["bench", "--sizes", "6", "--k", "3", "--delta", "1,2", "--repeats", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 2);
    assert!(v["entries"][1]["oracle_ms"].is_number());
}

#[test]
fn predict_after_overfit_matches_training_mask() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(dilunet(&["synth", "--n", "16", "--size", "64", "--seed", "42", "--out", s(&data)]).status.success());
    let cfg = dir.path().join("run.json");
    let model = MODEL.replace("\"input_size\": 32", "\"input_size\": 64").replace("\"embed_dim\": 4", "\"embed_dim\": 16");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"model": {model}, "train": {{"epochs": 1000, "max_iterations": 500, "batch_size": 4, "seed": 0,
                "adam": {{"lr": 1e-3, "weight_decay": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}}}}}}"#
        ),
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let o = dilunet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = dir.path().join("pred.pgm");
    let o = dilunet(&["predict", "--ckpt", s(&ckpt), "--image", s(&data.join("img_0003.pgm")), "--out", s(&pred)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = dilunet::io::pgm::read_gray(&pred).unwrap().pixels;
    let gt = dilunet::io::pgm::read_gray(&data.join("msk_0003.pgm")).unwrap().pixels;
    let dsc = dilunet::metrics::basic_metrics(&dilunet::metrics::confusion(&p, &gt, 1).unwrap()).dsc.value();
    assert!(dsc >= 0.95, "DSC {dsc}");
}
