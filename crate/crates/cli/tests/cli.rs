//! Runs the built binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use krawdetect::image::{load_idx_images, write_pgm};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_krawdetect"));
    c.env_remove("KRAWDETECT_KEYFILE");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn selftest_lists_four_passing_suites() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    for suite in ["orthonormality", "oracle", "reconstruction", "linearity"] {
        assert!(out.contains(suite), "{out}");
    }
    assert!(out.contains("4/4 suites passed"), "{out}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(&["train", "--clean", "a", "--adversarial", "b", "--out", p(&d.join("m.json"))]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));
    assert!(!o.stderr.is_empty());

    let cfg = d.join("bad.json");
    std::fs::write(&cfg, r#"{"grid": {"values": [0.5], "colour": 1}}"#).unwrap();
    let key = d.join("k.key");
    assert_eq!(code(&run(&["keygen", "--out", p(&key)])), 0);
    let o = run(&["evaluate", "--config", p(&cfg), "--key", p(&key)]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));

    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["keygen", "--out", p(&key)])), 2, "refuses to overwrite");
}

#[test]
fn missing_inputs_exit_3() {
    let o = run(&["detect", "--model", "/nonexistent/model.json", "--image", "x.pgm"]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
}

#[test]
fn synth_attack_train_detect_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let adv = d.join("adv");
    let key = d.join("det.key");
    let model = d.join("model.json");

    let o = run(&["synth", "--count", "200", "--seed", "5", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let images = data.join("images.idx3-ubyte");
    let labels = data.join("labels.idx1-ubyte");

    let o = run(&[
        "attack-gen", "--images", p(&images), "--labels", p(&labels),
        "--attack", "fgsm", "--epsilon", "0.2", "--out", p(&adv),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(adv.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["attack_kind"], "fgsm");
    assert_eq!(manifest["count"], 200);

    assert_eq!(code(&run(&["keygen", "--out", p(&key)])), 0);
    let o = bin()
        .args(["train", "--clean", p(&images), "--adversarial", p(&adv.join("images.idx3-ubyte"))])
        .args(["--out", p(&model)])
        .env("KRAWDETECT_KEYFILE", &key)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(d.join("model.config.json").exists());

    let clean = load_idx_images(&images).unwrap();
    let pgm = d.join("clean.pgm");
    write_pgm(&clean[0], &pgm).unwrap();
    let o = run(&["detect", "--model", p(&model), "--image", p(&pgm)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let line = text(&o.stdout);
    assert!(line.starts_with("{\"index\":0,\"label\":0,\"margin\":"), "{line}");

    let o = run(&["detect", "--model", p(&model), "--images", p(&adv.join("images.idx3-ubyte"))]);
    assert_eq!(code(&o), 0);
    let lines: Vec<serde_json::Value> = text(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 200);
    let flagged = lines.iter().filter(|v| v["label"] == 1).count();
    assert!(flagged >= 180, "{flagged}/200 attacked images flagged");
}

#[test]
fn evaluate_writes_reports_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let key = d.join("k.key");
    assert_eq!(code(&run(&["keygen", "--out", p(&key)])), 0);
    let cfg = d.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"data": {"synthetic": {"count": 120, "seed": 1}},
            "svm": {"epochs": 5},
            "experiment": {"surrogate": {"epochs": 20}}}"#,
    )
    .unwrap();
    let out = d.join("out");
    let o = run(&[
        "--workers", "2", "evaluate", "--config", p(&cfg), "--key", p(&key),
        "--out", p(&out), "--seed", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("protocol,train_attack,test_attack,recall,precision,f1,accuracy,n_test,seed,model_fingerprint"));
    assert_eq!(csv.lines().count(), 2);
    assert!(out.join("report.json").exists());
    assert!(out.join("models").join("fgsm.json").exists());
    let echo = std::fs::read_to_string(out.join("effective_config.json")).unwrap();
    let echo: serde_json::Value = serde_json::from_str(&echo).unwrap();
    assert_eq!(echo["seeds"]["experiment"], 4);
    assert_eq!(echo["svm"]["epochs"], 5);
}
