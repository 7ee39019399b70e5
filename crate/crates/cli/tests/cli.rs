use std::path::Path;
use std::process::{Command, Output};

fn rirci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rirci"))
        .args(args)
        .env_remove("RIRCI_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rirci(args);
    assert!(
        out.status.success(),
        "rirci {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sources = root.join("sources");
    let data = root.join("data");
    let run = root.join("run");

    ok(&["make-sources", "--out", s(&sources), "--backgrounds", "4", "--watermarks", "2", "--size", "40"]);
    let bgs = sources.join("backgrounds");
    let wms = sources.join("watermarks");
    let out = ok(&[
        "synthesize", "--backgrounds", s(&bgs), "--watermarks", s(&wms), "--out", s(&data), "--count", "10",
        "--size", "32", "--preset", "pw", "--val-fraction", "0.2",
    ]);
    assert!(out.contains("train=8"), "{out}");
    assert!(out.contains("val=2"), "{out}");
    let manifest = data.join("manifest.json");

    let report = ok(&["evaluate", "--manifest", s(&manifest), "--split", "val", "--oracle", "--buckets"]);
    assert!(report.contains("\"psnr\": 100.0"), "{report}");
    assert!(report.contains("[0.7,1.0)"), "{report}");

    let config = root.join("train.toml");
    std::fs::write(
        &config,
        "model_preset = \"tiny\"\nperceptual_widths = [4, 8, 8]\nepochs = 1\nbatch_size = 4\n",
    )
    .unwrap();
    ok(&[
        "train", "--config", s(&config), "--manifest", s(&manifest), "--output-dir", s(&run), "--max-steps", "2",
        "--set", "val_samples=2",
    ]);
    let record = std::fs::read_to_string(run.join("run_record.json")).unwrap();
    let record: serde_json::Value = serde_json::from_str(&record).unwrap();
    assert_eq!(record["steps"].as_array().unwrap().len(), 2);
    assert_eq!(record["config"]["max_steps"], 2);

    let ckpt = run.join("last.safetensors");
    let eval_dir = root.join("eval");
    ok(&[
        "evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--split", "val", "--config", s(&config),
        "--out", s(&eval_dir),
    ]);
    assert!(eval_dir.join("report.json").exists());
    assert!(eval_dir.join("samples.csv").exists());

    // A config describing another architecture is refused.
    let other = root.join("other.toml");
    std::fs::write(&other, "model_preset = \"tiny\"\nablation = 3\n").unwrap();
    let refused = rirci(&[
        "evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--split", "val", "--config", s(&other),
    ]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("fingerprint"));

    let input = data.join("image").join("000000.png");
    let output = root.join("clean.png");
    let out = ok(&[
        "remove", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&output), "--dump-intermediates",
    ]);
    assert!(output.exists());
    assert!(root.join("clean_intermediates.png").exists());
    assert!(out.contains("mask, watermark_component"), "{out}");
}

#[test]
fn config_flags_and_environment_seed() {
    let out = ok(&["train", "--print-config", "--epochs", "3", "--set", "gamma=2.5", "--two-phase", "--set", "stage1_epochs=1"]);
    assert!(out.contains("epochs = 3"), "{out}");
    assert!(out.contains("gamma = 2.5"), "{out}");
    assert!(out.contains("two_phase = true"), "{out}");

    let seeded = Command::new(env!("CARGO_BIN_EXE_rirci"))
        .args(["train", "--print-config", "--seed", "5"])
        .env("RIRCI_SEED", "42")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&seeded.stdout).contains("seed = 42"));

    let bad = rirci(&["train", "--print-config", "--set", "no_such_key=1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_key"));
}

#[test]
fn quick_selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("selftest.json");
    let out = ok(&["selftest", "--quick", "--json", s(&json)]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{out}");
    assert!(json.exists());
}
