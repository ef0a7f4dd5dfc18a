use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctrobust::harness::ExperimentConfig;
use ctrobust::phantom::LesionConfig;
use ctrobust::recon::TvConfig;
use ctrobust::Geometry;

fn ctrobust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrobust")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctrobust(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_tiny_config(path: &Path) {
    let mut cfg = ExperimentConfig { geometry: Geometry::square(16, 12, 25), ..ExperimentConfig::default() };
    cfg.dataset.count = 3;
    cfg.unrolled.dataset.count = 2;
    cfg.unrolled.train.iterations = 2;
    cfg.unrolled.train.epochs = 2;
    cfg.classifier.dataset.count = 8;
    cfg.classifier.dataset.lesions = Some(LesionConfig { radius: 1.5, patch_side: 6, ..LesionConfig::default() });
    cfg.classifier.train_count = 6;
    cfg.classifier.train.epochs = 3;
    cfg.methods[1].tv = TvConfig { steps: 5, ..TvConfig::default() };
    for a in [&mut cfg.attacks.untargeted, &mut cfg.attacks.localized, &mut cfg.attacks.universal] {
        a.steps = 2;
        a.restarts = 2;
    }
    cfg.attacks.universal_fit = 2;
    cfg.save(path).unwrap();
}

#[test]
fn config_applies_overrides() {
    let text = ok(&["config", "--seed", "42", "--out", "elsewhere"]);
    let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.dataset.seed, 42);
    assert_eq!(cfg.attacks.localized.seed, 42);
    assert_eq!(cfg.output_dir, Path::new("elsewhere"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctrobust(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("untargeted.csv"));

    let out = ctrobust(&["attack", "--mode", "sideways"]);
    assert!(!out.status.success());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"attacks": {"epsilons": []}}"#).unwrap();
    let out = ctrobust(&["generate", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon list is empty"));
}

/// Runs every subcommand and returns the CSV files written.
fn pipeline(config: &Path, out: &Path) -> Vec<(String, Vec<u8>)> {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    let common = ["--config", c, "--out", o, "--seed", "11", "--jobs", "2"];
    let run = |cmd: &[&str]| ok(&[cmd, &common[..]].concat());
    assert!(run(&["generate"]).contains("3 evaluation"));
    assert!(run(&["train-unrolled"]).contains("loss"));
    assert!(run(&["train-classifier"]).contains("accuracy"));
    for mode in ["untargeted", "localized", "universal"] {
        assert!(run(&["attack", "--mode", mode]).contains("fbp"));
    }
    assert!(run(&["transfer"]).contains("(self)"));
    assert!(run(&["report"]).contains("transfer.csv"));
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    write_tiny_config(&config);
    let a = pipeline(&config, &dir.path().join("a"));
    let b = pipeline(&config, &dir.path().join("b"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.len(), 9, "{names:?}");
    assert_eq!(a, b);
    assert!(dir.path().join("a/images/untargeted/tv.pgm").is_file());
}
