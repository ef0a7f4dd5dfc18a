use std::fs;

use super::*;
use crate::metrics::{read_rows, CSV_COLUMNS};
use crate::phantom::LesionConfig;
use crate::radon::Geometry;
use crate::recon::TvConfig;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        geometry: Geometry::square(16, 12, 25),
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
    .with_seed(5);
    cfg.dataset.count = 4;
    cfg.unrolled.dataset.count = 3;
    cfg.unrolled.train.iterations = 2;
    cfg.unrolled.train.epochs = 2;
    cfg.classifier.dataset.count = 12;
    cfg.classifier.dataset.lesions = Some(LesionConfig { radius: 1.5, patch_side: 6, ..LesionConfig::default() });
    cfg.classifier.train_count = 10;
    cfg.classifier.train.epochs = 5;
    cfg.methods[1].tv = TvConfig { steps: 10, ..TvConfig::default() };
    cfg.attacks.untargeted.steps = 3;
    cfg.attacks.untargeted.restarts = 2;
    cfg.attacks.localized.steps = 3;
    cfg.attacks.localized.restarts = 2;
    cfg.attacks.universal.steps = 3;
    cfg.attacks.universal.restarts = 1;
    cfg.attacks.universal_fit = 2;
    cfg.attacks.dump_images = 2;
    cfg
}

fn only(cfg: &ExperimentConfig, ids: &[&str]) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.methods.retain(|m| ids.contains(&m.id.as_str()));
    c
}

#[test]
fn config_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let path = dir.path().join("cfg.json");
    cfg.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);

    let minimal: ExperimentConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
    assert_eq!(minimal.methods.len(), 3);
    assert_eq!(minimal.attacks.epsilons, vec![0.01, 0.025, 0.05]);

    let mut dup = cfg.clone();
    dup.methods.push(MethodSpec::new("fbp", MethodKind::Tv));
    assert!(dup.validate().is_err());
    let mut empty = cfg.clone();
    empty.attacks.epsilons.clear();
    assert!(empty.validate().is_err());

    let seeded = ExperimentConfig::default().with_seed(9);
    let seeds = [seeded.dataset.seed, seeded.unrolled.dataset.seed, seeded.classifier.dataset.seed];
    assert_eq!(seeds, [9, 9 + (1 << 32), 9 + (2 << 32)]);
}

#[test]
fn generate_is_idempotent_and_rejects_empty() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny(a.path());
    cfg.dataset.count = 3;
    cfg.dataset.seed = 7;
    let summary = cmd_generate(&cfg).unwrap();
    assert_eq!(summary, GenerateSummary { evaluation: 3, training: 3, lesions: 12 });
    cmd_generate(&ExperimentConfig { output_dir: b.path().to_path_buf(), ..cfg.clone() }).unwrap();
    for name in [DATASET_FILE, "dataset.json", TRAIN_FILE, LESIONS_FILE, "lesions.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("lesions.json")).unwrap()).unwrap();
    let region = &sidecar["samples"][0]["region"];
    assert!(region["center_row"].is_u64() && region["side"] == 6);

    cfg.dataset.count = 0;
    let err = cmd_generate(&cfg).unwrap_err();
    assert!(err.to_string().contains("empty dataset"), "{err}");
}

#[test]
fn missing_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(matches!(cmd_attack(&cfg, AttackMode::Untargeted), Err(Error::Missing(_))));
    cmd_generate(&cfg).unwrap();
    let err = cmd_attack(&cfg, AttackMode::Untargeted).unwrap_err();
    assert!(matches!(err, Error::Missing(_)) && err.to_string().contains("trained params"), "{err}");
    let err = cmd_attack(&only(&cfg, &["fbp"]), AttackMode::Localized).unwrap_err();
    assert!(err.to_string().contains("classifier"), "{err}");
    assert!(matches!(cmd_transfer(&only(&cfg, &["fbp"])), Err(Error::Missing(_))));
}

#[test]
fn full_pipeline_on_a_tiny_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_generate(&cfg).unwrap();
    let params = cmd_train_unrolled(&cfg).unwrap();
    assert_eq!(params.iterations(), 2);
    let clf = cmd_train_classifier(&cfg).unwrap();
    assert!(clf.heldout_accuracy.is_some());

    let summary = cmd_attack(&cfg, AttackMode::Untargeted).unwrap();
    assert_eq!(summary.len(), 9);
    let text = fs::read_to_string(dir.path().join("untargeted.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let rows = read_rows(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 3 * 3 * 4);
    let mut eps_blocks: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    eps_blocks.dedup();
    assert_eq!(eps_blocks.len(), 9);
    for d in read_deltas(dir.path(), AttackMode::Untargeted).unwrap() {
        assert!(d.delta.linf() <= d.radius + 1e-15);
    }
    assert!(dir.path().join("images/untargeted/fbp.pgm").is_file());
    assert!(dir.path().join("images/untargeted/unrolled_gd/eps0.025_s1.pgm").is_file());

    let local = cmd_attack(&cfg, AttackMode::Localized).unwrap();
    assert!(local.iter().all(|s| s.n == 2 && s.success_rate.is_some() && s.psnr_int.is_some()));
    let universal = cmd_attack(&cfg, AttackMode::Universal).unwrap();
    assert!(universal.iter().all(|s| s.n == 2));
    assert!(dir.path().join("universal_holdout.csv").is_file());

    let cells = cmd_transfer(&cfg).unwrap();
    assert_eq!(cells.len(), 4 * 3);
    for c in &cells {
        assert_eq!(c.is_self, c.source == c.target);
    }
    // the self cell reproduces the self-attack mean
    let fbp_self = cells.iter().find(|c| c.source == "fbp" && c.target == "fbp").unwrap();
    let fbp_attack = summary.iter().find(|s| s.method == "fbp" && s.eps == 0.025).unwrap();
    assert_eq!(fbp_self.psnr, fbp_attack.psnr);

    let report = cmd_report(dir.path()).unwrap();
    for needle in ["untargeted.csv", "localized.csv", "universal_holdout.csv", "transfer.csv", "eps = 0.05"] {
        assert!(report.contains(needle), "{needle}");
    }
    assert!(dir.path().join(REPORT_FILE).is_file());
}

#[test]
fn zero_radius_and_single_method_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = only(&tiny(dir.path()), &["fbp"]);
    cfg.attacks.epsilons = vec![0.0];
    cfg.attacks.transfer_epsilon = 0.0;
    cmd_generate(&cfg).unwrap();
    cmd_attack(&cfg, AttackMode::Untargeted).unwrap();
    for r in read_rows(fs::File::open(dir.path().join("untargeted.csv")).unwrap()).unwrap() {
        assert_eq!(r.dc_adv, r.dc_clean);
        assert_eq!(r.psnr_f_fdelta, f64::INFINITY);
        assert_eq!(r.l_b_record, None);
    }
    let cells = cmd_transfer(&cfg).unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells[1].is_self);
    assert_eq!(cells[0].psnr, cells[1].psnr);
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = only(&tiny(a.path()), &["fbp", "tv"]);
    let cfg_b = ExperimentConfig { output_dir: b.path().to_path_buf(), ..cfg_a.clone() };
    for (cfg, jobs) in [(&cfg_a, 1), (&cfg_b, 3)] {
        with_jobs(Some(jobs), || {
            cmd_generate(cfg).unwrap();
            cmd_attack(cfg, AttackMode::Untargeted).unwrap();
        })
        .unwrap();
    }
    for name in ["untargeted.csv", "untargeted_summary.csv", "untargeted_deltas.ctb"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    assert!(with_jobs(Some(0), || ()).is_err());
}

fn row(method: &str, eps: f64, psnr: f64) -> MetricsRow {
    MetricsRow {
        method: method.into(),
        eps,
        psnr,
        ssim: 0.5,
        d_breg: 0.1,
        dc_clean: 30.0,
        dc_adv: 29.0,
        psnr_f_fdelta: 40.0,
        psnr_int: None,
        psnr_ext: None,
        success: Some(psnr > 20.0),
        l_b_record: Some(2.0),
    }
}

#[test]
fn report_grouping_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_report(dir.path()).unwrap_err();
    assert!(err.to_string().contains("untargeted.csv"), "{err}");

    write_rows(fs::File::create(dir.path().join("untargeted.csv")).unwrap(), &[row("fbp", 0.01, 21.5)]).unwrap();
    let text = cmd_report(dir.path()).unwrap();
    assert!(text.contains("21.50 ± 0.00"), "{text}");

    let rows = [row("fbp", 0.01, 20.0), row("tv", 0.01, 25.0), row("fbp", 0.05, 18.0), row("fbp", 0.01, 22.0)];
    write_rows(fs::File::create(dir.path().join("localized.csv")).unwrap(), &rows).unwrap();
    let text = cmd_report(dir.path()).unwrap();
    let block = &text[text.find("localized.csv").unwrap()..];
    assert_eq!(block.matches("-- eps =").count(), 2);
    assert!(block.contains("21.00 ± 1.00") && block.contains("1/2"), "{block}");

    fs::write(dir.path().join("universal.csv"), "method,eps,psnr\nfbp,0.01,20\n").unwrap();
    assert!(matches!(cmd_report(dir.path()), Err(Error::Format(_))));
}

#[test]
fn summary_aggregation() {
    let rows = [row("fbp", 0.01, 20.0), row("fbp", 0.01, 24.0)];
    let s = SummaryRow::aggregate("fbp", 0.01, &rows, &[(3.0, 1.0), (1.0, 2.0)]).unwrap();
    assert_eq!((s.n, s.psnr, s.psnr_std, s.success_rate, s.l_b), (2, 22.0, 2.0, Some(0.5), Some(3.0)));
    assert_eq!(SummaryRow::aggregate("fbp", 0.01, &rows, &[]).unwrap().l_b, Some(2.0));
    assert!(SummaryRow::aggregate("fbp", 0.01, &[], &[]).is_err());
    let mut buf = Vec::new();
    write_summary(&mut buf, &[s.clone()]).unwrap();
    assert_eq!(read_summary(buf.as_slice()).unwrap(), vec![s]);
}

#[test]
fn pgm_round_trip_and_montage() {
    let img = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, -0.2, 1.7, 0.25]).unwrap();
    let bytes = pgm::encode_pgm(&img).unwrap();
    assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
    assert_eq!(&bytes[11..], &[0, 128, 255, 0, 255, 64]);
    let back = pgm::decode_pgm(&bytes).unwrap();
    assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0, 0.0, 1.0, 64.0 / 255.0]);
    assert!(pgm::decode_pgm(b"P6\n1 1\n255\n\0").is_err());
    assert!(pgm::decode_pgm(b"P5\n2 2\n255\n\0").is_err());

    let a = Tensor::zeros(&[2, 2]);
    let m = pgm::montage(&[vec![&a, &a], vec![&a]], 1).unwrap();
    assert_eq!(m.shape(), &[5, 5]);
    assert_eq!((m.at2(0, 0), m.at2(2, 0), m.at2(3, 3), m.at2(0, 2)), (0.0, 1.0, 1.0, 1.0));
}
