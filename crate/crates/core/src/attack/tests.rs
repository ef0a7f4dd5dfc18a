use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::phantom::{generate_dataset, DatasetConfig};
use crate::radon::RadonOperator;
use crate::recon::{Fbp, FbpConfig, UnrolledGd, UnrolledGdParams};

fn small() -> (Arc<RadonOperator>, Vec<(Tensor, Tensor)>) {
    let op = Arc::new(RadonOperator::build(Geometry::square(16, 12, 25)).unwrap());
    let ds = generate_dataset(&op, &DatasetConfig { count: 3, seed: 2, ..DatasetConfig::default() }).unwrap();
    let pairs = ds.samples.into_iter().map(|s| (s.noisy, s.image)).collect();
    (op, pairs)
}

fn inst(p: &(Tensor, Tensor)) -> Instance<'_> {
    Instance { sinogram: &p.0, ground_truth: &p.1 }
}

#[test]
fn zero_radius_leaves_everything_unchanged() {
    let (op, data) = small();
    let fbp = Fbp::new(op, FbpConfig::default()).unwrap();
    let cfg = AttackConfig { epsilon_fraction: 0.0, steps: 3, restarts: 2, ..AttackConfig::default() };
    let res = attack_untargeted(&fbp, &inst(&data[0]), &cfg).unwrap();
    assert_eq!(res.delta, Tensor::zeros(data[0].0.shape()));
    assert_eq!(res.recon_adv, res.recon_clean);
    assert_eq!(res.objective(), 0.0);
    assert_eq!(res.metrics_row.dc_adv, res.metrics_row.dc_clean);
}

#[test]
fn untargeted_respects_ball_selects_best_and_is_deterministic() {
    let (op, data) = small();
    let params = UnrolledGdParams::constant(3, 0.5, 1e-3, 1e-2, false);
    let method = UnrolledGd::new(op, FbpConfig::default(), params).unwrap();
    let cfg = AttackConfig { epsilon_fraction: 0.05, steps: 6, restarts: 3, seed: 9, ..AttackConfig::default() };
    let res = attack_untargeted(&method, &inst(&data[1]), &cfg).unwrap();
    let eps = 0.05 * data[1].0.range();
    assert_eq!(res.epsilon, eps);
    assert!(res.delta.linf() <= eps);
    assert_eq!(res.records.len(), 3);
    for r in &res.records {
        assert!(res.objective() >= r.0);
    }
    assert_eq!(res.objective_trace.len(), 7);
    assert!(res.objective() > res.objective_trace[0]);
    let again = attack_untargeted(&method, &inst(&data[1]), &cfg).unwrap();
    assert_eq!(again.delta, res.delta);
    assert_eq!(again.metrics_row, res.metrics_row);
}

#[test]
fn objective_grows_with_radius() {
    let (op, data) = small();
    let fbp = Fbp::new(op, FbpConfig::default()).unwrap();
    let mut last = 0.0;
    for frac in [0.005, 0.01, 0.02, 0.04] {
        let cfg = AttackConfig { epsilon_fraction: frac, steps: 30, restarts: 2, step_size: 2e-3, seed: 4, ..AttackConfig::default() };
        let obj = attack_untargeted(&fbp, &inst(&data[0]), &cfg).unwrap().objective();
        assert!(obj >= last - 1e-9, "{frac}: {obj} < {last}");
        last = obj;
    }
}

/// Best `|B s|` over sign vectors `s` by greedy single-coordinate flips from
/// several random starts; `B` is the explicit FBP matrix.
fn sign_ascent_oracle(b: &[Vec<f64>], starts: usize) -> f64 {
    let (n, m) = (b.len(), b[0].len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut best: f64 = 0.0;
    for _ in 0..starts {
        let mut s: Vec<f64> = (0..m).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut y: Vec<f64> = (0..n).map(|i| (0..m).map(|j| b[i][j] * s[j]).sum()).collect();
        loop {
            let mut improved = false;
            for j in 0..m {
                // |y - 2 s_j b_j|^2 - |y|^2
                let gain: f64 = (0..n).map(|i| -4.0 * s[j] * b[i][j] * y[i] + 4.0 * b[i][j] * b[i][j]).sum();
                if gain > 1e-12 {
                    for i in 0..n {
                        y[i] -= 2.0 * s[j] * b[i][j];
                    }
                    s[j] = -s[j];
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        best = best.max(y.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    best
}

#[test]
fn fbp_attack_reaches_linear_oracle() {
    let op = Arc::new(RadonOperator::build(Geometry::square(8, 6, 13)).unwrap());
    let fbp = Fbp::new(op.clone(), FbpConfig::default()).unwrap();
    let m = op.geometry().num_rays();
    let columns: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            fbp.reconstruct(&Tensor::new(vec![6, 13], e).unwrap()).unwrap().into_data()
        })
        .collect();
    let b: Vec<Vec<f64>> = (0..64).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    let oracle = sign_ascent_oracle(&b, 50);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = Tensor::new(vec![6, 13], (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let gt = Tensor::zeros(&[8, 8]);
    let frac = 0.02;
    let eps = frac * f.range();
    let cfg = AttackConfig { epsilon_fraction: frac, steps: 200, restarts: 5, step_size: eps / 5.0, ..AttackConfig::default() };
    let res = attack_untargeted(&fbp, &Instance { sinogram: &f, ground_truth: &gt }, &cfg).unwrap();
    let achieved = res.objective() / eps;
    assert!(achieved >= 0.95 * oracle && achieved <= oracle * (1.0 + 1e-9), "{achieved} vs {oracle}");
}

#[test]
fn localized_respects_mask_and_zero_radius() {
    let (op, data) = small();
    let fbp = Fbp::new(op.clone(), FbpConfig::default()).unwrap();
    let clf = ClassifierParams::init(8, 3);
    let region = Region::new(4, 4, 8, 8);
    let target = LocalTarget { classifier: &clf, region, mask: None };
    let cfg = AttackConfig { epsilon_fraction: 0.05, steps: 5, restarts: 2, mode: AttackMode::Localized, ..AttackConfig::default() };
    let res = attack_localized(&fbp, &inst(&data[0]), &target, &cfg).unwrap();
    let mask = op.sinogram_mask(&region, cfg.mask_sigma).unwrap();
    assert!(mask.data().iter().any(|&w| w == 0.0));
    for (d, w) in res.delta.data().iter().zip(mask.data()) {
        if *w == 0.0 {
            assert_eq!(*d, 0.0);
        }
    }
    assert!(res.delta.linf() <= res.epsilon);
    assert!(res.metrics_row.psnr_int.is_some() && res.metrics_row.success.is_some());

    let zero = AttackConfig { epsilon_fraction: 0.0, ..cfg.clone() };
    let res = attack_localized(&fbp, &inst(&data[0]), &target, &zero).unwrap();
    assert_eq!(res.success, Some(false));
    assert_eq!(res.recon_adv, res.recon_clean);

    let wrong = LocalTarget { region: Region::new(4, 4, 6, 6), ..target };
    assert!(attack_localized(&fbp, &inst(&data[0]), &wrong, &cfg).is_err());
}

#[test]
fn localized_flips_a_sensitive_classifier() {
    let (op, data) = small();
    let fbp = Fbp::new(op, FbpConfig::default()).unwrap();
    let region = Region::new(4, 4, 8, 8);
    let mut clf = ClassifierParams::init(8, 5);
    clf.linear = clf.linear.scale(50.0);
    // put the clean reconstruction just on the malignant side of the boundary
    let clean = fbp.reconstruct(&data[2].0).unwrap();
    let p = crate::classifier::classify(&clf, &crate::classifier::crop_region(&clean, &region).unwrap()).unwrap();
    clf.linear_bias += 0.15 - (p / (1.0 - p)).ln();
    let target = LocalTarget { classifier: &clf, region, mask: None };
    let cfg = AttackConfig { epsilon_fraction: 0.1, steps: 50, restarts: 2, step_size: 2e-3, mode: AttackMode::Localized, ..AttackConfig::default() };
    let res = attack_localized(&fbp, &inst(&data[2]), &target, &cfg).unwrap();
    assert_eq!(res.success, Some(true));
    assert!(res.objective_trace.len() < 51);
    let (inner, outer) = (res.metrics_row.psnr_int.unwrap(), res.metrics_row.psnr_ext.unwrap());
    assert!(inner.is_finite() && outer > inner);
}

#[test]
fn universal_with_one_sample_matches_untargeted() {
    let (op, data) = small();
    let fbp = Fbp::new(op, FbpConfig::default()).unwrap();
    let cfg = AttackConfig { epsilon_fraction: 0.03, steps: 8, restarts: 1, seed: 3, ..AttackConfig::default() };
    let uni = attack_universal(&fbp, &[inst(&data[0])], &AttackConfig { mode: AttackMode::Universal, ..cfg.clone() }).unwrap();
    let single = attack_untargeted(&fbp, &inst(&data[0]), &cfg).unwrap();
    assert_eq!(uni.delta, single.delta);
    assert_eq!(uni.objective_trace, single.objective_trace);
    assert!(*uni.objective_trace.last().unwrap() >= 0.0);

    let all: Vec<_> = data.iter().map(inst).collect();
    let uni = attack_universal(&fbp, &all, &cfg).unwrap();
    let mean_range = data.iter().map(|d| d.0.range()).sum::<f64>() / 3.0;
    assert!((uni.epsilon - 0.03 * mean_range).abs() < 1e-15);
    assert!(uni.delta.linf() <= uni.epsilon);
    let rows = uni.evaluate(&fbp, &all, 0.03).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(attack_universal(&fbp, &[], &cfg).is_err());
}

#[test]
fn transfer_identity_and_zero_source() {
    let (op, data) = small();
    let fbp = Fbp::new(op.clone(), FbpConfig::default()).unwrap();
    let unrolled = UnrolledGd::new(op, FbpConfig::default(), UnrolledGdParams::constant(3, 0.5, 1e-3, 1e-2, false)).unwrap();
    let cfg = AttackConfig { steps: 4, restarts: 2, ..AttackConfig::default() };
    let res = attack_untargeted(&fbp, &inst(&data[0]), &cfg).unwrap();
    assert_eq!(apply_transfer(&res, &fbp, &inst(&data[0])).unwrap(), res.metrics_row);

    let zero = attack_untargeted(&fbp, &inst(&data[0]), &AttackConfig { epsilon_fraction: 0.0, ..cfg }).unwrap();
    let row = apply_transfer(&zero, &unrolled, &inst(&data[0])).unwrap();
    let clean = unrolled.reconstruct(&data[0].0).unwrap();
    assert_eq!(row.psnr, crate::metrics::psnr(&clean, &data[0].1, 1.0).unwrap());
    assert_eq!(row.method, "unrolled_gd");

    let other = Arc::new(RadonOperator::build(Geometry::square(16, 10, 25)).unwrap());
    let fbp2 = Fbp::new(other, FbpConfig::default()).unwrap();
    assert!(apply_transfer(&res, &fbp2, &inst(&data[0])).is_err());
}

#[test]
fn nonnegative_clip_keeps_measurement_physical() {
    let (op, data) = small();
    let fbp = Fbp::new(op, FbpConfig::default()).unwrap();
    let mut f = data[0].0.clone();
    // a few near-zero rays so the floor binds
    for v in f.data_mut().iter_mut().step_by(7) {
        *v = 1e-4;
    }
    let cfg = AttackConfig { epsilon_fraction: 0.05, steps: 5, restarts: 2, clip_nonnegative: true, ..AttackConfig::default() };
    let res = attack_untargeted(&fbp, &Instance { sinogram: &f, ground_truth: &data[0].1 }, &cfg).unwrap();
    let sum = f.add(&res.delta).unwrap();
    assert!(sum.data().iter().zip(f.data()).all(|(s, v)| *s >= 0.0 || *v < 0.0));
    assert!(res.delta.linf() <= res.epsilon);
    let off = attack_untargeted(&fbp, &Instance { sinogram: &f, ground_truth: &data[0].1 }, &AttackConfig { clip_nonnegative: false, ..cfg }).unwrap();
    assert!(f.add(&off.delta).unwrap().data().iter().any(|v| *v < 0.0));
}
