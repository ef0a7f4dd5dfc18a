use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn image(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
    let data = (0..h * w).map(|k| f(k / w, k % w)).collect();
    Tensor::new(vec![h, w], data).unwrap()
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    image(h, w, |_, _| rng.gen_range(0.0..1.0))
}

#[test]
fn psnr_values() {
    let x = Tensor::zeros(&[4, 4]);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    assert!((psnr(&x, &Tensor::filled(&[4, 4], 0.1), 1.0).unwrap() - 20.0).abs() < 1e-12);
    assert_eq!(psnr(&x, &Tensor::filled(&[4, 4], 1.0), 1.0).unwrap(), 0.0);
    assert!(psnr(&x, &Tensor::zeros(&[2, 8]), 1.0).is_err());
    assert!(psnr(&x, &x, 0.0).is_err());
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_image(8, 8, &mut rng);
    let dir = image(8, 8, |_, _| rng.gen_range(-1.0..1.0));
    let vals: Vec<f64> = (1..20)
        .map(|k| psnr(&x, &x.add(&dir.scale(k as f64 * 0.01)).unwrap(), 1.0).unwrap())
        .collect();
    assert!(vals.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn ssim_reference_values() {
    let x = image(16, 20, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
    let y = image(16, 20, |r, c| (x.at2(r, c) + 0.2 * ((r * c) as f64 * 0.37).sin()).clamp(0.0, 1.0));
    // reference: Gaussian-weighted SSIM, population covariance, data range 1
    assert!((ssim(&x, &y, 1.0).unwrap() - 0.8921714155624642).abs() < 1e-10);
    assert!((ssim(&y, &x, 1.0).unwrap() - ssim(&x, &y, 1.0).unwrap()).abs() < 1e-15);
    assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);

    let board = image(16, 20, |r, c| ((r + c) % 2) as f64);
    let inv = board.map(|v| 1.0 - v);
    let s = ssim(&board, &inv, 1.0).unwrap();
    assert!((s - -0.996406468356957).abs() < 1e-10);
    assert!(s < 0.1);
    assert!(ssim(&Tensor::zeros(&[10, 12]), &Tensor::zeros(&[10, 12]), 1.0).is_err());
}

/// Direct per-pixel evaluation of `-div(grad u / |grad u|)` with thresholding.
fn subgradient_oracle(u: &Tensor, thr: f64) -> Vec<Vec<f64>> {
    let (h, w) = u.dims2().unwrap();
    let field = |r: usize, c: usize| -> (f64, f64) {
        let a = if r + 1 < h { u.at2(r + 1, c) - u.at2(r, c) } else { 0.0 };
        let b = if c + 1 < w { u.at2(r, c + 1) - u.at2(r, c) } else { 0.0 };
        let m = (a * a + b * b).sqrt();
        if m < thr {
            (0.0, 0.0)
        } else {
            (a / m, b / m)
        }
    };
    let mut p = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            let (a, b) = field(r, c);
            let up = if r > 0 { field(r - 1, c).0 } else { 0.0 };
            let left = if c > 0 { field(r, c - 1).1 } else { 0.0 };
            let a_here = if r + 1 < h { a } else { 0.0 };
            let b_here = if c + 1 < w { b } else { 0.0 };
            p[r][c] = -(a_here - up) - (b_here - left);
        }
    }
    p
}

#[test]
fn bregman_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let u1 = random_image(4, 4, &mut rng);
        let u2 = random_image(4, 4, &mut rng);
        let (p1, p2) = (subgradient_oracle(&u1, 1e-5), subgradient_oracle(&u2, 1e-5));
        let mut expect = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                expect += (p1[r][c] - p2[r][c]) * (u1.at2(r, c) - u2.at2(r, c));
            }
        }
        assert!((tv_bregman_distance(&u1, &u2, 1e-5).unwrap() - expect).abs() < 1e-10);
    }
}

#[test]
fn bregman_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_image(6, 6, &mut rng);
    assert_eq!(tv_bregman_distance(&u, &u, BREGMAN_THRESHOLD).unwrap(), 0.0);
    let (a, b) = (Tensor::filled(&[6, 6], 0.2), Tensor::filled(&[6, 6], 0.7));
    assert_eq!(tv_bregman_distance(&a, &b, BREGMAN_THRESHOLD).unwrap(), 0.0);
    // a step smaller than the threshold does not count as an edge
    let tiny = image(6, 6, |r, _| if r < 3 { 0.0 } else { 5e-6 });
    assert_eq!(tv_subgradient(&tiny, BREGMAN_THRESHOLD).unwrap(), Tensor::zeros(&[6, 6]));
    assert!(tv_bregman_distance(&a, &Tensor::zeros(&[3, 12]), 1e-5).is_err());
}

proptest! {
    #[test]
    fn bregman_symmetric_and_non_negative(seed in any::<u64>(), scale in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u1 = random_image(7, 5, &mut rng).scale(scale);
        let u2 = random_image(7, 5, &mut rng);
        let d12 = tv_bregman_distance(&u1, &u2, BREGMAN_THRESHOLD).unwrap();
        let d21 = tv_bregman_distance(&u2, &u1, BREGMAN_THRESHOLD).unwrap();
        prop_assert!(d12 >= -1e-12);
        prop_assert!((d12 - d21).abs() <= 1e-12 * d12.abs().max(1.0));
    }

    #[test]
    fn lipschitz_bound_is_monotone(records in prop::collection::vec((0.0f64..10.0, 0.01f64..10.0), 1..20),
                                   extra in (0.0f64..10.0, 0.01f64..10.0)) {
        let before = lipschitz_lower_bound(&records).unwrap();
        let mut more = records.clone();
        more.push(extra);
        prop_assert!(lipschitz_lower_bound(&more).unwrap() >= before);
    }
}

#[test]
fn lipschitz_bound_basics() {
    assert_eq!(lipschitz_lower_bound(&[(2.0, 1.0)]).unwrap(), 2.0);
    assert_eq!(lipschitz_lower_bound(&[(2.0, 1.0), (3.0, 0.5), (1.0, 4.0)]).unwrap(), 6.0);
    assert!(lipschitz_lower_bound(&[]).is_err());
    assert!(lipschitz_lower_bound(&[(1.0, 0.0)]).is_err());
}

#[test]
fn region_psnr_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean = random_image(12, 12, &mut rng);
    let region = Region::new(3, 4, 5, 6);
    assert_eq!(region_psnr(&clean, &clean, &region, 1.0).unwrap(), (f64::INFINITY, f64::INFINITY));

    let adv = image(12, 12, |r, c| {
        clean.at2(r, c) + if region.contains(r, c) { rng.gen_range(-0.1..0.1) } else { 0.0 }
    });
    let (inner, outer) = region_psnr(&clean, &adv, &region, 1.0).unwrap();
    assert_eq!(outer, f64::INFINITY);
    let crop = |t: &Tensor| image(5, 6, |r, c| t.at2(r + 3, c + 4));
    assert!((inner - psnr(&crop(&clean), &crop(&adv), 1.0).unwrap()).abs() < 1e-12);

    assert!(region_psnr(&clean, &adv, &Region::new(0, 0, 12, 12), 1.0).is_err());
    assert!(region_psnr(&clean, &adv, &Region::new(10, 10, 4, 4), 1.0).is_err());
    assert!(region_psnr(&clean, &adv, &Region::new(1, 1, 0, 3), 1.0).is_err());
}

#[test]
fn csv_round_trip_keeps_infinity_and_blanks() {
    let rows = vec![
        MetricsRow {
            method: "fbp".into(),
            eps: 0.0,
            psnr: 21.5,
            ssim: 0.75,
            d_breg: 3.25,
            dc_clean: 30.0,
            dc_adv: 30.0,
            psnr_f_fdelta: f64::INFINITY,
            psnr_int: None,
            psnr_ext: None,
            success: None,
            l_b_record: None,
        },
        MetricsRow {
            method: "tv".into(),
            eps: 0.025,
            psnr: 0.1 + 0.2,
            ssim: -0.5,
            d_breg: 1e-300,
            dc_clean: 31.0,
            dc_adv: 29.0,
            psnr_f_fdelta: 33.0,
            psnr_int: Some(12.0),
            psnr_ext: Some(f64::INFINITY),
            success: Some(true),
            l_b_record: Some(4.5),
        },
    ];
    let mut buf = Vec::new();
    write_rows(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with(&CSV_COLUMNS.join(",")));
    assert!(text.lines().nth(1).unwrap().contains(",inf,,,,"));
    assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);

    let bad = text.replacen("d_breg", "bregman", 1);
    assert!(matches!(read_rows(bad.as_bytes()), Err(Error::Format(_))));
}

#[test]
fn evaluation_with_zero_delta_matches_clean() {
    use crate::radon::Geometry;
    let op = RadonOperator::build(Geometry::square(16, 10, 25)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = random_image(16, 16, &mut rng);
    let f = op.forward(&gt).unwrap();
    let recon = gt.map(|v| 0.9 * v);
    let delta = Tensor::zeros(f.shape());
    let ev = Evaluation { op: &op, ground_truth: &gt, sinogram: &f, recon_clean: &recon, delta: &delta, recon_adv: &recon };
    let row = ev.row("fbp", 0.0).unwrap();
    assert_eq!(row.dc_clean, row.dc_adv);
    assert_eq!(row.psnr_f_fdelta, f64::INFINITY);
    assert_eq!(row.l_b_record, None);
    assert_eq!(row.psnr, psnr(&recon, &gt, 1.0).unwrap());
}
