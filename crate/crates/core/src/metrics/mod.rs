//! Image and sinogram quality measures, the TV Bregman distance, the empirical
//! Lipschitz lower bound and the CSV row type shared by every campaign.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad2d, grad2d_adjoint, Tensor};
use crate::error::{Error, Result};
use crate::radon::{RadonOperator, Region};

/// Images live in `[0, 1]`.
pub const IMAGE_RANGE: f64 = 1.0;

pub const BREGMAN_THRESHOLD: f64 = 1e-5;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(context: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(context, x.shape(), y.shape()));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` when the inputs are identical.
pub fn psnr(x: &Tensor, y: &Tensor, data_range: f64) -> Result<f64> {
    check_pair("psnr", x, y)?;
    if !(data_range > 0.0) {
        return Err(Error::invalid(format!("psnr data range {data_range} must be positive")));
    }
    let sse: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(psnr_from_mse(sse / x.len() as f64, data_range))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering restricted to fully covered ("valid") positions.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..k).map(|j| g[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over the positions where the window fits inside the image.
pub fn ssim(x: &Tensor, y: &Tensor, data_range: f64) -> Result<f64> {
    check_pair("ssim", x, y)?;
    let (h, w) = x.dims2()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    if !(data_range > 0.0) {
        return Err(Error::invalid(format!("ssim data range {data_range} must be positive")));
    }
    let g = gaussian_window();
    let (xd, yd) = (x.data(), y.data());
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(xd, h, w, &g);
    let my = filter_valid(yd, h, w, &g);
    let mxx = filter_valid(&prod(xd, xd), h, w, &g);
    let myy = filter_valid(&prod(yd, yd), h, w, &g);
    let mxy = filter_valid(&prod(xd, yd), h, w, &g);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = mxx[i] - a * a;
            let vy = myy[i] - b * b;
            let cxy = mxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// TV subgradient `D^T (Du / |Du|)` with the per-pixel field zeroed where
/// `|Du| < threshold`.
pub fn tv_subgradient(u: &Tensor, threshold: f64) -> Result<Tensor> {
    let (h, w) = u.dims2()?;
    let n = h * w;
    let mut field = vec![0.0; 2 * n];
    grad2d(u.data(), h, w, &mut field);
    for i in 0..n {
        let m = field[i].hypot(field[n + i]);
        if m < threshold {
            field[i] = 0.0;
            field[n + i] = 0.0;
        } else {
            field[i] /= m;
            field[n + i] /= m;
        }
    }
    let mut p = vec![0.0; n];
    grad2d_adjoint(&field, h, w, &mut p);
    Tensor::new(vec![h, w], p)
}

/// Symmetric Bregman distance `<p1 - p2, u1 - u2>` of the TV functional.
pub fn tv_bregman_distance(u1: &Tensor, u2: &Tensor, threshold: f64) -> Result<f64> {
    check_pair("bregman distance", u1, u2)?;
    let dp = tv_subgradient(u1, threshold)?.sub(&tv_subgradient(u2, threshold)?)?;
    Ok(dp.dot(&u1.sub(u2)?))
}

/// `max_i |N(f + delta_i) - N(f)| / |delta_i|` over `(output change, input norm)` records.
pub fn lipschitz_lower_bound(records: &[(f64, f64)]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("lipschitz bound needs at least one record"));
    }
    let mut best = f64::NEG_INFINITY;
    for &(out, inp) in records {
        if !(inp > 0.0) {
            return Err(Error::invalid("lipschitz record with zero-norm perturbation"));
        }
        best = best.max(out / inp);
    }
    Ok(best)
}

/// PSNR inside `region` and on its complement, both with the given data range.
pub fn region_psnr(clean: &Tensor, adv: &Tensor, region: &Region, data_range: f64) -> Result<(f64, f64)> {
    check_pair("region psnr", clean, adv)?;
    let (h, w) = clean.dims2()?;
    region.check_within(h, w)?;
    if region.area() == h * w {
        return Err(Error::invalid("region leaves no exterior"));
    }
    let (mut si, mut se) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let d = clean.at2(r, c) - adv.at2(r, c);
            if region.contains(r, c) {
                si += d * d;
            } else {
                se += d * d;
            }
        }
    }
    let ni = region.area() as f64;
    let ne = (h * w) as f64 - ni;
    Ok((psnr_from_mse(si / ni, data_range), psnr_from_mse(se / ne, data_range)))
}

/// One CSV row. Optional columns are empty when they do not apply;
/// infinite PSNR is written as `inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub eps: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub d_breg: f64,
    pub dc_clean: f64,
    pub dc_adv: f64,
    pub psnr_f_fdelta: f64,
    pub psnr_int: Option<f64>,
    pub psnr_ext: Option<f64>,
    pub success: Option<bool>,
    pub l_b_record: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "method",
    "eps",
    "psnr",
    "ssim",
    "d_breg",
    "dc_clean",
    "dc_adv",
    "psnr_f_fdelta",
    "psnr_int",
    "psnr_ext",
    "success",
    "l_b_record",
];

/// Everything needed to score one (possibly perturbed) reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation<'a> {
    pub op: &'a RadonOperator,
    pub ground_truth: &'a Tensor,
    /// Unperturbed measurement.
    pub sinogram: &'a Tensor,
    pub recon_clean: &'a Tensor,
    pub delta: &'a Tensor,
    pub recon_adv: &'a Tensor,
}

impl Evaluation<'_> {
    /// Scores the adversarial reconstruction; sinogram PSNRs use the range of
    /// the unperturbed measurement. SSIM is NaN for images smaller than its window.
    pub fn row(&self, method: &str, eps: f64) -> Result<MetricsRow> {
        let f = self.sinogram;
        let f_adv = f.add(self.delta)?;
        let sino_range = f.range();
        let dn = self.delta.norm();
        let (h, w) = self.recon_adv.dims2()?;
        Ok(MetricsRow {
            method: method.to_string(),
            eps,
            psnr: psnr(self.recon_adv, self.ground_truth, IMAGE_RANGE)?,
            ssim: if h < SSIM_WINDOW || w < SSIM_WINDOW {
                f64::NAN
            } else {
                ssim(self.recon_adv, self.ground_truth, IMAGE_RANGE)?
            },
            d_breg: tv_bregman_distance(self.recon_adv, self.ground_truth, BREGMAN_THRESHOLD)?,
            dc_clean: psnr(&self.op.forward(self.recon_clean)?, f, sino_range)?,
            dc_adv: psnr(&self.op.forward(self.recon_adv)?, &f_adv, sino_range)?,
            psnr_f_fdelta: psnr(f, &f_adv, sino_range)?,
            psnr_int: None,
            psnr_ext: None,
            success: None,
            l_b_record: (dn > 0.0).then(|| self.recon_adv.sub(self.recon_clean).map(|d| d.norm() / dn)).transpose()?,
        })
    }
}

pub fn write_rows<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows, failing if the header is not exactly [`CSV_COLUMNS`].
pub fn read_rows<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Format(format!("unexpected csv header {header:?}, expected {CSV_COLUMNS:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests;
