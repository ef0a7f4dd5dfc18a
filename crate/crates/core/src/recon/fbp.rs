use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Reconstructor;
use crate::autodiff::{correlate1d, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::radon::RadonOperator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Ramp,
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbpConfig {
    pub window: Window,
    /// Fraction of the detector Nyquist frequency above which the filter is zero.
    pub cutoff: f64,
}

impl Default for FbpConfig {
    fn default() -> Self {
        Self {
            window: Window::Hann,
            cutoff: 0.641,
        }
    }
}

impl FbpConfig {
    pub fn ramp() -> Self {
        Self {
            window: Window::Ramp,
            cutoff: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::invalid(format!("fbp cutoff {} outside (0, 1]", self.cutoff)));
        }
        Ok(())
    }

    /// Frequency response at `omega` (cycles per unit length) for detector
    /// spacing `d`.
    pub fn response(&self, omega: f64, d: f64) -> f64 {
        let nyquist = 0.5 / d;
        let x = omega.abs() / (self.cutoff * nyquist);
        if x > 1.0 {
            return 0.0;
        }
        let w = match self.window {
            Window::Ramp => 1.0,
            Window::Hann => 0.5 * (1.0 + (PI * x).cos()),
        };
        omega.abs() * w
    }
}

/// Spatial kernel equivalent to filtering a zero-padded row of `n` bins in
/// the frequency domain. The padded length is the next power of two `>= 2n`,
/// so the circular convolution never wraps onto the first `n` outputs.
/// Returned with length `2n - 1`, centered.
pub fn filter_kernel(cfg: &FbpConfig, n: usize, d: f64) -> Vec<f64> {
    let p = (2 * n).next_power_of_two();
    let response: Vec<f64> = (0..p)
        .map(|k| {
            let kk = k.min(p - k) as f64;
            cfg.response(kk / (p as f64 * d), d)
        })
        .collect();
    let half: Vec<f64> = (0..n)
        .map(|m| {
            let s: f64 = response
                .iter()
                .enumerate()
                .map(|(k, h)| h * (2.0 * PI * (k * m % p) as f64 / p as f64).cos())
                .sum();
            s / p as f64
        })
        .collect();
    (0..2 * n - 1).map(|j| half[(j as isize - (n as isize - 1)).unsigned_abs()]).collect()
}

/// Filtered back projection `(pi / num_angles) (d / p^2) A^T (h * f)`.
///
/// `d / p^2` converts the ray-driven back projection (a sum of intersection
/// lengths) into a per-angle average over detector bins.
#[derive(Clone, Debug)]
pub struct Fbp {
    op: Arc<RadonOperator>,
    cfg: FbpConfig,
    kernel: Arc<[f64]>,
    scale: f64,
}

impl Fbp {
    pub fn new(op: Arc<RadonOperator>, cfg: FbpConfig) -> Result<Self> {
        cfg.validate()?;
        let g = op.geometry();
        let kernel = filter_kernel(&cfg, g.num_detectors, g.detector_spacing).into();
        let scale = PI / g.num_angles as f64 * g.detector_spacing / (g.pixel_spacing * g.pixel_spacing);
        Ok(Self {
            op,
            cfg,
            kernel,
            scale,
        })
    }

    pub fn config(&self) -> &FbpConfig {
        &self.cfg
    }

    pub fn operator(&self) -> &Arc<RadonOperator> {
        &self.op
    }

    /// The filtered sinogram before back projection.
    pub fn filter(&self, f: &Tensor) -> Result<Tensor> {
        f.ensure_shape("fbp input", &self.op.geometry().sinogram_shape())?;
        let mut out = vec![0.0; f.len()];
        correlate1d(f.data(), self.op.geometry().num_detectors, &self.kernel, &mut out);
        Ok(Tensor::raw(f.shape().to_vec(), out))
    }
}

impl Reconstructor for Fbp {
    fn name(&self) -> &str {
        "fbp"
    }

    fn operator(&self) -> &RadonOperator {
        &self.op
    }

    fn reconstruct(&self, f: &Tensor) -> Result<Tensor> {
        let filtered = self.filter(f)?;
        Ok(self.op.adjoint(&filtered)?.scale(self.scale))
    }

    fn record(&self, tape: &mut Tape, f: NodeId) -> Result<NodeId> {
        let filtered = tape.correlate1d(f, Arc::clone(&self.kernel))?;
        let bp = self.op.record_adjoint(tape, filtered)?;
        tape.scale(bp, self.scale)
    }
}
