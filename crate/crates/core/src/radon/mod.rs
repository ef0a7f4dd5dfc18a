//! Parallel-beam Radon transform as an exact ray-traced sparse matrix.
//!
//! Image pixel `(row, col)` covers `x in [-W p/2 + col p, .. + p]` and
//! `y in [H p/2 - (row + 1) p, .. + p]`, so row 0 is at the top. The ray for
//! angle `theta` and detector offset `s` is the line `x cos(theta) + y sin(theta) = s`;
//! at `theta = 0` rays are vertical. Angles sample `[0, pi)` uniformly.
//!
//! Weights are intersection lengths computed by Siddon-style traversal, so
//! the back projection is the literal matrix transpose.

mod mask;
mod siddon;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sparse::{CsrMatrix, LinearOp};

pub use mask::gaussian_blur;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub image_height: usize,
    pub image_width: usize,
    pub pixel_spacing: f64,
    pub num_angles: usize,
    pub num_detectors: usize,
    pub detector_spacing: f64,
}

impl Default for Geometry {
    /// 64x64 image on a unit-width field of view, 60 angles, 95 detectors
    /// (the 64-pixel diagonal is 90.5 bins).
    fn default() -> Self {
        Self::square(64, 60, 95)
    }
}

impl Geometry {
    /// Square `n x n` image spanning a unit-width field of view, with
    /// detector bins as wide as pixels.
    pub fn square(n: usize, num_angles: usize, num_detectors: usize) -> Self {
        let spacing = 1.0 / n as f64;
        Self {
            image_height: n,
            image_width: n,
            pixel_spacing: spacing,
            num_angles,
            num_detectors,
            detector_spacing: spacing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::InvalidGeometry("empty image".into()));
        }
        if self.num_angles == 0 || self.num_detectors == 0 {
            return Err(Error::InvalidGeometry(
                "need at least one angle and one detector".into(),
            ));
        }
        if !(self.pixel_spacing > 0.0 && self.detector_spacing > 0.0) {
            return Err(Error::InvalidGeometry("spacings must be positive".into()));
        }
        let diag = self.pixel_spacing
            * ((self.image_height.pow(2) + self.image_width.pow(2)) as f64).sqrt();
        let span = self.num_detectors as f64 * self.detector_spacing;
        if span + 1e-12 * diag < diag {
            return Err(Error::InvalidGeometry(format!(
                "detector array spans {span:.6} but the image diagonal is {diag:.6}"
            )));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.image_height, self.image_width]
    }

    pub fn sinogram_shape(&self) -> [usize; 2] {
        [self.num_angles, self.num_detectors]
    }

    pub fn num_pixels(&self) -> usize {
        self.image_height * self.image_width
    }

    pub fn num_rays(&self) -> usize {
        self.num_angles * self.num_detectors
    }

    pub fn angle(&self, index: usize) -> f64 {
        std::f64::consts::PI * index as f64 / self.num_angles as f64
    }

    pub fn detector_offset(&self, index: usize) -> f64 {
        (index as f64 - (self.num_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }
}

/// Axis-aligned pixel rectangle `[row0, row0 + height) x [col0, col0 + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn new(row0: usize, col0: usize, height: usize, width: usize) -> Self {
        Self {
            row0,
            col0,
            height,
            width,
        }
    }

    /// Square of side `side` centered on `(row, col)` (rounded toward the top-left).
    pub fn centered(row: usize, col: usize, side: usize) -> Option<Self> {
        let half = side / 2;
        Some(Self::new(row.checked_sub(half)?, col.checked_sub(half)?, side, side))
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row0 + self.height).contains(&row)
            && (self.col0..self.col0 + self.width).contains(&col)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row0 + self.height <= height && self.col0 + self.width <= width
    }

    pub(crate) fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::invalid("region has zero area"));
        }
        if !self.fits(height, width) {
            return Err(Error::invalid(format!(
                "region {self:?} exceeds the {height}x{width} image"
            )));
        }
        Ok(())
    }
}

/// Immutable system matrix for one [`Geometry`]; safe to share across threads.
#[derive(Debug)]
pub struct RadonOperator {
    geometry: Geometry,
    map: LinearOp,
    sigma_max: OnceLock<f64>,
}

impl RadonOperator {
    pub fn build(geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        let mut rows = Vec::with_capacity(geometry.num_rays());
        for a in 0..geometry.num_angles {
            let theta = geometry.angle(a);
            for d in 0..geometry.num_detectors {
                rows.push(siddon::trace(&geometry, theta, geometry.detector_offset(d)));
            }
        }
        let matrix = CsrMatrix::from_rows(geometry.num_pixels(), rows)?;
        let map = LinearOp::new(
            matrix,
            geometry.image_shape().to_vec(),
            geometry.sinogram_shape().to_vec(),
        )?;
        Ok(Self {
            geometry,
            map,
            sigma_max: OnceLock::new(),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn matrix(&self) -> &CsrMatrix {
        self.map.matrix()
    }

    pub fn linear_op(&self) -> &LinearOp {
        &self.map
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        image.ensure_shape("radon forward", &self.geometry.image_shape())?;
        Ok(Tensor::raw(
            self.geometry.sinogram_shape().to_vec(),
            self.map.apply(image.data()),
        ))
    }

    /// Back projection, the exact transpose of [`RadonOperator::forward`].
    pub fn adjoint(&self, sinogram: &Tensor) -> Result<Tensor> {
        sinogram.ensure_shape("radon adjoint", &self.geometry.sinogram_shape())?;
        Ok(Tensor::raw(
            self.geometry.image_shape().to_vec(),
            self.map.apply_adjoint(sinogram.data()),
        ))
    }

    pub fn record_forward(&self, tape: &mut Tape, image: NodeId) -> Result<NodeId> {
        tape.matvec(&self.map, image)
    }

    pub fn record_adjoint(&self, tape: &mut Tape, sinogram: NodeId) -> Result<NodeId> {
        tape.matvec(&self.map.adjoint(), sinogram)
    }

    /// Largest singular value, estimated once by power iteration on `A^T A`.
    pub fn spectral_norm(&self) -> f64 {
        *self.sigma_max.get_or_init(|| {
            let n = self.geometry.num_pixels();
            let mut tmp = vec![0.0; self.geometry.num_rays()];
            let eig = linalg::power_iteration(n, 1e-13, 10_000, |x, y| {
                self.map.matrix().mul_vec(x, &mut tmp);
                self.map.transpose_matrix().mul_vec(&tmp, y);
            });
            eig.sqrt()
        })
    }

    /// Sinogram of the Gaussian-smoothed indicator of `region`, scaled to a
    /// maximum of exactly 1. The blur kernel is truncated at `ceil(4 sigma)`.
    pub fn sinogram_mask(&self, region: &Region, blur_sigma: f64) -> Result<Tensor> {
        mask::sinogram_mask(self, region, blur_sigma)
    }
}
