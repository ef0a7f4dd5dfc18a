//! Synthetic chest-like phantoms with optional lesions, low-dose measurement
//! simulation and dataset persistence.
//!
//! Ellipse coordinates are normalized: `x` and `y` both run over `[-1, 1]`
//! across the image, `x` to the right and `y` up. Lesions are placed in pixel
//! coordinates because the classifier works on pixel patches.

pub mod ctb;
mod dataset;
mod noise;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::radon::{Geometry, Region};

pub use dataset::{generate_dataset, load_dataset, save_dataset, sidecar_path, Dataset, DatasetConfig, Sample};
pub use noise::simulate_low_dose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_x: f64,
    pub center_y: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
    /// Added to every pixel whose center lies inside.
    pub value: f64,
}

impl Ellipse {
    pub fn axis_aligned(center_x: f64, center_y: f64, semi_x: f64, semi_y: f64, value: f64) -> Self {
        Self {
            center_x,
            center_y,
            semi_x,
            semi_y,
            angle: 0.0,
            value,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        if !(self.semi_x > 0.0 && self.semi_y > 0.0) {
            return false;
        }
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionLabel {
    Benign,
    Malignant,
}

impl LesionLabel {
    pub fn is_malignant(self) -> bool {
        self == LesionLabel::Malignant
    }

    /// 1.0 for malignant, 0.0 for benign.
    pub fn target(self) -> f64 {
        if self.is_malignant() {
            1.0
        } else {
            0.0
        }
    }
}

/// Disk-like lesion. An irregular lesion has the lobulated boundary
/// `r(phi) = radius * (1 + lobe_amplitude * cos(lobes * phi + lobe_phase))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub row: usize,
    pub col: usize,
    pub radius: f64,
    pub contrast: f64,
    pub irregular: bool,
    pub lobes: u32,
    pub lobe_amplitude: f64,
    pub lobe_phase: f64,
    pub label: LesionLabel,
    /// Side of the square patch centered on the lesion.
    pub patch_side: usize,
}

impl Lesion {
    pub fn region(&self) -> Option<Region> {
        Region::centered(self.row, self.col, self.patch_side)
    }

    /// Whether the pixel offset `(dr, dc)` from the lesion center is inside.
    pub fn contains(&self, dr: f64, dc: f64) -> bool {
        let r = (dr * dr + dc * dc).sqrt();
        let bound = if self.irregular {
            // rows grow downward, so flip to get a conventional angle
            let phi = (-dr).atan2(dc);
            self.radius * (1.0 + self.lobe_amplitude * (self.lobes as f64 * phi + self.lobe_phase).cos())
        } else {
            self.radius
        };
        r <= bound
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub ellipses: Vec<Ellipse>,
    pub lesion: Option<Lesion>,
}

/// Rasterizes `spec` by testing pixel centers, then clips to `[0, 1]`.
pub fn render_phantom(spec: &PhantomSpec, geometry: &Geometry) -> Tensor {
    let (h, w) = (geometry.image_height, geometry.image_width);
    let mut img = Tensor::zeros(&[h, w]);
    for r in 0..h {
        let y = 1.0 - (2 * r + 1) as f64 / h as f64;
        for c in 0..w {
            let x = -1.0 + (2 * c + 1) as f64 / w as f64;
            let mut v = spec.ellipses.iter().filter(|e| e.contains(x, y)).fold(0.0, |acc, e| acc + e.value);
            if let Some(l) = &spec.lesion {
                if l.contains(r as f64 - l.row as f64, c as f64 - l.col as f64) {
                    v += l.contrast;
                }
            }
            img.set2(r, c, v.clamp(0.0, 1.0));
        }
    }
    img
}

/// Parameters of the two-feature lesion family. A lesion is malignant iff its
/// contrast is at least `contrast_threshold` and its boundary is irregular.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionConfig {
    pub radius: f64,
    pub patch_side: usize,
    pub low_contrast: [f64; 2],
    pub high_contrast: [f64; 2],
    pub contrast_threshold: f64,
    pub lobes: u32,
    pub lobe_amplitude: f64,
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self {
            radius: 4.0,
            patch_side: 16,
            low_contrast: [0.15, 0.25],
            high_contrast: [0.45, 0.6],
            contrast_threshold: 0.35,
            lobes: 3,
            lobe_amplitude: 0.8,
        }
    }
}

impl LesionConfig {
    pub fn label_for(&self, contrast: f64, irregular: bool) -> LesionLabel {
        if contrast >= self.contrast_threshold && irregular {
            LesionLabel::Malignant
        } else {
            LesionLabel::Benign
        }
    }
}

/// Draws a random chest-like phantom: body outline, two lungs, heart, spine
/// and a few small soft-tissue blobs. With `lesions`, a lesion is put in one
/// lung; half of the lesions are malignant.
pub fn random_chest<R: Rng>(rng: &mut R, geometry: &Geometry, lesions: Option<&LesionConfig>) -> PhantomSpec {
    let j = |rng: &mut R, s: f64| rng.gen_range(-s..=s);
    let body_value = 0.55 + j(rng, 0.05);
    let mut ellipses = vec![Ellipse {
        center_x: j(rng, 0.02),
        center_y: j(rng, 0.02),
        semi_x: 0.86 + j(rng, 0.04),
        semi_y: 0.66 + j(rng, 0.04),
        angle: j(rng, 0.05),
        value: body_value,
    }];
    let lung_value = -(body_value - 0.08 - rng.gen_range(0.0..0.04));
    let mut lungs = Vec::new();
    for side in [-1.0, 1.0] {
        let lung = Ellipse {
            center_x: side * (0.38 + j(rng, 0.02)),
            center_y: 0.05 + j(rng, 0.03),
            semi_x: 0.27 + j(rng, 0.02),
            semi_y: 0.45 + j(rng, 0.03),
            angle: side * (0.1 + j(rng, 0.05)),
            value: lung_value,
        };
        lungs.push(lung.clone());
        ellipses.push(lung);
    }
    ellipses.push(Ellipse {
        center_x: -0.06 + j(rng, 0.03),
        center_y: -0.18 + j(rng, 0.03),
        semi_x: 0.2 + j(rng, 0.02),
        semi_y: 0.17 + j(rng, 0.02),
        angle: j(rng, 0.3),
        value: 0.2 + j(rng, 0.04),
    });
    ellipses.push(Ellipse::axis_aligned(j(rng, 0.02), -0.52 + j(rng, 0.02), 0.09, 0.08, 0.35 + j(rng, 0.05)));
    let blobs = rng.gen_range(3..=6);
    for _ in 0..blobs {
        let r = rng.gen_range(0.0..0.6);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        ellipses.push(Ellipse {
            center_x: r * phi.cos(),
            center_y: 0.75 * r * phi.sin(),
            semi_x: rng.gen_range(0.03..0.09),
            semi_y: rng.gen_range(0.03..0.09),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            value: rng.gen_range(0.04..0.12) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        });
    }

    let lesion = lesions.map(|cfg| {
        let lung = &lungs[rng.gen_range(0..2)];
        let (h, w) = (geometry.image_height as f64, geometry.image_width as f64);
        // lung center in pixel coordinates, jittered but kept inside the lung
        let col0 = (lung.center_x + 1.0) * w / 2.0 - 0.5;
        let row0 = (1.0 - lung.center_y) * h / 2.0 - 0.5;
        let half = cfg.patch_side as f64 / 2.0;
        let clamp = |v: f64, n: f64| v.round().clamp(half, n - half) as usize;
        let row = clamp(row0 + j(rng, 0.2 * lung.semi_y * h / 2.0), h);
        let col = clamp(col0 + j(rng, 0.2 * lung.semi_x * w / 2.0), w);
        let malignant = rng.gen_bool(0.5);
        let (high, irregular) = if malignant {
            (true, true)
        } else {
            match rng.gen_range(0..3) {
                0 => (false, false),
                1 => (false, true),
                _ => (true, false),
            }
        };
        let band = if high { cfg.high_contrast } else { cfg.low_contrast };
        let contrast = rng.gen_range(band[0]..=band[1]);
        Lesion {
            row,
            col,
            radius: cfg.radius * rng.gen_range(0.9..1.1),
            contrast,
            irregular,
            lobes: cfg.lobes,
            lobe_amplitude: if irregular { cfg.lobe_amplitude } else { 0.0 },
            lobe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            label: cfg.label_for(contrast, irregular),
            patch_side: cfg.patch_side,
        }
    });
    PhantomSpec { ellipses, lesion }
}
