use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ctb::{self, BlobRef};
use super::{random_chest, render_phantom, simulate_low_dose, LesionConfig, PhantomSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::radon::{Geometry, RadonOperator, Region};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub photons: f64,
    /// Insert one lesion per phantom when set.
    pub lesions: Option<LesionConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 30,
            seed: 0,
            photons: 4096.0,
            lesions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: PhantomSpec,
    pub image: Tensor,
    /// Noiseless `A u`.
    pub clean: Tensor,
    /// Poisson low-dose measurement of `clean`.
    pub noisy: Tensor,
    pub noise_seed: u64,
}

impl Sample {
    pub fn region(&self) -> Option<Region> {
        self.spec.lesion.as_ref().and_then(|l| l.region())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub geometry: Geometry,
    pub seed: u64,
    pub photons: f64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples `range` as a new dataset (same geometry and seed).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            geometry: self.geometry.clone(),
            seed: self.seed,
            photons: self.photons,
            samples: self.samples[range].to_vec(),
        }
    }
}

fn make_sample(op: &RadonOperator, cfg: &DatasetConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let spec = random_chest(&mut rng, op.geometry(), cfg.lesions.as_ref());
    let noise_seed = rng.next_u64();
    let image = render_phantom(&spec, op.geometry());
    let clean = op.forward(&image)?;
    let noisy = simulate_low_dose(&clean, cfg.photons, noise_seed)?;
    Ok(Sample {
        spec,
        image,
        clean,
        noisy,
        noise_seed,
    })
}

/// Sample `i` uses the stream `ChaCha8(seed ^ i)`: phantom draws first, then
/// the noise seed. Results do not depend on the thread count.
pub fn generate_dataset(op: &RadonOperator, cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.count == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let samples = (0..cfg.count)
        .into_par_iter()
        .map(|i| make_sample(op, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        geometry: op.geometry().clone(),
        seed: cfg.seed,
        photons: cfg.photons,
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct RegionEntry {
    center_row: usize,
    center_col: usize,
    side: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    index: usize,
    noise_seed: u64,
    spec: PhantomSpec,
    region: Option<RegionEntry>,
    image: BlobRef,
    clean: BlobRef,
    noisy: BlobRef,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    blobs: String,
    seed: u64,
    photons: f64,
    geometry: Geometry,
    samples: Vec<SampleEntry>,
}

/// JSON index stored next to a CTB1 file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the arrays to `path` and the index to `path` with a `.json` extension.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut arrays = Vec::with_capacity(3 * dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        arrays.push((format!("image/{i}"), &s.image));
        arrays.push((format!("clean/{i}"), &s.clean));
        arrays.push((format!("noisy/{i}"), &s.noisy));
    }
    let mut refs = ctb::write_arrays(path, &arrays)?.into_iter();
    let mut next = || refs.next().expect("three blobs per sample");
    let samples = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(index, s)| SampleEntry {
            index,
            noise_seed: s.noise_seed,
            spec: s.spec.clone(),
            region: s.spec.lesion.as_ref().map(|l| RegionEntry {
                center_row: l.row,
                center_col: l.col,
                side: l.patch_side,
            }),
            image: next(),
            clean: next(),
            noisy: next(),
        })
        .collect();
    let sidecar = Sidecar {
        format: "CTB1".into(),
        blobs: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: dataset.seed,
        photons: dataset.photons,
        geometry: dataset.geometry.clone(),
        samples,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.format != "CTB1" {
        return Err(Error::Format(format!("unknown format {}", sidecar.format)));
    }
    let refs: Vec<BlobRef> = sidecar
        .samples
        .iter()
        .flat_map(|s| [s.image.clone(), s.clean.clone(), s.noisy.clone()])
        .collect();
    let mut arrays = ctb::read_arrays(path, &refs)?.into_iter();
    let samples = sidecar
        .samples
        .into_iter()
        .map(|e| {
            let mut next = || arrays.next().expect("three blobs per sample");
            Sample {
                spec: e.spec,
                image: next(),
                clean: next(),
                noisy: next(),
                noise_seed: e.noise_seed,
            }
        })
        .collect();
    Ok(Dataset {
        geometry: sidecar.geometry,
        seed: sidecar.seed,
        photons: sidecar.photons,
        samples,
    })
}
