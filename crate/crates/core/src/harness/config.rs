use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackMode};
use crate::classifier::ClassifierTrainConfig;
use crate::error::{Error, Result};
use crate::phantom::{DatasetConfig, LesionConfig};
use crate::radon::Geometry;
use crate::recon::{FbpConfig, TrainConfig, TvConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Fbp,
    Tv,
    UnrolledGd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    /// Name used in CSV rows and file names.
    pub id: String,
    pub kind: MethodKind,
    /// Filter of FBP itself and of the initialization of TV / unrolled GD.
    #[serde(default)]
    pub fbp: FbpConfig,
    #[serde(default)]
    pub tv: TvConfig,
}

impl MethodSpec {
    pub fn new(id: &str, kind: MethodKind) -> Self {
        Self {
            id: id.to_string(),
            kind,
            fbp: FbpConfig::default(),
            tv: TvConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnrolledSetup {
    /// Training phantoms, disjoint from the evaluation set.
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for UnrolledSetup {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig { count: 30, seed: 1 << 32, ..DatasetConfig::default() },
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSetup {
    /// Lesion phantoms: the first `train_count` train the classifier on
    /// ground-truth patches, the rest are attacked in localized mode.
    pub dataset: DatasetConfig,
    pub train_count: usize,
    pub train: ClassifierTrainConfig,
}

impl Default for ClassifierSetup {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                count: 230,
                seed: 2 << 32,
                lesions: Some(LesionConfig::default()),
                ..DatasetConfig::default()
            },
            train_count: 200,
            train: ClassifierTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSetup {
    /// Radii as fractions of the sinogram intensity range; every mode runs all of them.
    pub epsilons: Vec<f64>,
    pub untargeted: AttackConfig,
    pub localized: AttackConfig,
    pub universal: AttackConfig,
    /// Universal mode optimizes on the first `universal_fit` evaluation
    /// samples and also scores the remaining ones.
    pub universal_fit: usize,
    pub transfer_epsilon: f64,
    /// Samples whose reconstructions are dumped as PGM images.
    pub dump_images: usize,
}

impl Default for AttackSetup {
    fn default() -> Self {
        Self {
            epsilons: vec![0.01, 0.025, 0.05],
            untargeted: AttackConfig::default(),
            localized: AttackConfig {
                steps: 50,
                mode: AttackMode::Localized,
                ..AttackConfig::default()
            },
            universal: AttackConfig {
                mode: AttackMode::Universal,
                ..AttackConfig::default()
            },
            universal_fit: 15,
            transfer_epsilon: 0.025,
            dump_images: 3,
        }
    }
}

impl AttackSetup {
    pub fn config(&self, mode: AttackMode) -> &AttackConfig {
        match mode {
            AttackMode::Untargeted => &self.untargeted,
            AttackMode::Localized => &self.localized,
            AttackMode::Universal => &self.universal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Recorded for provenance; [`ExperimentConfig::with_seed`] derives every other seed from it.
    pub seed: u64,
    pub geometry: Geometry,
    /// Evaluation phantoms for untargeted, universal and transfer campaigns.
    pub dataset: DatasetConfig,
    pub methods: Vec<MethodSpec>,
    pub unrolled: UnrolledSetup,
    pub classifier: ClassifierSetup,
    pub attacks: AttackSetup,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: Geometry::default(),
            dataset: DatasetConfig::default(),
            methods: vec![
                MethodSpec::new("fbp", MethodKind::Fbp),
                MethodSpec::new("tv", MethodKind::Tv),
                MethodSpec::new("unrolled_gd", MethodKind::UnrolledGd),
            ],
            unrolled: UnrolledSetup::default(),
            classifier: ClassifierSetup::default(),
            attacks: AttackSetup::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Sets every seed from `seed`. The three datasets use seeds `2^32` apart,
    /// so their per-sample streams `seed ^ index` never coincide.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.unrolled.dataset.seed = seed.wrapping_add(1 << 32);
        self.classifier.dataset.seed = seed.wrapping_add(2 << 32);
        self.unrolled.train.seed = seed;
        self.classifier.train.seed = seed;
        self.attacks.untargeted.seed = seed;
        self.attacks.localized.seed = seed;
        self.attacks.universal.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods configured"));
        }
        let mut seen = HashSet::new();
        for m in &self.methods {
            if m.id.is_empty() || m.id.contains(['/', '\\', ',']) {
                return Err(Error::invalid(format!("method id {:?} is not a plain name", m.id)));
            }
            if !seen.insert(m.id.as_str()) {
                return Err(Error::invalid(format!("duplicate method id {:?}", m.id)));
            }
            m.fbp.validate()?;
            m.tv.validate()?;
        }
        let a = &self.attacks;
        if a.epsilons.is_empty() {
            return Err(Error::invalid("epsilon list is empty"));
        }
        if let Some(e) = a.epsilons.iter().chain([&a.transfer_epsilon]).find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(Error::invalid(format!("epsilon {e} must be non-negative")));
        }
        for mode in [AttackMode::Untargeted, AttackMode::Localized, AttackMode::Universal] {
            a.config(mode).validate()?;
        }
        if self.classifier.dataset.lesions.is_none() {
            return Err(Error::invalid("classifier dataset needs lesions"));
        }
        Ok(())
    }

    pub fn method(&self, id: &str) -> Option<&MethodSpec> {
        self.methods.iter().find(|m| m.id == id)
    }
}
