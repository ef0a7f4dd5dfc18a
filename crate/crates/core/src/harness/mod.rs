//! Experiment driver behind the CLI: dataset generation, training, attack
//! campaigns, transfer matrices and reports, all reading and writing one
//! output directory.
//!
//! Layout of the output directory:
//!
//! | file | written by |
//! |---|---|
//! | `config.json` | `generate` (copy of the configuration used) |
//! | `dataset.ctb`, `train.ctb`, `lesions.ctb` (+ `.json` sidecars) | `generate` |
//! | `unrolled.ctb` (+ `.json`) | `train-unrolled` |
//! | `classifier.ctb` (+ `.json`) | `train-classifier` |
//! | `<mode>.csv`, `<mode>_summary.csv`, `<mode>_deltas.ctb` (+ `.json`) | `attack` |
//! | `universal_holdout.csv`, `universal_holdout_summary.csv` | `attack --mode universal` |
//! | `images/<mode>/...pgm` | `attack` |
//! | `transfer.csv` | `transfer` |
//! | `report.txt` | `report` |

mod config;
pub mod pgm;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{AttackSetup, ClassifierSetup, ExperimentConfig, MethodKind, MethodSpec, UnrolledSetup};
pub use report::{cmd_report, read_summary, write_summary, SummaryRow, TransferCell, EXPECTED_RESULTS};

use crate::attack::{
    attack_localized, attack_universal, attack_untargeted, transfer_delta, AttackConfig, AttackMode, AttackResult,
    Instance, LipschitzRecord, LocalTarget,
};
use crate::autodiff::Tensor;
use crate::classifier::{self, load_classifier, save_classifier, train_classifier, ClassifierParams};
use crate::error::{Error, Result};
use crate::metrics::{write_rows, MetricsRow};
use crate::phantom::ctb::{self, BlobRef};
use crate::phantom::{generate_dataset, load_dataset, save_dataset, Dataset, Sample};
use crate::radon::RadonOperator;
use crate::recon::{load_params, save_params, train_unrolled, Fbp, FbpConfig, Reconstructor, Tv, UnrolledGd, UnrolledGdParams};

pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.ctb";
pub const TRAIN_FILE: &str = "train.ctb";
pub const LESIONS_FILE: &str = "lesions.ctb";
pub const UNROLLED_FILE: &str = "unrolled.ctb";
pub const CLASSIFIER_FILE: &str = "classifier.ctb";
pub const TRANSFER_FILE: &str = "transfer.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const UNIVERSAL_HOLDOUT: &str = "universal_holdout";

/// Per-sample metrics file of a campaign, e.g. `untargeted.csv`.
pub fn metrics_file(stem: &str) -> String {
    format!("{stem}.csv")
}

pub fn summary_file(stem: &str) -> String {
    format!("{stem}_summary.csv")
}

fn deltas_file(mode: AttackMode) -> String {
    format!("{}_deltas.ctb", mode.name())
}

/// Runs `f` on a pool of `jobs` threads (`None`: rayon's default).
/// Every reduction in the harness is in index order, so results do not depend on `jobs`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::invalid("--jobs must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn operator(cfg: &ExperimentConfig) -> Result<Arc<RadonOperator>> {
    Ok(Arc::new(RadonOperator::build(cfg.geometry.clone())?))
}

fn load_checked(cfg: &ExperimentConfig, name: &str) -> Result<Dataset> {
    let path = out_path(cfg, name);
    if !path.exists() {
        return Err(Error::Missing(format!("missing {}: run `generate` first", path.display())));
    }
    let ds = load_dataset(&path)?;
    if ds.geometry != cfg.geometry {
        return Err(Error::invalid(format!("{} was generated for a different geometry", path.display())));
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub evaluation: usize,
    pub training: usize,
    pub lesions: usize,
}

/// Generates the evaluation, unrolled-training and lesion datasets.
/// Output depends only on the configuration.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let op = operator(cfg)?;
    let mut counts = Vec::with_capacity(3);
    for (name, dcfg) in [
        (DATASET_FILE, &cfg.dataset),
        (TRAIN_FILE, &cfg.unrolled.dataset),
        (LESIONS_FILE, &cfg.classifier.dataset),
    ] {
        let ds = generate_dataset(&op, dcfg)?;
        save_dataset(&ds, &out_path(cfg, name))?;
        counts.push(ds.len());
    }
    cfg.save(&out_path(cfg, CONFIG_FILE))?;
    Ok(GenerateSummary {
        evaluation: counts[0],
        training: counts[1],
        lesions: counts[2],
    })
}

fn unrolled_fbp(cfg: &ExperimentConfig) -> FbpConfig {
    cfg.methods
        .iter()
        .find(|m| m.kind == MethodKind::UnrolledGd)
        .map(|m| m.fbp.clone())
        .unwrap_or_default()
}

pub fn cmd_train_unrolled(cfg: &ExperimentConfig) -> Result<UnrolledGdParams> {
    cfg.validate()?;
    let op = operator(cfg)?;
    let ds = load_checked(cfg, TRAIN_FILE)?;
    let pairs: Vec<(Tensor, Tensor)> = ds.samples.into_iter().map(|s| (s.noisy, s.image)).collect();
    let params = train_unrolled(op, &unrolled_fbp(cfg), &pairs, &cfg.unrolled.train)?;
    save_params(&params, &out_path(cfg, UNROLLED_FILE))?;
    Ok(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSummary {
    pub train_accuracy: f64,
    /// Accuracy on ground-truth patches of the lesion phantoms not used for training.
    pub heldout_accuracy: Option<f64>,
}

fn lesion_patches(samples: &[Sample]) -> Result<Vec<(Tensor, bool)>> {
    samples
        .iter()
        .map(|s| {
            let lesion = s.spec.lesion.as_ref().ok_or_else(|| Error::invalid("sample without lesion"))?;
            let region = s.region().ok_or_else(|| Error::invalid("lesion patch leaves the image"))?;
            Ok((classifier::crop_region(&s.image, &region)?, lesion.label.is_malignant()))
        })
        .collect()
}

/// Trains the lesion classifier on ground-truth patches of the first
/// `train_count` lesion phantoms.
pub fn cmd_train_classifier(cfg: &ExperimentConfig) -> Result<ClassifierSummary> {
    cfg.validate()?;
    let ds = load_checked(cfg, LESIONS_FILE)?;
    let n = cfg.classifier.train_count;
    if n == 0 || n > ds.len() {
        return Err(Error::invalid(format!("train_count {n} outside 1..={}", ds.len())));
    }
    let train = lesion_patches(&ds.samples[..n])?;
    let params = train_classifier(&train, &cfg.classifier.train)?;
    save_classifier(&params, &out_path(cfg, CLASSIFIER_FILE))?;
    let held = lesion_patches(&ds.samples[n..])?;
    Ok(ClassifierSummary {
        train_accuracy: classifier::accuracy(&params, &train)?,
        heldout_accuracy: if held.is_empty() { None } else { Some(classifier::accuracy(&params, &held)?) },
    })
}

/// Configured method with the id used in output files.
pub struct Method {
    pub id: String,
    pub recon: Box<dyn Reconstructor>,
}

/// Builds the configured methods; unrolled GD needs `unrolled.ctb`.
pub fn build_methods(cfg: &ExperimentConfig, op: &Arc<RadonOperator>) -> Result<Vec<Method>> {
    cfg.methods
        .iter()
        .map(|m| {
            let recon: Box<dyn Reconstructor> = match m.kind {
                MethodKind::Fbp => Box::new(Fbp::new(Arc::clone(op), m.fbp.clone())?),
                MethodKind::Tv => Box::new(Tv::new(Arc::clone(op), m.fbp.clone(), m.tv.clone())?),
                MethodKind::UnrolledGd => {
                    let path = out_path(cfg, UNROLLED_FILE);
                    if !path.exists() {
                        return Err(Error::Missing(format!(
                            "missing trained params for {}: {} not found, run `train-unrolled` first",
                            m.id,
                            path.display()
                        )));
                    }
                    Box::new(UnrolledGd::new(Arc::clone(op), m.fbp.clone(), load_params(&path)?)?)
                }
            };
            Ok(Method { id: m.id.clone(), recon })
        })
        .collect()
}

fn load_trained_classifier(cfg: &ExperimentConfig) -> Result<ClassifierParams> {
    let path = out_path(cfg, CLASSIFIER_FILE);
    if !path.exists() {
        return Err(Error::Missing(format!(
            "missing trained classifier: {} not found, run `train-classifier` first",
            path.display()
        )));
    }
    load_classifier(&path)
}

/// Seed of sample `index` within a campaign.
fn sample_config(base: &AttackConfig, eps: f64, index: usize) -> AttackConfig {
    AttackConfig {
        epsilon_fraction: eps,
        seed: base.seed ^ ((index as u64) << 32),
        ..base.clone()
    }
}

/// Results of one method at one radius, samples in index order.
struct Block {
    method: String,
    eps: f64,
    samples: Vec<usize>,
    results: Vec<AttackResult>,
}

impl Block {
    fn rows(&self) -> Vec<MetricsRow> {
        self.results
            .iter()
            .map(|r| MetricsRow { method: self.method.clone(), ..r.metrics_row.clone() })
            .collect()
    }

    fn records(&self) -> Vec<LipschitzRecord> {
        self.results.iter().flat_map(|r| r.records.iter().copied()).collect()
    }
}

fn instances(samples: &[Sample]) -> Vec<Instance<'_>> {
    samples.iter().map(|s| Instance { sinogram: &s.noisy, ground_truth: &s.image }).collect()
}

#[derive(Serialize, Deserialize)]
struct DeltaEntry {
    method: String,
    eps: f64,
    /// `None` for a universal perturbation.
    sample: Option<usize>,
    radius: f64,
    blob: BlobRef,
}

#[derive(Serialize, Deserialize)]
struct DeltaIndex {
    format: String,
    blobs: String,
    entries: Vec<DeltaEntry>,
}

/// Cached perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDelta {
    pub method: String,
    pub eps: f64,
    pub sample: Option<usize>,
    /// Absolute L-infinity radius the perturbation was projected onto.
    pub radius: f64,
    pub delta: Tensor,
}

fn write_deltas(path: &Path, deltas: &[StoredDelta]) -> Result<()> {
    let arrays: Vec<(String, &Tensor)> = deltas
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("{}/{}/{i}", d.method, d.eps), &d.delta))
        .collect();
    let refs = ctb::write_arrays(path, &arrays)?;
    let index = DeltaIndex {
        format: "CTB1".into(),
        blobs: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        entries: deltas
            .iter()
            .zip(refs)
            .map(|(d, blob)| DeltaEntry { method: d.method.clone(), eps: d.eps, sample: d.sample, radius: d.radius, blob })
            .collect(),
    };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(())
}

/// Reads the perturbations cached by an attack campaign of `mode`.
pub fn read_deltas(dir: &Path, mode: AttackMode) -> Result<Vec<StoredDelta>> {
    let path = dir.join(deltas_file(mode));
    let index_path = path.with_extension("json");
    if !index_path.exists() {
        return Err(Error::Missing(format!(
            "missing source cache {}: run `attack --mode {}` first",
            index_path.display(),
            mode.name()
        )));
    }
    let index: DeltaIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
    let refs: Vec<BlobRef> = index.entries.iter().map(|e| e.blob.clone()).collect();
    let arrays = ctb::read_arrays(&path, &refs)?;
    Ok(index
        .entries
        .into_iter()
        .zip(arrays)
        .map(|(e, delta)| StoredDelta { method: e.method, eps: e.eps, sample: e.sample, radius: e.radius, delta })
        .collect())
}

fn dump_images(dir: &Path, samples: &[Sample], blocks: &[Block], limit: usize) -> Result<()> {
    let shown: Vec<usize> = blocks.first().map(|b| b.samples.iter().copied().take(limit).collect()).unwrap_or_default();
    if shown.is_empty() {
        return Ok(());
    }
    for &i in &shown {
        pgm::write_pgm(&dir.join(format!("ground_truth_s{i}.pgm")), &samples[i].image)?;
    }
    let mut methods: Vec<&str> = blocks.iter().map(|b| b.method.as_str()).collect();
    methods.dedup();
    for method in methods {
        let mine: Vec<&Block> = blocks.iter().filter(|b| b.method == method).collect();
        let clean: Vec<&Tensor> = mine[0].results.iter().take(shown.len()).map(|r| &r.recon_clean).collect();
        let mut grid = vec![clean.clone()];
        for (&i, img) in shown.iter().zip(&clean) {
            pgm::write_pgm(&dir.join(method).join(format!("clean_s{i}.pgm")), img)?;
        }
        for b in &mine {
            let adv: Vec<&Tensor> = b.results.iter().take(shown.len()).map(|r| &r.recon_adv).collect();
            for (&i, img) in shown.iter().zip(&adv) {
                pgm::write_pgm(&dir.join(method).join(format!("eps{}_s{i}.pgm", b.eps)), img)?;
            }
            grid.push(adv);
        }
        // rows: clean, then one per radius; columns: samples
        pgm::write_pgm(&dir.join(format!("{method}.pgm")), &pgm::montage(&grid, 2)?)?;
    }
    Ok(())
}

fn write_campaign(cfg: &ExperimentConfig, stem: &str, blocks: &[Block]) -> Result<Vec<SummaryRow>> {
    let rows: Vec<MetricsRow> = blocks.iter().flat_map(Block::rows).collect();
    write_rows(fs::File::create(out_path(cfg, &metrics_file(stem)))?, &rows)?;
    let summary: Vec<SummaryRow> = blocks
        .iter()
        .map(|b| SummaryRow::aggregate(&b.method, b.eps, &b.rows(), &b.records()))
        .collect::<Result<_>>()?;
    write_summary(fs::File::create(out_path(cfg, &summary_file(stem)))?, &summary)?;
    Ok(summary)
}

/// Runs one attack campaign over every configured method and radius and
/// writes per-sample rows, per-(method, radius) means, cached perturbations
/// and PGM dumps. Returns the means.
pub fn cmd_attack(cfg: &ExperimentConfig, mode: AttackMode) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let op = operator(cfg)?;
    let methods = build_methods(cfg, &op)?;
    let base = cfg.attacks.config(mode).clone();
    let image_dir = cfg.output_dir.join("images").join(mode.name());
    let limit = cfg.attacks.dump_images;
    match mode {
        AttackMode::Untargeted => {
            let ds = load_checked(cfg, DATASET_FILE)?;
            let inst = instances(&ds.samples);
            let mut blocks = Vec::new();
            for m in &methods {
                for &eps in &cfg.attacks.epsilons {
                    let results = inst
                        .par_iter()
                        .enumerate()
                        .map(|(i, x)| attack_untargeted(&*m.recon, x, &sample_config(&base, eps, i)))
                        .collect::<Result<Vec<_>>>()?;
                    blocks.push(Block { method: m.id.clone(), eps, samples: (0..inst.len()).collect(), results });
                }
            }
            store_sample_deltas(cfg, mode, &blocks)?;
            dump_images(&image_dir, &ds.samples, &blocks, limit)?;
            write_campaign(cfg, mode.name(), &blocks)
        }
        AttackMode::Localized => {
            let ds = load_checked(cfg, LESIONS_FILE)?;
            let clf = load_trained_classifier(cfg)?;
            let start = cfg.classifier.train_count.min(ds.len());
            let attacked = &ds.samples[start..];
            if attacked.is_empty() {
                return Err(Error::invalid("no lesion phantoms left for localized attacks after train_count"));
            }
            let regions: Vec<_> = attacked
                .iter()
                .map(|s| s.region().ok_or_else(|| Error::invalid("lesion sample without a region")))
                .collect::<Result<_>>()?;
            let inst = instances(attacked);
            let mut blocks = Vec::new();
            for m in &methods {
                for &eps in &cfg.attacks.epsilons {
                    let results = inst
                        .par_iter()
                        .zip(&regions)
                        .enumerate()
                        .map(|(i, (x, region))| {
                            let target = LocalTarget { classifier: &clf, region: *region, mask: None };
                            attack_localized(&*m.recon, x, &target, &sample_config(&base, eps, start + i))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    blocks.push(Block { method: m.id.clone(), eps, samples: (start..ds.len()).collect(), results });
                }
            }
            store_sample_deltas(cfg, mode, &blocks)?;
            // dump_images indexes samples by their dataset index
            dump_images(&image_dir, &ds.samples, &blocks, limit)?;
            write_campaign(cfg, mode.name(), &blocks)
        }
        AttackMode::Universal => {
            let ds = load_checked(cfg, DATASET_FILE)?;
            let fit = cfg.attacks.universal_fit;
            if fit == 0 || fit > ds.len() {
                return Err(Error::invalid(format!("universal_fit {fit} outside 1..={}", ds.len())));
            }
            let inst = instances(&ds.samples);
            let (fit_inst, hold_inst) = inst.split_at(fit);
            let mut fit_blocks = Vec::new();
            let mut hold_blocks = Vec::new();
            let mut stored = Vec::new();
            for m in &methods {
                for &eps in &cfg.attacks.epsilons {
                    let acfg = AttackConfig { epsilon_fraction: eps, ..base.clone() };
                    let uni = attack_universal(&*m.recon, fit_inst, &acfg)?;
                    let eval = |set: &[Instance]| -> Result<Vec<AttackResult>> {
                        set.par_iter()
                            .map(|x| Ok(uni.evaluate(&*m.recon, std::slice::from_ref(x), eps)?.remove(0)))
                            .collect()
                    };
                    fit_blocks.push(Block { method: m.id.clone(), eps, samples: (0..fit).collect(), results: eval(fit_inst)? });
                    hold_blocks.push(Block { method: m.id.clone(), eps, samples: (fit..ds.len()).collect(), results: eval(hold_inst)? });
                    stored.push(StoredDelta { method: m.id.clone(), eps, sample: None, radius: uni.epsilon, delta: uni.delta });
                }
            }
            write_deltas(&out_path(cfg, &deltas_file(mode)), &stored)?;
            dump_images(&image_dir, &ds.samples, &fit_blocks, limit)?;
            if !hold_inst.is_empty() {
                write_campaign(cfg, UNIVERSAL_HOLDOUT, &hold_blocks)?;
            }
            write_campaign(cfg, mode.name(), &fit_blocks)
        }
    }
}

fn store_sample_deltas(cfg: &ExperimentConfig, mode: AttackMode, blocks: &[Block]) -> Result<()> {
    let stored: Vec<StoredDelta> = blocks
        .iter()
        .flat_map(|b| {
            b.samples.iter().zip(&b.results).map(|(&i, r)| StoredDelta {
                method: b.method.clone(),
                eps: b.eps,
                sample: Some(i),
                radius: r.epsilon,
                delta: r.delta.clone(),
            })
        })
        .collect();
    write_deltas(&out_path(cfg, &deltas_file(mode)), &stored)
}

/// Applies the cached untargeted perturbations at `transfer_epsilon` of each
/// source method to every configured target. The first row block is a
/// zero-perturbation `clean` source.
pub fn cmd_transfer(cfg: &ExperimentConfig) -> Result<Vec<TransferCell>> {
    cfg.validate()?;
    let eps = cfg.attacks.transfer_epsilon;
    let cache = read_deltas(&cfg.output_dir, AttackMode::Untargeted)?;
    let at_eps: Vec<&StoredDelta> = cache.iter().filter(|d| d.eps == eps && d.sample.is_some()).collect();
    if at_eps.is_empty() {
        return Err(Error::Missing(format!("missing source cache: no untargeted perturbations at eps {eps}")));
    }
    let mut sources: Vec<&str> = Vec::new();
    for d in &at_eps {
        if !sources.contains(&d.method.as_str()) {
            sources.push(&d.method);
        }
    }
    let op = operator(cfg)?;
    let methods = build_methods(cfg, &op)?;
    let ds = load_checked(cfg, DATASET_FILE)?;
    let zero = Tensor::zeros(&cfg.geometry.sinogram_shape());

    let mut cells = Vec::new();
    for source in std::iter::once("clean").chain(sources.iter().copied()) {
        let pairs: Vec<(usize, &Tensor)> = if source == "clean" {
            // the samples of the first source, so the clean row is comparable
            at_eps.iter().filter(|d| d.method == sources[0]).map(|d| (d.sample.unwrap(), &zero)).collect()
        } else {
            at_eps.iter().filter(|d| d.method == source).map(|d| (d.sample.unwrap(), &d.delta)).collect()
        };
        if let Some((i, _)) = pairs.iter().find(|(i, _)| *i >= ds.len()) {
            return Err(Error::invalid(format!("cached perturbation for sample {i} beyond the dataset")));
        }
        for target in &methods {
            let rows = pairs
                .par_iter()
                .map(|&(i, delta)| {
                    let s = &ds.samples[i];
                    transfer_delta(delta, eps, &*target.recon, &Instance { sinogram: &s.noisy, ground_truth: &s.image })
                })
                .collect::<Result<Vec<_>>>()?;
            let n = rows.len() as f64;
            cells.push(TransferCell {
                source: source.to_string(),
                target: target.id.clone(),
                eps,
                samples: rows.len(),
                psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
                is_self: source == target.id,
            });
        }
    }
    report::write_transfer(fs::File::create(out_path(cfg, TRANSFER_FILE))?, &cells)?;
    Ok(cells)
}

#[cfg(test)]
mod tests;
