//! Measurement-domain attacks: projected gradient ascent with Adam on a
//! sinogram perturbation inside an L-infinity ball.
//!
//! - untargeted: maximize `|N(f + delta) - N(f)|`
//! - localized: flip the classifier label on a cropped region, with a
//!   perturbation confined to the region's sinogram mask
//! - universal: one `delta` maximizing the summed error over a dataset

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::classifier::{self, crop_operator, ClassifierParams};
use crate::error::{Error, Result};
use crate::metrics::{region_psnr, Evaluation, MetricsRow, IMAGE_RANGE};
use crate::radon::{Geometry, Region};
use crate::recon::Reconstructor;

pub use crate::optim::AdamState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Untargeted,
    Universal,
    Localized,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Universal => "universal",
            AttackMode::Localized => "localized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Radius as a fraction of the clean sinogram's intensity range.
    pub epsilon_fraction: f64,
    pub steps: usize,
    /// Adam learning rate.
    pub step_size: f64,
    pub restarts: usize,
    pub mode: AttackMode,
    /// Localized only: stop a restart as soon as the hard label flips.
    pub early_stop_on_flip: bool,
    /// Localized only: Gaussian blur (pixels) of the region before projecting it.
    pub mask_sigma: f64,
    /// Keep `f + delta >= 0` where the ball allows it. Off by default.
    pub clip_nonnegative: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon_fraction: 0.025,
            steps: 20,
            step_size: 1e-3,
            restarts: 5,
            mode: AttackMode::Untargeted,
            early_stop_on_flip: true,
            mask_sigma: 2.0,
            clip_nonnegative: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_fraction >= 0.0 && self.epsilon_fraction.is_finite()) {
            return Err(Error::invalid(format!("epsilon fraction {} must be non-negative", self.epsilon_fraction)));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::invalid("attack steps and restarts must be at least 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("attack step size must be positive"));
        }
        Ok(())
    }

    fn restart_rng(&self, restart: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(restart as u64 + 1)))
    }
}

/// One measurement with its ground truth.
#[derive(Clone, Copy, Debug)]
pub struct Instance<'a> {
    pub sinogram: &'a Tensor,
    pub ground_truth: &'a Tensor,
}

/// `(|N(f + delta) - N(f)|, |delta|)` of one final iterate.
pub type LipschitzRecord = (f64, f64);

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub geometry: Geometry,
    pub epsilon: f64,
    pub delta: Tensor,
    pub recon_clean: Tensor,
    pub recon_adv: Tensor,
    /// Objective before each step and after the last one, for the selected restart.
    pub objective_trace: Vec<f64>,
    pub restart_index_selected: usize,
    /// Localized only.
    pub success: Option<bool>,
    /// One record per restart.
    pub records: Vec<LipschitzRecord>,
    pub metrics_row: MetricsRow,
}

impl AttackResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("non-empty trace")
    }
}

fn uniform(shape: &[usize], eps: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = if eps > 0.0 { (0..n).map(|_| rng.gen_range(-eps..=eps)).collect() } else { vec![0.0; n] };
    Tensor::new(shape.to_vec(), data).expect("finite")
}

/// Elementwise lower bound `min(-f_i, eps)` on `delta` for `clip_nonnegative`,
/// over all given sinograms.
fn nonnegative_floor(cfg: &AttackConfig, sinograms: &[&Tensor], eps: f64) -> Option<Vec<f64>> {
    cfg.clip_nonnegative.then(|| {
        let mut floor = vec![f64::NEG_INFINITY; sinograms[0].len()];
        for f in sinograms {
            floor.iter_mut().zip(f.data()).for_each(|(b, v)| *b = b.max(-v));
        }
        floor.into_iter().map(|b| b.min(eps)).collect()
    })
}

/// Ascends by `update`, clips to `[-eps, eps]` (and the optional floor) and
/// applies the mask; these are the last operations, so the constraint holds exactly.
fn project(delta: &mut Tensor, update: &[f64], eps: f64, floor: Option<&[f64]>, mask: Option<&Tensor>) {
    let d = delta.data_mut();
    for (i, v) in d.iter_mut().enumerate() {
        *v = (*v + update[i]).clamp(-eps, eps);
        if let Some(b) = floor {
            *v = v.max(b[i]);
        }
    }
    if let Some(m) = mask {
        d.iter_mut().zip(m.data()).for_each(|(v, w)| *v *= w);
    }
}

/// Objective `|N(f + delta) - u_clean|` and its gradient in `delta`.
fn untargeted_grad(method: &dyn Reconstructor, f: &Tensor, u_clean: &Tensor, delta: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let fid = tape.constant(f.clone())?;
    let did = tape.leaf(delta.clone())?;
    let x = tape.add(fid, did)?;
    let u = method.record(&mut tape, x)?;
    let uc = tape.constant(u_clean.clone())?;
    let diff = tape.sub(u, uc)?;
    let obj = tape.norm(diff)?;
    let mut grads = tape.backward(obj)?;
    Ok((tape.value(obj)?.data()[0], grads.take(did).expect("leaf gradient"), tape.value(u)?.clone()))
}

fn check_instance(method: &dyn Reconstructor, inst: &Instance) -> Result<()> {
    let g = method.operator().geometry();
    inst.sinogram.ensure_shape("attacked sinogram", &g.sinogram_shape())?;
    inst.ground_truth.ensure_shape("ground truth", &g.image_shape())
}

struct Run {
    delta: Tensor,
    recon: Tensor,
    trace: Vec<f64>,
    success: Option<bool>,
}

fn record_of(run: &Run, u_clean: &Tensor) -> Result<LipschitzRecord> {
    Ok((run.recon.sub(u_clean)?.norm(), run.delta.norm()))
}

/// Untargeted attack: maximizes `|N(f + delta) - N(f)|` over `|delta|_inf <= eps`
/// with `eps = epsilon_fraction * (max f - min f)`. Returns the restart with
/// the largest final objective.
pub fn attack_untargeted(method: &dyn Reconstructor, inst: &Instance, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_instance(method, inst)?;
    let f = inst.sinogram;
    let eps = cfg.epsilon_fraction * f.range();
    let u_clean = method.reconstruct(f)?;
    let floor = nonnegative_floor(cfg, &[f], eps);
    let runs = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = cfg.restart_rng(r);
            let mut delta = uniform(f.shape(), eps, &mut rng);
            if floor.is_some() {
                project(&mut delta, &vec![0.0; f.len()], eps, floor.as_deref(), None);
            }
            let mut adam = AdamState::new(delta.len(), cfg.step_size);
            let mut trace = Vec::with_capacity(cfg.steps + 1);
            for _ in 0..cfg.steps {
                let (obj, g, _) = untargeted_grad(method, f, &u_clean, &delta)?;
                trace.push(obj);
                let update = adam.step(g.data())?;
                project(&mut delta, &update, eps, floor.as_deref(), None);
            }
            let recon = method.reconstruct(&f.add(&delta)?)?;
            trace.push(recon.sub(&u_clean)?.norm());
            Ok(Run { delta, recon, trace, success: None })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_max(&runs);
    finish(method, inst, cfg, eps, u_clean, runs, best)
}

fn select_max(runs: &[Run]) -> usize {
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.trace.last() > runs[best].trace.last() {
            best = i;
        }
    }
    best
}

fn finish(
    method: &dyn Reconstructor,
    inst: &Instance,
    cfg: &AttackConfig,
    eps: f64,
    u_clean: Tensor,
    runs: Vec<Run>,
    best: usize,
) -> Result<AttackResult> {
    let records = runs.iter().map(|r| record_of(r, &u_clean)).collect::<Result<Vec<_>>>()?;
    let run = runs.into_iter().nth(best).expect("selected restart");
    let row = Evaluation {
        op: method.operator(),
        ground_truth: inst.ground_truth,
        sinogram: inst.sinogram,
        recon_clean: &u_clean,
        delta: &run.delta,
        recon_adv: &run.recon,
    }
    .row(method.name(), cfg.epsilon_fraction)?;
    Ok(AttackResult {
        geometry: method.operator().geometry().clone(),
        epsilon: eps,
        delta: run.delta,
        recon_clean: u_clean,
        recon_adv: run.recon,
        objective_trace: run.trace,
        restart_index_selected: best,
        success: run.success,
        records,
        metrics_row: row,
    })
}

/// Classifier and lesion region for the localized attack.
#[derive(Clone, Copy, Debug)]
pub struct LocalTarget<'a> {
    pub classifier: &'a ClassifierParams,
    pub region: Region,
    /// Sinogram mask of the region; `None` builds it from `mask_sigma`.
    pub mask: Option<&'a Tensor>,
}

/// Localized attack: maximizes the cross-entropy of the classifier on the
/// cropped reconstruction against the label of the clean reconstruction.
/// After every Adam step `delta` is clipped to the ball and multiplied by the
/// mask. A restart succeeds when the hard label flips; successful restarts
/// are preferred, then the larger objective.
pub fn attack_localized(
    method: &dyn Reconstructor,
    inst: &Instance,
    target: &LocalTarget,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_instance(method, inst)?;
    let op = method.operator();
    let side = target.classifier.side;
    if target.region.height != side || target.region.width != side {
        return Err(Error::invalid(format!(
            "region {:?} does not match the {side}x{side} classifier input",
            target.region
        )));
    }
    let built;
    let mask = match target.mask {
        Some(m) => {
            m.ensure_shape("localized mask", &op.geometry().sinogram_shape())?;
            m
        }
        None => {
            built = op.sinogram_mask(&target.region, cfg.mask_sigma)?;
            &built
        }
    };
    let crop = crop_operator(op.geometry().image_shape(), &target.region)?;
    let f = inst.sinogram;
    let eps = cfg.epsilon_fraction * f.range();
    let u_clean = method.reconstruct(f)?;
    let clf = target.classifier;
    let label = classifier::predict(clf, &classifier::crop_region(&u_clean, &target.region)?)?;
    let y = if label { 1.0 } else { 0.0 };

    // (objective, probability, gradient, reconstruction) at delta
    let evaluate = |delta: &Tensor| -> Result<(f64, f64, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let fid = tape.constant(f.clone())?;
        let did = tape.leaf(delta.clone())?;
        let x = tape.add(fid, did)?;
        let u = method.record(&mut tape, x)?;
        let patch = tape.matvec(&crop, u)?;
        let nodes = clf.constants(&mut tape)?;
        let p = classifier::record_probability(&mut tape, clf, &nodes, patch)?;
        let loss = tape.binary_cross_entropy(p, y)?;
        let mut grads = tape.backward(loss)?;
        Ok((
            tape.value(loss)?.data()[0],
            tape.value(p)?.data()[0],
            grads.take(did).expect("leaf gradient"),
            tape.value(u)?.clone(),
        ))
    };
    let flipped = |p: f64| (p >= 0.5) != label;
    let floor = nonnegative_floor(cfg, &[f], eps);

    let runs = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = cfg.restart_rng(r);
            let mut delta = uniform(f.shape(), eps, &mut rng);
            project(&mut delta, &vec![0.0; f.len()], eps, floor.as_deref(), Some(mask));
            let mut adam = AdamState::new(delta.len(), cfg.step_size);
            let mut trace = Vec::with_capacity(cfg.steps + 1);
            for _ in 0..cfg.steps {
                let (obj, p, g, _) = evaluate(&delta)?;
                trace.push(obj);
                if flipped(p) && cfg.early_stop_on_flip {
                    break;
                }
                let update = adam.step(g.data())?;
                project(&mut delta, &update, eps, floor.as_deref(), Some(mask));
            }
            let recon = method.reconstruct(&f.add(&delta)?)?;
            let patch = classifier::crop_region(&recon, &target.region)?;
            let p = classifier::classify(clf, &patch)?;
            let pc = p.clamp(1e-12, 1.0 - 1e-12);
            trace.push(-(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()));
            Ok(Run { delta, recon, trace, success: Some(flipped(p)) })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        let key = |r: &Run| (r.success == Some(true), *r.trace.last().expect("trace"));
        let (a, b) = (key(r), key(&runs[best]));
        if a.0 && !b.0 || (a.0 == b.0 && a.1 > b.1) {
            best = i;
        }
    }
    let mut result = finish(method, inst, cfg, eps, u_clean, runs, best)?;
    let (inner, outer) = region_psnr(inst.ground_truth, &result.recon_adv, &target.region, IMAGE_RANGE)?;
    result.metrics_row.psnr_int = Some(inner);
    result.metrics_row.psnr_ext = Some(outer);
    result.metrics_row.success = result.success;
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct UniversalResult {
    pub epsilon: f64,
    pub delta: Tensor,
    /// Summed objective per epoch for the selected restart, plus the final value.
    pub objective_trace: Vec<f64>,
    pub restart_index_selected: usize,
}

impl UniversalResult {
    /// Applies the shared perturbation to each instance and scores it.
    pub fn evaluate(&self, method: &dyn Reconstructor, instances: &[Instance], epsilon_fraction: f64) -> Result<Vec<AttackResult>> {
        instances
            .iter()
            .map(|inst| {
                check_instance(method, inst)?;
                let u_clean = method.reconstruct(inst.sinogram)?;
                let recon = method.reconstruct(&inst.sinogram.add(&self.delta)?)?;
                let run = Run { delta: self.delta.clone(), recon, trace: vec![f64::NAN], success: None };
                let cfg = AttackConfig { epsilon_fraction, ..AttackConfig::default() };
                let mut res = finish(method, inst, &cfg, self.epsilon, u_clean, vec![run], 0)?;
                res.objective_trace = vec![res.records[0].0];
                Ok(res)
            })
            .collect()
    }
}

/// Universal attack: one `delta` maximizing `sum_i |N(f_i + delta) - N(f_i)|`,
/// with full-batch gradients summed in sample order. The radius is
/// `epsilon_fraction` times the mean intensity range of the sinograms.
/// `cfg.steps` counts epochs.
pub fn attack_universal(method: &dyn Reconstructor, instances: &[Instance], cfg: &AttackConfig) -> Result<UniversalResult> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::invalid("universal attack needs at least one sinogram"));
    }
    for inst in instances {
        check_instance(method, inst)?;
    }
    let shape = instances[0].sinogram.shape().to_vec();
    let eps = cfg.epsilon_fraction * instances.iter().map(|i| i.sinogram.range()).sum::<f64>() / instances.len() as f64;
    let clean = instances
        .par_iter()
        .map(|i| method.reconstruct(i.sinogram))
        .collect::<Result<Vec<_>>>()?;
    let summed = |delta: &Tensor| -> Result<(f64, Tensor)> {
        let parts = (0..instances.len())
            .into_par_iter()
            .map(|i| untargeted_grad(method, instances[i].sinogram, &clean[i], delta))
            .collect::<Result<Vec<_>>>()?;
        let mut obj = 0.0;
        let mut grad = Tensor::zeros(&shape);
        for (o, g, _) in parts {
            obj += o;
            grad = grad.add(&g)?;
        }
        Ok((obj, grad))
    };
    let sinograms: Vec<&Tensor> = instances.iter().map(|i| i.sinogram).collect();
    let floor = nonnegative_floor(cfg, &sinograms, eps);
    let mut best: Option<(usize, Tensor, Vec<f64>)> = None;
    for r in 0..cfg.restarts {
        let mut rng = cfg.restart_rng(r);
        let mut delta = uniform(&shape, eps, &mut rng);
        if floor.is_some() {
            project(&mut delta, &vec![0.0; shape.iter().product()], eps, floor.as_deref(), None);
        }
        let mut adam = AdamState::new(delta.len(), cfg.step_size);
        let mut trace = Vec::with_capacity(cfg.steps + 1);
        for _ in 0..cfg.steps {
            let (obj, g) = summed(&delta)?;
            trace.push(obj);
            let update = adam.step(g.data())?;
            project(&mut delta, &update, eps, floor.as_deref(), None);
        }
        let mut final_obj = 0.0;
        for (inst, u) in instances.iter().zip(&clean) {
            final_obj += method.reconstruct(&inst.sinogram.add(&delta)?)?.sub(u)?.norm();
        }
        trace.push(final_obj);
        if best.as_ref().map_or(true, |b| final_obj > *b.2.last().expect("trace")) {
            best = Some((r, delta, trace));
        }
    }
    let (restart_index_selected, delta, objective_trace) = best.expect("at least one restart");
    Ok(UniversalResult { epsilon: eps, delta, objective_trace, restart_index_selected })
}

/// Scores `target` on the source's perturbed measurement without re-optimizing.
pub fn apply_transfer(source: &AttackResult, target: &dyn Reconstructor, inst: &Instance) -> Result<MetricsRow> {
    if target.operator().geometry() != &source.geometry {
        return Err(Error::invalid("transfer between different geometries"));
    }
    transfer_delta(&source.delta, source.metrics_row.eps, target, inst)
}

/// Scores `target` on `f + delta`; `eps` is only copied into the row.
pub fn transfer_delta(delta: &Tensor, eps: f64, target: &dyn Reconstructor, inst: &Instance) -> Result<MetricsRow> {
    check_instance(target, inst)?;
    delta.ensure_shape("transferred perturbation", inst.sinogram.shape())?;
    let u_clean = target.reconstruct(inst.sinogram)?;
    let recon = target.reconstruct(&inst.sinogram.add(delta)?)?;
    Evaluation {
        op: target.operator(),
        ground_truth: inst.ground_truth,
        sinogram: inst.sinogram,
        recon_clean: &u_clean,
        delta,
        recon_adv: &recon,
    }
    .row(target.name(), eps)
}

#[cfg(test)]
mod tests;
