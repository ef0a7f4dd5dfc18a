use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fbp::{Fbp, FbpConfig};
use super::tv::{default_step, record_step, step, Coef};
use super::Reconstructor;
use crate::autodiff::ops::sigmoid;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::phantom::ctb::{self, BlobRef};
use crate::radon::RadonOperator;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Per-iteration step sizes `tau_k`, TV weights `lambda_k` and optional 3x3
/// image kernels (shape `[1, 1, 3, 3]`).
#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledGdParams {
    pub step_sizes: Vec<f64>,
    pub tv_weights: Vec<f64>,
    pub kernels: Option<Vec<Tensor>>,
    pub smoothing: f64,
    pub training: Option<TrainingInfo>,
}

impl UnrolledGdParams {
    /// `iterations` copies of the same `tau` and `lambda`, zero kernels if requested.
    pub fn constant(iterations: usize, tau: f64, lambda: f64, smoothing: f64, kernels: bool) -> Self {
        Self {
            step_sizes: vec![tau; iterations],
            tv_weights: vec![lambda; iterations],
            kernels: kernels.then(|| vec![Tensor::zeros(&[1, 1, 3, 3]); iterations]),
            smoothing,
            training: None,
        }
    }

    pub fn iterations(&self) -> usize {
        self.step_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.step_sizes.len();
        if self.tv_weights.len() != k {
            return Err(Error::invalid("step sizes and tv weights differ in length"));
        }
        if !self.step_sizes.iter().chain(&self.tv_weights).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("unrolled parameters".into()));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::invalid("smoothing must be positive"));
        }
        if let Some(ks) = &self.kernels {
            if ks.len() != k {
                return Err(Error::invalid("one kernel per iteration required"));
            }
            for kernel in ks {
                kernel.ensure_shape("unrolled kernel", &[1, 1, 3, 3])?;
                if !kernel.all_finite() {
                    return Err(Error::NonFinite("unrolled kernel".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UnrolledGd {
    fbp: Fbp,
    params: UnrolledGdParams,
}

impl UnrolledGd {
    pub fn new(op: Arc<RadonOperator>, fbp: FbpConfig, params: UnrolledGdParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            fbp: Fbp::new(op, fbp)?,
            params,
        })
    }

    pub fn params(&self) -> &UnrolledGdParams {
        &self.params
    }
}

impl Reconstructor for UnrolledGd {
    fn name(&self) -> &str {
        "unrolled_gd"
    }

    fn operator(&self) -> &RadonOperator {
        self.fbp.operator()
    }

    fn reconstruct(&self, f: &Tensor) -> Result<Tensor> {
        let op = self.fbp.operator();
        let p = &self.params;
        let mut u = self.fbp.reconstruct(f)?;
        for k in 0..p.iterations() {
            let kernel = p.kernels.as_ref().map(|ks| &ks[k]);
            u = step(op, &u, f, p.step_sizes[k], p.tv_weights[k], p.smoothing, kernel)?;
        }
        Ok(u)
    }

    fn record(&self, tape: &mut Tape, f: NodeId) -> Result<NodeId> {
        let op = Arc::clone(self.fbp.operator());
        let p = &self.params;
        let mut u = self.fbp.record(tape, f)?;
        for k in 0..p.iterations() {
            let kernel = match &p.kernels {
                Some(ks) => Some(tape.constant(ks[k].clone())?),
                None => None,
            };
            u = record_step(
                tape,
                &op,
                u,
                f,
                Coef::Fixed(p.step_sizes[k]),
                Coef::Fixed(p.tv_weights[k]),
                p.smoothing,
                kernel,
            )?;
        }
        Ok(u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Kernels are parameterized as `kernel_scale * c` with `c` trained.
    pub kernels: bool,
    pub kernel_scale: f64,
    /// Initial `lambda_k`; `tau_k` starts at the default TV step.
    pub tv_weight: f64,
    pub smoothing: f64,
    /// Minibatch size; `None` trains on the full set each epoch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            epochs: 200,
            learning_rate: 0.1,
            kernels: true,
            kernel_scale: 0.05,
            tv_weight: 3e-3,
            smoothing: 1e-2,
            batch_size: None,
            seed: 0,
        }
    }
}

struct Trainable {
    k: usize,
    tau0: f64,
    lambda0: f64,
    kernel_scale: f64,
    kernels: bool,
    smoothing: f64,
}

impl Trainable {
    fn len(&self) -> usize {
        2 * self.k + if self.kernels { 9 * self.k } else { 0 }
    }

    fn params(&self, theta: &[f64]) -> UnrolledGdParams {
        let k = self.k;
        UnrolledGdParams {
            step_sizes: theta[..k].iter().map(|&a| 2.0 * self.tau0 * sigmoid(a)).collect(),
            tv_weights: theta[k..2 * k].iter().map(|b| self.lambda0 * b).collect(),
            kernels: self.kernels.then(|| {
                theta[2 * k..]
                    .chunks(9)
                    .map(|c| Tensor::raw(vec![1, 1, 3, 3], c.iter().map(|v| self.kernel_scale * v).collect()))
                    .collect()
            }),
            smoothing: self.smoothing,
            training: None,
        }
    }

    /// Squared error of one sample and its gradient with respect to `theta`.
    fn loss_and_grad(&self, fbp: &Fbp, theta: &[f64], f: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
        let op = fbp.operator();
        let k = self.k;
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = theta[..2 * k]
            .iter()
            .map(|&v| tape.leaf(Tensor::scalar(v)))
            .collect::<Result<_>>()?;
        let kernel_leaves: Vec<NodeId> = if self.kernels {
            theta[2 * k..]
                .chunks(9)
                .map(|c| tape.leaf(Tensor::raw(vec![1, 1, 3, 3], c.to_vec())))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let fid = tape.constant(f.clone())?;
        let gt = tape.constant(target.clone())?;
        let mut u = fbp.record(&mut tape, fid)?;
        for i in 0..k {
            let gate = tape.sigmoid(leaves[i])?;
            let tau = tape.scale(gate, 2.0 * self.tau0)?;
            let lambda = tape.scale(leaves[k + i], self.lambda0)?;
            let kernel = match kernel_leaves.get(i) {
                Some(&c) => Some(tape.scale(c, self.kernel_scale)?),
                None => None,
            };
            u = record_step(&mut tape, op, u, fid, Coef::Node(tau), Coef::Node(lambda), self.smoothing, kernel)?;
        }
        let diff = tape.sub(u, gt)?;
        let loss = tape.squared_norm(diff)?;
        let grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(self.len());
        for id in leaves.iter().chain(&kernel_leaves) {
            g.extend_from_slice(grads.get(*id).expect("leaf gradient").data());
        }
        Ok((tape.value(loss)?.data()[0], g))
    }

    /// Mean loss and gradient over `batch`, reduced in index order.
    fn batch(&self, fbp: &Fbp, theta: &[f64], data: &[(Tensor, Tensor)], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let parts = batch
            .par_iter()
            .map(|&i| self.loss_and_grad(fbp, theta, &data[i].0, &data[i].1))
            .collect::<Vec<_>>();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.len()];
        for part in parts {
            let (l, g) = part.map_err(|e| match e {
                Error::NonFinite(msg) => Error::Divergence(msg),
                other => other,
            })?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        Ok((loss / n, grad))
    }
}

/// Fits the unrolled parameters to `(noisy sinogram, ground truth)` pairs by
/// Adam on the mean squared reconstruction error. TV weights are trained as
/// multipliers of their initial value; step sizes as `2 tau_0 sigmoid(a_k)`,
/// which keeps the data-fit step below `1.8 / sigma_max^2`.
pub fn train_unrolled(
    op: Arc<RadonOperator>,
    fbp_cfg: &FbpConfig,
    data: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
) -> Result<UnrolledGdParams> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.iterations == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("iterations and epochs must be positive"));
    }
    let fbp = Fbp::new(Arc::clone(&op), fbp_cfg.clone())?;
    let tr = Trainable {
        k: cfg.iterations,
        tau0: default_step(&op),
        lambda0: cfg.tv_weight,
        kernel_scale: cfg.kernel_scale,
        kernels: cfg.kernels,
        smoothing: cfg.smoothing,
    };
    let mut theta = vec![0.0; tr.k];
    theta.resize(2 * tr.k, 1.0);
    theta.resize(tr.len(), 0.0);
    let mut adam = AdamState::new(tr.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch_size = cfg.batch_size.unwrap_or(data.len()).clamp(1, data.len());

    let all: Vec<usize> = (0..data.len()).collect();
    let initial_loss = tr.batch(&fbp, &theta, data, &all)?.0;
    for epoch in 0..cfg.epochs {
        if batch_size < data.len() {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(batch_size) {
            let (loss, grad) = tr.batch(&fbp, &theta, data, batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("loss {loss} at epoch {epoch}")));
            }
            let update = adam.step(&grad)?;
            theta.iter_mut().zip(&update).for_each(|(t, u)| *t -= u);
        }
    }
    let final_loss = tr.batch(&fbp, &theta, data, &all)?.0;
    let mut params = tr.params(&theta);
    params.training = Some(TrainingInfo {
        seed: cfg.seed,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        initial_loss,
        final_loss,
    });
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct ParamsMeta {
    format: String,
    blobs: String,
    iterations: usize,
    kernel_size: Option<usize>,
    smoothing: f64,
    training: Option<TrainingInfo>,
    arrays: Vec<BlobRef>,
}

/// Writes CTB1 arrays to `path` and metadata to `path` with a `.json` extension.
pub fn save_params(params: &UnrolledGdParams, path: &Path) -> Result<()> {
    params.validate()?;
    let k = params.iterations();
    let tau = Tensor::vector(params.step_sizes.clone());
    let lambda = Tensor::vector(params.tv_weights.clone());
    let kernels = params.kernels.as_ref().map(|ks| {
        Tensor::raw(vec![k, 3, 3], ks.iter().flat_map(|t| t.data().iter().copied()).collect())
    });
    let mut arrays = vec![("step_sizes".to_string(), &tau), ("tv_weights".to_string(), &lambda)];
    if let Some(t) = &kernels {
        arrays.push(("kernels".to_string(), t));
    }
    let refs = ctb::write_arrays(path, &arrays)?;
    let meta = ParamsMeta {
        format: "CTB1".into(),
        blobs: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        iterations: k,
        kernel_size: kernels.as_ref().map(|_| 3),
        smoothing: params.smoothing,
        training: params.training.clone(),
        arrays: refs,
    };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<UnrolledGdParams> {
    let meta: ParamsMeta = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
    let arrays = ctb::read_arrays(path, &meta.arrays)?;
    let find = |name: &str| {
        meta.arrays
            .iter()
            .position(|r| r.name == name)
            .map(|i| arrays[i].clone())
            .ok_or_else(|| Error::Format(format!("missing array {name}")))
    };
    let kernels = match meta.kernel_size {
        Some(_) => Some(
            find("kernels")?
                .data()
                .chunks(9)
                .map(|c| Tensor::raw(vec![1, 1, 3, 3], c.to_vec()))
                .collect(),
        ),
        None => None,
    };
    let params = UnrolledGdParams {
        step_sizes: find("step_sizes")?.into_data(),
        tv_weights: find("tv_weights")?.into_data(),
        kernels,
        smoothing: meta.smoothing,
        training: meta.training,
    };
    if params.iterations() != meta.iterations {
        return Err(Error::Format("iteration count does not match metadata".into()));
    }
    params.validate()?;
    Ok(params)
}
