//! Small convolutional malignancy classifier on square lesion patches.
//!
//! Architecture: 3x3 correlation 1->4, relu, 3x3 correlation 4->8, relu,
//! spatial mean, linear to one logit, sigmoid.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Op, Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::phantom::ctb::{self, BlobRef};
use crate::radon::Region;
use crate::sparse::{CsrMatrix, LinearOp};

pub const DEFAULT_PATCH_SIDE: usize = 16;
const C1: usize = 4;
const C2: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub side: usize,
    /// `[4, 1, 3, 3]`
    pub conv1: Tensor,
    /// `[4]`
    pub bias1: Tensor,
    /// `[8, 4, 3, 3]`
    pub conv2: Tensor,
    /// `[8]`
    pub bias2: Tensor,
    /// `[8]`
    pub linear: Tensor,
    pub linear_bias: f64,
    pub training: Option<ClassifierTraining>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub seed: u64,
    pub epochs: usize,
    pub adversarial: bool,
    pub pgd_eps: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

const SHAPES: [&[usize]; 5] = [&[C1, 1, 3, 3], &[C1], &[C2, C1, 3, 3], &[C2], &[C2]];
const NAMES: [&str; 6] = ["conv1", "bias1", "conv2", "bias2", "linear", "linear_bias"];

/// Tape nodes holding one copy of the parameters.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    nodes: [NodeId; 6],
}

impl ClassifierParams {
    pub fn zeros(side: usize) -> Self {
        Self::from_flat(side, &vec![0.0; Self::num_params()]).expect("zero parameters")
    }

    /// He-normal weights, zero biases.
    pub fn init(side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(Self::num_params());
        let fan_in = [9.0, 0.0, 9.0 * C1 as f64, 0.0, C2 as f64];
        for (shape, fan) in SHAPES.iter().zip(fan_in) {
            let n: usize = shape.iter().product();
            if fan == 0.0 {
                theta.extend(std::iter::repeat(0.0).take(n));
            } else {
                let normal = Normal::new(0.0, (2.0 / fan).sqrt()).expect("valid deviation");
                theta.extend((0..n).map(|_| normal.sample(&mut rng)));
            }
        }
        theta.push(0.0);
        Self::from_flat(side, &theta).expect("initial parameters")
    }

    pub fn num_params() -> usize {
        SHAPES.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() + 1
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::num_params());
        for t in self.tensors() {
            v.extend_from_slice(t.data());
        }
        v.push(self.linear_bias);
        v
    }

    pub fn from_flat(side: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != Self::num_params() {
            return Err(Error::invalid(format!(
                "classifier needs {} parameters, got {}",
                Self::num_params(),
                theta.len()
            )));
        }
        if side < 3 {
            return Err(Error::invalid("classifier patch side must be at least 3"));
        }
        let mut rest = theta;
        let mut take = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Tensor::new(shape.to_vec(), head.to_vec())
        };
        Ok(Self {
            side,
            conv1: take(SHAPES[0])?,
            bias1: take(SHAPES[1])?,
            conv2: take(SHAPES[2])?,
            bias2: take(SHAPES[3])?,
            linear: take(SHAPES[4])?,
            linear_bias: theta[theta.len() - 1],
            training: None,
        })
    }

    fn tensors(&self) -> [&Tensor; 5] {
        [&self.conv1, &self.bias1, &self.conv2, &self.bias2, &self.linear]
    }

    fn place(&self, tape: &mut Tape, trainable: bool) -> Result<ParamNodes> {
        let mut put = |t: Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
        let [a, b, c, d, e] = self.tensors().map(Clone::clone);
        Ok(ParamNodes {
            nodes: [put(a)?, put(b)?, put(c)?, put(d)?, put(e)?, put(Tensor::scalar(self.linear_bias))?],
        })
    }

    /// Adds the parameters as constants (for gradients with respect to the input).
    pub fn constants(&self, tape: &mut Tape) -> Result<ParamNodes> {
        self.place(tape, false)
    }

    /// Adds the parameters as differentiable leaves.
    pub fn leaves(&self, tape: &mut Tape) -> Result<ParamNodes> {
        self.place(tape, true)
    }

    fn check_patch(&self, patch: &Tensor) -> Result<()> {
        patch.ensure_shape("classifier patch", &[self.side, self.side])
    }
}

/// Records the malignancy probability of a `[side, side]` patch node.
pub fn record_probability(tape: &mut Tape, params: &ClassifierParams, nodes: &ParamNodes, patch: NodeId) -> Result<NodeId> {
    params.check_patch(tape.value(patch)?)?;
    let [w1, b1, w2, b2, lin, lb] = nodes.nodes;
    let s = params.side;
    let x = tape.reshape(patch, &[1, s, s])?;
    let h = tape.correlate2d(x, w1, Some(b1))?;
    let h = tape.relu(h)?;
    let h = tape.correlate2d(h, w2, Some(b2))?;
    let h = tape.relu(h)?;
    let pooled = tape.mean_pool(h)?;
    let prod = tape.mul(lin, pooled)?;
    let logit = tape.sum(prod)?;
    let logit = tape.add(logit, lb)?;
    tape.sigmoid(logit)
}

/// Malignancy probability of a patch, in `(0, 1)`. Uses the same kernels as
/// [`record_probability`] without building a tape.
pub fn classify(params: &ClassifierParams, patch: &Tensor) -> Result<f64> {
    params.check_patch(patch)?;
    let s = params.side;
    let x = patch.clone().reshaped(&[1, s, s])?;
    let h = Op::Correlate2d.forward(&[&x, &params.conv1, &params.bias1])?;
    let h = Op::Relu.forward(&[&h])?;
    let h = Op::Correlate2d.forward(&[&h, &params.conv2, &params.bias2])?;
    let h = Op::Relu.forward(&[&h])?;
    let pooled = Op::MeanPool.forward(&[&h])?;
    let prod = Op::Mul.forward(&[&params.linear, &pooled])?;
    let logit = Op::Sum.forward(&[&prod])?;
    let logit = Op::Add.forward(&[&logit, &Tensor::scalar(params.linear_bias)])?;
    Ok(Op::Sigmoid.forward(&[&logit])?.data()[0])
}

/// Hard label: malignant iff the probability is at least 1/2.
pub fn predict(params: &ClassifierParams, patch: &Tensor) -> Result<bool> {
    Ok(classify(params, patch)? >= 0.5)
}

/// Exact copy of the pixels of `region`.
pub fn crop_region(image: &Tensor, region: &Region) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    region.check_within(h, w)?;
    let mut out = Vec::with_capacity(region.area());
    for r in region.row0..region.row0 + region.height {
        out.extend_from_slice(&image.data()[r * w + region.col0..r * w + region.col0 + region.width]);
    }
    Tensor::new(vec![region.height, region.width], out)
}

/// Writes `patch` back into `image` at `region`.
pub fn embed_region(image: &mut Tensor, patch: &Tensor, region: &Region) -> Result<()> {
    let (h, w) = image.dims2()?;
    region.check_within(h, w)?;
    patch.ensure_shape("embedded patch", &[region.height, region.width])?;
    for r in 0..region.height {
        let dst = (region.row0 + r) * w + region.col0;
        image.data_mut()[dst..dst + region.width]
            .copy_from_slice(&patch.data()[r * region.width..(r + 1) * region.width]);
    }
    Ok(())
}

/// Selection matrix of [`crop_region`], for recording crops on a tape.
pub fn crop_operator(image_shape: [usize; 2], region: &Region) -> Result<LinearOp> {
    let [h, w] = image_shape;
    region.check_within(h, w)?;
    let rows = (0..region.height)
        .flat_map(|r| (0..region.width).map(move |c| vec![(((region.row0 + r) * w + region.col0 + c) as u32, 1.0)]))
        .collect();
    LinearOp::new(CsrMatrix::from_rows(h * w, rows)?, vec![h, w], vec![region.height, region.width])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adversarial: bool,
    /// Image-space L-infinity radius of the training-time attack.
    pub pgd_eps: f64,
    pub pgd_steps: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.01,
            adversarial: false,
            pgd_eps: 0.03,
            pgd_steps: 5,
            batch_size: None,
            seed: 0,
        }
    }
}

/// Cross-entropy of one patch and its gradients: `(loss, d/dtheta, d/dpatch)`.
pub fn loss_and_gradients(params: &ClassifierParams, patch: &Tensor, target: f64) -> Result<(f64, Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let nodes = params.leaves(&mut tape)?;
    let x = tape.leaf(patch.clone())?;
    let p = record_probability(&mut tape, params, &nodes, x)?;
    let loss = tape.binary_cross_entropy(p, target)?;
    let mut grads = tape.backward(loss)?;
    let mut g = Vec::with_capacity(ClassifierParams::num_params());
    for id in nodes.nodes {
        g.extend_from_slice(grads.get(id).expect("leaf gradient").data());
    }
    let gx = grads.take(x).expect("leaf gradient");
    Ok((tape.value(loss)?.data()[0], g, gx))
}

/// Image-space PGD maximizing the cross-entropy within `|x - patch|_inf <= eps`,
/// with signed steps of `2.5 eps / steps`.
pub fn pgd_patch(params: &ClassifierParams, patch: &Tensor, target: f64, eps: f64, steps: usize) -> Result<Tensor> {
    let mut x = patch.clone();
    if eps <= 0.0 || steps == 0 {
        return Ok(x);
    }
    let alpha = 2.5 * eps / steps as f64;
    for _ in 0..steps {
        let (_, _, g) = loss_and_gradients(params, &x, target)?;
        let moved = x.zip_map(&g, |v, gi| v + alpha * gi.signum())?;
        x = moved.zip_map(patch, |v, p| v.clamp(p - eps, p + eps))?;
    }
    Ok(x)
}

/// Fraction of patches whose hard label matches.
pub fn accuracy(params: &ClassifierParams, data: &[(Tensor, bool)]) -> Result<f64> {
    let hits = data
        .iter()
        .map(|(x, y)| predict(params, x).map(|p| p == *y))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&h| h)
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

fn batch_gradient(
    params: &ClassifierParams,
    data: &[(Tensor, bool)],
    batch: &[usize],
    cfg: &ClassifierTrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let parts = batch
        .par_iter()
        .map(|&i| {
            let (x, y) = &data[i];
            let target = if *y { 1.0 } else { 0.0 };
            let x = if cfg.adversarial {
                pgd_patch(params, x, target, cfg.pgd_eps, cfg.pgd_steps)?
            } else {
                x.clone()
            };
            loss_and_gradients(params, &x, target).map(|(l, g, _)| (l, g))
        })
        .collect::<Vec<_>>();
    let mut loss = 0.0;
    let mut grad = vec![0.0; ClassifierParams::num_params()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

/// Trains on `(patch, malignant)` pairs with Adam on the mean cross-entropy.
pub fn train_classifier(data: &[(Tensor, bool)], cfg: &ClassifierTrainConfig) -> Result<ClassifierParams> {
    let positives = data.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::invalid("classifier training needs both labels"));
    }
    let side = data[0].0.shape().first().copied().unwrap_or(0);
    for (x, _) in data {
        x.ensure_shape("training patch", &[side, side])?;
    }
    let mut params = ClassifierParams::init(side, cfg.seed);
    let mut theta = params.flat();
    let mut adam = AdamState::new(theta.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch_size = cfg.batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        if batch_size < data.len() {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(batch_size) {
            let (l, grad) = batch_gradient(&params, data, batch, cfg)?;
            if !l.is_finite() {
                return Err(Error::Divergence(format!("classifier loss {l} at epoch {epoch}")));
            }
            loss = l;
            let update = adam.step(&grad)?;
            theta.iter_mut().zip(&update).for_each(|(t, u)| *t -= u);
            params = ClassifierParams::from_flat(side, &theta)?;
        }
    }
    params.training = Some(ClassifierTraining {
        seed: cfg.seed,
        epochs: cfg.epochs,
        adversarial: cfg.adversarial,
        pgd_eps: cfg.pgd_eps,
        final_loss: loss,
        train_accuracy: accuracy(&params, data)?,
    });
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    format: String,
    side: usize,
    channels: [usize; 2],
    training: Option<ClassifierTraining>,
    arrays: Vec<BlobRef>,
}

pub fn save_classifier(params: &ClassifierParams, path: &Path) -> Result<()> {
    let lb = Tensor::scalar(params.linear_bias);
    let tensors = params.tensors();
    let arrays: Vec<(String, &Tensor)> = NAMES
        .iter()
        .zip(tensors.into_iter().chain(std::iter::once(&lb)))
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    let refs = ctb::write_arrays(path, &arrays)?;
    let meta = ClassifierMeta {
        format: "CTB1".into(),
        side: params.side,
        channels: [C1, C2],
        training: params.training.clone(),
        arrays: refs,
    };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<ClassifierParams> {
    let meta: ClassifierMeta = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
    if meta.channels != [C1, C2] {
        return Err(Error::Format(format!("unsupported classifier channels {:?}", meta.channels)));
    }
    let arrays = ctb::read_arrays(path, &meta.arrays)?;
    let mut theta = Vec::with_capacity(ClassifierParams::num_params());
    for name in NAMES {
        let i = meta
            .arrays
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        theta.extend_from_slice(arrays[i].data());
    }
    let mut params = ClassifierParams::from_flat(meta.side, &theta)?;
    params.training = meta.training;
    Ok(params)
}
