use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fbp::{Fbp, FbpConfig};
use super::Reconstructor;
use crate::autodiff::{field_normalize, grad2d, grad2d_adjoint, NodeId, Op, Tape, Tensor};
use crate::error::{Error, Result};
use crate::radon::RadonOperator;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TvConfig {
    pub steps: usize,
    pub tv_weight: f64,
    /// Gradient step; `None` means `0.9 / sigma_max(A)^2`.
    pub step_size: Option<f64>,
    pub smoothing: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            tv_weight: 1e-3,
            step_size: None,
            smoothing: 1e-2,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tv_weight >= 0.0 && self.smoothing > 0.0) {
            return Err(Error::invalid("tv weight must be non-negative and smoothing positive"));
        }
        if let Some(t) = self.step_size {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("tv step size {t} must be positive")));
            }
        }
        Ok(())
    }

    pub fn resolved_step(&self, op: &RadonOperator) -> f64 {
        self.step_size.unwrap_or_else(|| default_step(op))
    }
}

pub fn default_step(op: &RadonOperator) -> f64 {
    0.9 / op.spectral_norm().powi(2)
}

/// `1/2 |Au - f|^2 + lambda * sum sqrt(|grad u|^2 + eps^2)`.
pub fn tv_energy(op: &RadonOperator, u: &Tensor, f: &Tensor, lambda: f64, eps: f64) -> Result<f64> {
    let r = op.forward(u)?.sub(f)?;
    let (h, w) = u.dims2()?;
    let mut du = vec![0.0; 2 * h * w];
    grad2d(u.data(), h, w, &mut du);
    let n = h * w;
    let tv: f64 = (0..n)
        .map(|i| (du[i] * du[i] + du[n + i] * du[n + i] + eps * eps).sqrt())
        .sum();
    Ok(0.5 * r.dot(&r) + lambda * tv)
}

/// `grad R_eps(u) = D^T (Du / sqrt(|Du|^2 + eps^2))`.
pub fn tv_gradient(u: &Tensor, eps: f64) -> Result<Tensor> {
    let (h, w) = u.dims2()?;
    let mut du = vec![0.0; 2 * h * w];
    grad2d(u.data(), h, w, &mut du);
    let mut n = vec![0.0; 2 * h * w];
    field_normalize(&du, eps, &mut n);
    let mut out = vec![0.0; h * w];
    grad2d_adjoint(&n, h, w, &mut out);
    Ok(Tensor::raw(vec![h, w], out))
}

/// One step `u - tau (A^T(Au - f) + lambda grad R_eps(u)) + kernel * u`.
///
/// The arithmetic mirrors [`record_step`] operation for operation, so taped
/// and untaped runs agree bitwise.
pub(crate) fn step(
    op: &RadonOperator,
    u: &Tensor,
    f: &Tensor,
    tau: f64,
    lambda: f64,
    eps: f64,
    kernel: Option<&Tensor>,
) -> Result<Tensor> {
    let map = op.linear_op();
    let mut r = map.apply(u.data());
    r.iter_mut().zip(f.data()).for_each(|(a, b)| *a -= b);
    let atr = map.apply_adjoint(&r);
    let tvg = tv_gradient(u, eps)?;
    let data = u
        .data()
        .iter()
        .zip(&atr)
        .zip(tvg.data())
        .map(|((ui, a), t)| ui - (a + t * lambda) * tau)
        .collect();
    let mut next = Tensor::raw(u.shape().to_vec(), data);
    if let Some(k) = kernel {
        let (h, w) = u.dims2()?;
        let x = u.clone().reshaped(&[1, h, w])?;
        let conv = Op::Correlate2d.forward(&[&x, k])?.reshaped(&[h, w])?;
        next = next.add(&conv)?;
    }
    if !next.all_finite() {
        return Err(Error::NonFinite("gradient step (step size too large?)".into()));
    }
    Ok(next)
}

/// Coefficient of a recorded step: fixed, or a one-element tape node.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Coef {
    Fixed(f64),
    Node(NodeId),
}

impl Coef {
    fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Coef::Fixed(a) => tape.scale(x, a),
            Coef::Node(s) => tape.scale_by(s, x),
        }
    }
}

pub(crate) fn record_step(
    tape: &mut Tape,
    op: &RadonOperator,
    u: NodeId,
    f: NodeId,
    tau: Coef,
    lambda: Coef,
    eps: f64,
    kernel: Option<NodeId>,
) -> Result<NodeId> {
    let au = op.record_forward(tape, u)?;
    let r = tape.sub(au, f)?;
    let atr = op.record_adjoint(tape, r)?;
    let tvg = tape.smoothed_tv_gradient(u, eps)?;
    let tvs = lambda.apply(tape, tvg)?;
    let g = tape.add(atr, tvs)?;
    let gs = tau.apply(tape, g)?;
    let mut next = tape.sub(u, gs)?;
    if let Some(k) = kernel {
        let [h, w] = op.geometry().image_shape();
        let x = tape.reshape(u, &[1, h, w])?;
        let conv = tape.correlate2d(x, k, None)?;
        let conv = tape.reshape(conv, &[h, w])?;
        next = tape.add(next, conv)?;
    }
    Ok(next)
}

/// Smoothed-TV reconstruction by plain gradient descent from the FBP image.
#[derive(Clone, Debug)]
pub struct Tv {
    fbp: Fbp,
    cfg: TvConfig,
    tau: f64,
}

impl Tv {
    pub fn new(op: Arc<RadonOperator>, fbp: FbpConfig, cfg: TvConfig) -> Result<Self> {
        cfg.validate()?;
        let tau = cfg.resolved_step(&op);
        Ok(Self {
            fbp: Fbp::new(op, fbp)?,
            cfg,
            tau,
        })
    }

    pub fn config(&self) -> &TvConfig {
        &self.cfg
    }

    pub fn step_size(&self) -> f64 {
        self.tau
    }

    pub fn fbp(&self) -> &Fbp {
        &self.fbp
    }

    /// Runs the iteration, calling `observe(k, u_k)` for `k = 0..=steps`.
    pub fn run(&self, f: &Tensor, mut observe: impl FnMut(usize, &Tensor)) -> Result<Tensor> {
        let op = self.fbp.operator();
        let mut u = self.fbp.reconstruct(f)?;
        observe(0, &u);
        for k in 0..self.cfg.steps {
            u = step(op, &u, f, self.tau, self.cfg.tv_weight, self.cfg.smoothing, None)?;
            observe(k + 1, &u);
        }
        Ok(u)
    }
}

impl Reconstructor for Tv {
    fn name(&self) -> &str {
        "tv"
    }

    fn operator(&self) -> &RadonOperator {
        self.fbp.operator()
    }

    fn reconstruct(&self, f: &Tensor) -> Result<Tensor> {
        self.run(f, |_, _| {})
    }

    fn record(&self, tape: &mut Tape, f: NodeId) -> Result<NodeId> {
        let op = Arc::clone(self.fbp.operator());
        let mut u = self.fbp.record(tape, f)?;
        for _ in 0..self.cfg.steps {
            u = record_step(
                tape,
                &op,
                u,
                f,
                Coef::Fixed(self.tau),
                Coef::Fixed(self.cfg.tv_weight),
                self.cfg.smoothing,
                None,
            )?;
        }
        Ok(u)
    }
}
