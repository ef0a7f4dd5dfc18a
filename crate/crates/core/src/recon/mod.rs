//! Reconstruction methods: filtered back projection, smoothed-TV gradient
//! descent and unrolled gradient descent with trained step sizes.
//!
//! Every method can also record itself on a [`Tape`], which is what the
//! attacks and the unrolled training differentiate through.

mod fbp;
mod newton;
mod tv;
mod unrolled;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::Result;
use crate::radon::RadonOperator;

pub use fbp::{filter_kernel, Fbp, FbpConfig, Window};
pub use newton::{minimize_tv_newton, NewtonReport};
pub use tv::{default_step, tv_energy, tv_gradient, Tv, TvConfig};
pub use unrolled::{
    load_params, save_params, train_unrolled, TrainConfig, TrainingInfo, UnrolledGd, UnrolledGdParams,
};

/// A reconstruction map `f -> u` that can also be recorded for differentiation.
pub trait Reconstructor: Send + Sync {
    fn name(&self) -> &str;

    fn operator(&self) -> &RadonOperator;

    fn reconstruct(&self, f: &Tensor) -> Result<Tensor>;

    /// Records the reconstruction of the sinogram node `f`; returns the image node.
    fn record(&self, tape: &mut Tape, f: NodeId) -> Result<NodeId>;

    /// Reconstruction of `f` together with the vector-Jacobian product
    /// `J(f)^T w` for an image-space weight `w`.
    fn vjp(&self, f: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let fid = tape.leaf(f.clone())?;
        let u = self.record(&mut tape, fid)?;
        let wid = tape.constant(w.clone())?;
        let prod = tape.mul(u, wid)?;
        let s = tape.sum(prod)?;
        let mut grads = tape.backward(s)?;
        let recon = tape.value(u)?.clone();
        let g = grads.take(fid).expect("leaf gradient");
        Ok((recon, g))
    }
}
