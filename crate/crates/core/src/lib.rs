//! Differentiable low-dose CT reconstruction and a measurement-domain
//! adversarial robustness benchmark.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode tape over a fixed op vocabulary.
//! - [`sparse`] and [`radon`]: the parallel-beam ray-traced system matrix.
//! - [`phantom`]: synthetic chest phantoms, lesions, Poisson noise, CTB1 I/O.
//! - [`recon`]: FBP, smoothed-TV gradient descent and unrolled gradient descent.
//! - [`classifier`]: a tiny convolutional lesion classifier.
//! - [`attack`]: PGD with Adam for untargeted, localized and universal attacks.
//! - [`metrics`]: PSNR, SSIM, TV Bregman distance, Lipschitz lower bounds.
//! - [`harness`]: experiment configuration and the campaign drivers behind the CLI.

pub mod attack;
pub mod autodiff;
pub mod classifier;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod radon;
pub mod recon;
pub mod sparse;

pub use autodiff::{NodeId, Tape, Tensor};
pub use error::{Error, Result};
pub use radon::{Geometry, RadonOperator, Region};
