use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Low-dose measurement: per bin `k ~ Poisson(n0 * exp(-f))` and the
/// log-transformed value `-ln(max(k, 1) / n0)`.
pub fn simulate_low_dose(f_clean: &Tensor, photons_n0: f64, seed: u64) -> Result<Tensor> {
    if !(photons_n0 >= 1.0 && photons_n0.is_finite()) {
        return Err(Error::invalid(format!("photon count {photons_n0} must be at least 1")));
    }
    if let Some(v) = f_clean.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("negative sinogram entry {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = f_clean
        .data()
        .iter()
        .map(|&f| {
            let lambda = photons_n0 * (-f).exp();
            let k = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::invalid(format!("poisson rate {lambda}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            Ok(-(k.max(1.0) / photons_n0).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Tensor::new(f_clean.shape().to_vec(), out)
}
