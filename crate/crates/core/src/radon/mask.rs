use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{RadonOperator, Region};

/// Separable Gaussian blur with zero padding; the kernel is truncated at
/// radius `ceil(4 sigma)` and normalized to unit sum.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let (h, w) = image.dims2()?;
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);

    let src = image.data();
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let jj = j as isize + k as isize - radius;
                if (0..w as isize).contains(&jj) {
                    acc += kv * src[i * w + jj as usize];
                }
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let ii = i as isize + k as isize - radius;
                if (0..h as isize).contains(&ii) {
                    acc += kv * tmp[ii as usize * w + j];
                }
            }
            out[i * w + j] = acc;
        }
    }
    Ok(Tensor::raw(vec![h, w], out))
}

pub(super) fn sinogram_mask(op: &RadonOperator, region: &Region, sigma: f64) -> Result<Tensor> {
    let [h, w] = op.geometry().image_shape();
    region.check_within(h, w)?;
    let mut indicator = Tensor::zeros(&[h, w]);
    for r in region.row0..region.row0 + region.height {
        for c in region.col0..region.col0 + region.width {
            indicator.set2(r, c, 1.0);
        }
    }
    let blurred = gaussian_blur(&indicator, sigma)?;
    let sino = op.forward(&blurred)?;
    let peak = sino.max();
    if !(peak > 0.0) {
        return Err(Error::invalid("region is not seen by any ray"));
    }
    Ok(sino.map(|v| (v / peak).clamp(0.0, 1.0)))
}
