//! Small dense helpers shared by the operator and metric code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dominant eigenvalue of a symmetric positive semi-definite operator given
/// as `apply(x, y)` computing `y = M x`.
///
/// Starts from a fixed pseudo-random vector, so repeated calls agree exactly.
pub fn power_iteration(
    dim: usize,
    tol: f64,
    max_iter: usize,
    mut apply: impl FnMut(&[f64], &mut [f64]),
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalize(&mut x);
    let mut y = vec![0.0; dim];
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        apply(&x, &mut y);
        let next = norm(&y);
        if next == 0.0 {
            return 0.0;
        }
        x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi = yi / next);
        let done = (next - lambda).abs() <= tol * next;
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) {
    let n = norm(x);
    x.iter_mut().for_each(|v| *v /= n);
}

/// Largest singular value of a dense row-major `rows x cols` matrix.
pub fn dense_spectral_norm(matrix: &[Vec<f64>]) -> f64 {
    let cols = matrix.first().map_or(0, Vec::len);
    let mut tmp = vec![0.0; matrix.len()];
    power_iteration(cols, 1e-14, 100_000, |x, y| {
        for (t, row) in tmp.iter_mut().zip(matrix) {
            *t = dot(row, x);
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        for (t, row) in tmp.iter().zip(matrix) {
            for (yj, rj) in y.iter_mut().zip(row) {
                *yj += t * rj;
            }
        }
    })
    .sqrt()
}
