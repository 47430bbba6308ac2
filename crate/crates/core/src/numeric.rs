//! Small numerical helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise (cascade) summation. The split points depend only on the
/// length, so the result is reproducible for a given input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Eigenvalue ratio below which a symmetric PSD system is treated as singular.
pub const SINGULAR_RATIO: f64 = 1e-12;

/// Solve `a x = b` for symmetric positive definite `a`.
///
/// Fails with [`Error::Singular`] when the smallest eigenvalue is below
/// `SINGULAR_RATIO` times the largest.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    check_conditioning(a, context)?;
    let chol = a.clone().cholesky().ok_or_else(|| Error::Singular {
        context: context.to_string(),
    })?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix, with the same rank check
/// as [`solve_spd`].
pub fn inverse_spd(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    check_conditioning(a, context)?;
    let chol = a.clone().cholesky().ok_or_else(|| Error::Singular {
        context: context.to_string(),
    })?;
    Ok(chol.inverse())
}

fn check_conditioning(a: &DMatrix<f64>, context: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 || min <= SINGULAR_RATIO * max {
        return Err(Error::Singular {
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

/// Rayleigh-quotient estimate of the largest eigenvalue of a symmetric PSD
/// matrix by power iteration from the normalized all-ones vector.
pub fn power_iteration(a: &DMatrix<f64>, iterations: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let w = a * &v;
        estimate = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        v = w / norm;
    }
    estimate
}

/// Sample median; averages the two middle values for even lengths.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Generator for draw `stream` under `seed`. Streams are independent, so
/// draws can be produced in any order or in parallel.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mix a base seed with two labels into an independent 64-bit seed
/// (SplitMix64 finalizer applied to each input in turn).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ tag) ^ index)
}
