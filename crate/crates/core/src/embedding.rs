//! Kernels, sample sets and empirical mean embeddings.
//!
//! Embeddings are kept in dual form: a kernel together with a weighted set of
//! samples. Every RKHS quantity (inner products, MMD, regression normal
//! equations) reduces to weighted double sums of kernel evaluations.
//!
//! Reductions run row by row, each row summed with [`pairwise_sum`], and the
//! row totals are combined the same way. Rows may be evaluated in parallel
//! but the summation tree is fixed, so results do not depend on the number of
//! threads.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{median, pairwise_sum};

/// Kernel family. Both are characteristic on `R^D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// `exp(-rho * ||x - y||^2)`
    Gaussian,
    /// `exp(-rho * ||x - y||_1)`
    Laplace,
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "laplace" => Ok(KernelFamily::Laplace),
            other => Err(Error::InvalidParameter(format!(
                "unknown kernel family `{other}` (expected gaussian or laplace)"
            ))),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Laplace => "laplace",
        })
    }
}

/// A translation-invariant kernel with bandwidth parameter `rho > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    family: KernelFamily,
    rho: f64,
}

impl KernelConfig {
    pub fn new(family: KernelFamily, rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel rho must be positive and finite, got {rho}"
            )));
        }
        Ok(Self { family, rho })
    }

    pub fn gaussian(rho: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, rho)
    }

    pub fn laplace(rho: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplace, rho)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Evaluate `k(x, y)`, validating dimensions and finiteness.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let dist = match self.family {
            KernelFamily::Gaussian => x
                .iter()
                .zip(y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>(),
            KernelFamily::Laplace => x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>(),
        };
        (-self.rho * dist).exp()
    }
}

/// A finite set of `D`-dimensional samples, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
}

impl SampleSet {
    /// Build from a flat row-major buffer.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("sample dimension must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::EmptySampleSet);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptySampleSet)?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(dim * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    /// One-dimensional sample set from scalars.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Values of coordinate `j` across all samples.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim)
            .map(|j| pairwise_sum(&self.column(j)) / n)
            .collect()
    }

    /// Concatenate sample sets of equal dimension.
    pub fn concat(sets: &[&SampleSet]) -> Result<SampleSet> {
        let first = sets.first().ok_or(Error::EmptySampleSet)?;
        let mut data = Vec::new();
        for s in sets {
            if s.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    expected: first.dim,
                    found: s.dim,
                });
            }
            data.extend_from_slice(&s.data);
        }
        SampleSet::new(first.dim, data)
    }
}

/// Empirical mean embedding `sum_n w_n k(x_n, .)`.
///
/// Weights are uniform for the embedding of a sample set; linear operators
/// may produce arbitrary signed weights.
#[derive(Debug, Clone)]
pub struct Embedding {
    kernel: KernelConfig,
    samples: Arc<SampleSet>,
    weights: Vec<f64>,
}

impl Embedding {
    /// Uniformly weighted embedding of `samples`.
    pub fn uniform(kernel: KernelConfig, samples: impl Into<Arc<SampleSet>>) -> Self {
        let samples = samples.into();
        let n = samples.len();
        Self {
            kernel,
            samples,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn weighted(
        kernel: KernelConfig,
        samples: impl Into<Arc<SampleSet>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let samples = samples.into();
        if weights.len() != samples.len() {
            return Err(Error::DimensionMismatch {
                expected: samples.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            kernel,
            samples,
            weights,
        })
    }

    /// Linear combination `sum_i c_i e_i`, represented by concatenating the
    /// sample sets with scaled weights.
    pub fn combine(terms: &[(f64, &Embedding)]) -> Result<Embedding> {
        let (_, first) = terms.first().ok_or(Error::EmptySampleSet)?;
        let mut data = Vec::new();
        let mut weights = Vec::new();
        for (c, e) in terms {
            if e.kernel != first.kernel {
                return Err(Error::KernelMismatch);
            }
            if e.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    found: e.dim(),
                });
            }
            data.extend_from_slice(e.samples.as_slice());
            weights.extend(e.weights.iter().map(|w| c * w));
        }
        let samples = SampleSet::new(first.dim(), data)?;
        Embedding::weighted(first.kernel, samples, weights)
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn shared_samples(&self) -> Arc<SampleSet> {
        Arc::clone(&self.samples)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    pub fn total_weight(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    /// Same atoms, weights multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Embedding {
        Embedding {
            kernel: self.kernel,
            samples: Arc::clone(&self.samples),
            weights: self.weights.iter().map(|w| alpha * w).collect(),
        }
    }
}

/// Embedding of `samples` with uniform weights `1/N`.
pub fn embed(kernel: KernelConfig, samples: SampleSet) -> Embedding {
    Embedding::uniform(kernel, samples)
}

/// Gram matrix with entries `k(x_i, y_j)`.
pub fn gram(kernel: &KernelConfig, x: &SampleSet, y: &SampleSet) -> Result<DMatrix<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            y.rows().map(|yj| kernel.eval_unchecked(xi, yj)).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(x.len(), y.len(), |i, j| rows[i][j]))
}

/// Weighted double sum `sum_i sum_j wx_i wy_j k(x_i, y_j)`.
fn weighted_double_sum(
    kernel: &KernelConfig,
    x: &SampleSet,
    wx: &[f64],
    y: &SampleSet,
    wy: &[f64],
) -> f64 {
    let symmetric = std::ptr::eq(x, y) && std::ptr::eq(wx, wy);
    let ny = y.len();
    let rho = kernel.rho();
    let family = kernel.family();
    let one_dim = x.dim() == 1;
    let ys = y.as_slice();
    let rows: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(ny),
            |buf, i| {
                buf.clear();
                // upper triangle only when both sides are the same embedding
                let from = if symmetric { i + 1 } else { 0 };
                if one_dim {
                    let xi = x.as_slice()[i];
                    let (ys, wy) = (&ys[from..], &wy[from..]);
                    match family {
                        KernelFamily::Gaussian => buf.extend(ys.iter().zip(wy).map(|(yj, w)| {
                            let d = xi - yj;
                            w * (-rho * d * d).exp()
                        })),
                        KernelFamily::Laplace => buf.extend(
                            ys.iter()
                                .zip(wy)
                                .map(|(yj, w)| w * (-rho * (xi - yj).abs()).exp()),
                        ),
                    }
                } else {
                    let xi = x.row(i);
                    buf.extend(
                        y.rows()
                            .skip(from)
                            .zip(&wy[from..])
                            .map(|(yj, w)| w * kernel.eval_unchecked(xi, yj)),
                    );
                }
                if symmetric {
                    wx[i] * (wx[i] + 2.0 * pairwise_sum(buf))
                } else {
                    wx[i] * pairwise_sum(buf)
                }
            },
        )
        .collect();
    pairwise_sum(&rows)
}

fn check_compatible(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.kernel != b.kernel {
        return Err(Error::KernelMismatch);
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// RKHS inner product `<a, b> = w_a^T G w_b`.
pub fn inner(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_compatible(a, b)?;
    Ok(weighted_double_sum(
        &a.kernel,
        &a.samples,
        &a.weights,
        &b.samples,
        &b.weights,
    ))
}

/// Squared RKHS distance `||a - b||^2`, clamped at zero.
pub fn mmd2(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_compatible(a, b)?;
    let aa = inner(a, a)?;
    let ab = inner(a, b)?;
    let bb = inner(b, b)?;
    Ok((aa - 2.0 * ab + bb).max(0.0))
}

/// Squared RKHS norm of an embedding.
pub fn norm2(a: &Embedding) -> f64 {
    weighted_double_sum(&a.kernel, &a.samples, &a.weights, &a.samples, &a.weights).max(0.0)
}

const MEDIAN_MAX_POINTS: usize = 1000;

fn subsample_indices(n: usize) -> Vec<usize> {
    if n <= MEDIAN_MAX_POINTS {
        (0..n).collect()
    } else {
        (0..MEDIAN_MAX_POINTS)
            .map(|i| i * n / MEDIAN_MAX_POINTS)
            .collect()
    }
}

fn pairwise_distances(x: &SampleSet, family: KernelFamily, out: &mut Vec<f64>) {
    let idx = subsample_indices(x.len());
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let (xi, xj) = (x.row(i), x.row(j));
            let d = match family {
                KernelFamily::Gaussian => xi
                    .iter()
                    .zip(xj)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt(),
                KernelFamily::Laplace => xi.iter().zip(xj).map(|(p, q)| (p - q).abs()).sum(),
            };
            out.push(d);
        }
    }
}

fn rho_from_median(m: f64, family: KernelFamily) -> Result<f64> {
    if m.is_nan() || m <= 0.0 {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(match family {
        KernelFamily::Gaussian => 1.0 / (2.0 * m * m),
        KernelFamily::Laplace => 1.0 / m,
    })
}

/// Median-heuristic bandwidth: `1/(2 m^2)` for the Gaussian kernel with `m`
/// the median pairwise Euclidean distance, `1/m` for the Laplace kernel with
/// `m` the median pairwise l1 distance. Sets larger than 1000 points are
/// subsampled at evenly spaced indices.
pub fn median_heuristic(x: &SampleSet, family: KernelFamily) -> Result<f64> {
    median_heuristic_pooled(&[x], family)
}

/// Median heuristic over the within-set pairwise distances of several sets,
/// which may differ in dimension.
pub fn median_heuristic_pooled(sets: &[&SampleSet], family: KernelFamily) -> Result<f64> {
    let mut distances = Vec::new();
    for s in sets {
        pairwise_distances(s, family, &mut distances);
    }
    if distances.is_empty() {
        return Err(Error::InvalidParameter(
            "median heuristic needs at least two samples".into(),
        ));
    }
    let m = median(&mut distances).unwrap_or(0.0);
    rho_from_median(m, family)
}
