//! Approximate sampling from a predicted embedding.
//!
//! The target embedding is projected onto the convex hull of a basis of
//! empirical distributions; samples are then drawn from the fitted mixture
//! by picking a component and bootstrapping one of its stored points.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::embedding::{gram, inner, Embedding, KernelConfig, SampleSet};
use crate::error::{Error, Result};
use crate::numeric::stream_rng;
use crate::simplex_qp::{self, SimplexQp, SolverOptions};

/// Sampleable distributions and their embeddings under one kernel.
#[derive(Debug, Clone)]
pub struct Basis {
    components: Vec<Arc<SampleSet>>,
    embeddings: Vec<Embedding>,
    labels: Vec<String>,
}

impl Basis {
    pub fn new(kernel: KernelConfig, components: Vec<SampleSet>, labels: Vec<String>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("basis needs at least one component".into()));
        }
        if labels.len() != components.len() {
            return Err(Error::DimensionMismatch {
                expected: components.len(),
                found: labels.len(),
            });
        }
        let dim = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: c.dim(),
            });
        }
        let components: Vec<Arc<SampleSet>> = components.into_iter().map(Arc::new).collect();
        let embeddings = components
            .iter()
            .map(|c| Embedding::uniform(kernel, Arc::clone(c)))
            .collect();
        Ok(Self {
            components,
            embeddings,
            labels,
        })
    }

    /// Basis with labels `0..I`.
    pub fn unlabeled(kernel: KernelConfig, components: Vec<SampleSet>) -> Result<Self> {
        let labels = (0..components.len()).map(|i| i.to_string()).collect();
        Self::new(kernel, components, labels)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn kernel(&self) -> &KernelConfig {
        self.embeddings[0].kernel()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn component(&self, i: usize) -> &SampleSet {
        &self.components[i]
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `G[i][j] = <mu_i, mu_j>`.
    pub fn gram(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = inner(&self.embeddings[i], &self.embeddings[j])?;
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone)]
pub struct FittedMixture {
    pub basis: Basis,
    pub theta: Vec<f64>,
    /// RKHS distance between the target and `sum_i theta_i mu_i`.
    pub fit_residual: f64,
}

impl FittedMixture {
    /// Embedding of the fitted mixture.
    pub fn embedding(&self) -> Result<Embedding> {
        let terms: Vec<(f64, &Embedding)> =
            self.theta.iter().copied().zip(self.basis.embeddings()).collect();
        Embedding::combine(&terms)
    }
}

/// Closest convex combination of basis embeddings to `target`.
pub fn fit_mixture_weights(target: &Embedding, basis: &Basis) -> Result<FittedMixture> {
    let g = basis.gram()?;
    fit_with_gram(target, basis, g)
}

/// As [`fit_mixture_weights`] with a precomputed basis Gram matrix.
pub fn fit_with_gram(target: &Embedding, basis: &Basis, g: DMatrix<f64>) -> Result<FittedMixture> {
    if target.kernel() != basis.kernel() {
        return Err(Error::KernelMismatch);
    }
    let b = DVector::from_vec(
        basis
            .embeddings()
            .iter()
            .map(|e| inner(e, target))
            .collect::<Result<Vec<_>>>()?,
    );
    let tt = inner(target, target)?;
    let problem = SimplexQp::new(g, b.clone())?;
    let sol = simplex_qp::solve(&problem, SolverOptions::default())?;
    let theta = DVector::from_column_slice(&sol.theta);
    let sq = tt - 2.0 * b.dot(&theta) + theta.dot(&(problem.gram() * &theta));
    Ok(FittedMixture {
        basis: basis.clone(),
        theta: sol.theta,
        fit_residual: sq.max(0.0).sqrt(),
    })
}

/// Draw `n` points from the fitted mixture. Draw `i` uses its own generator
/// stream, so the output depends only on `(seed, n)`.
pub fn sample_mixture(m: &FittedMixture, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be positive".into()));
    }
    let mut cdf = Vec::with_capacity(m.theta.len());
    let mut acc = 0.0;
    for &t in &m.theta {
        acc += t.max(0.0);
        cdf.push(acc);
    }
    let last_positive = m
        .theta
        .iter()
        .rposition(|&t| t > 0.0)
        .ok_or_else(|| Error::InvalidParameter("mixture weights are all zero".into()))?;
    let dim = m.basis.dim();
    let draws: Vec<(usize, usize)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let u: f64 = rng.random::<f64>() * acc;
            let c = cdf.iter().position(|&x| u < x).unwrap_or(last_positive);
            let idx = rng.random_range(0..m.basis.component(c).len());
            (c, idx)
        })
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    for (c, idx) in draws {
        data.extend_from_slice(m.basis.component(c).row(idx));
    }
    SampleSet::new(dim, data)
}

/// `f(x) = sum_i coeffs_i k(centers_i, x)`.
#[derive(Debug, Clone)]
pub struct KernelFunction {
    kernel: KernelConfig,
    centers: SampleSet,
    coeffs: Vec<f64>,
}

impl KernelFunction {
    pub fn new(kernel: KernelConfig, centers: SampleSet, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != centers.len() {
            return Err(Error::DimensionMismatch {
                expected: centers.len(),
                found: coeffs.len(),
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            kernel,
            centers,
            coeffs,
        })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.centers.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.centers.dim(),
                found: x.len(),
            });
        }
        Ok(self
            .centers
            .rows()
            .zip(&self.coeffs)
            .map(|(c, a)| a * self.kernel.eval_unchecked(c, x))
            .sum())
    }

    pub fn mean_over(&self, samples: &SampleSet) -> Result<f64> {
        let values = samples
            .rows()
            .map(|x| self.eval(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(crate::numeric::pairwise_sum(&values) / values.len() as f64)
    }

    /// `sqrt(c^T K c)`.
    pub fn rkhs_norm(&self) -> Result<f64> {
        let k = gram(&self.kernel, &self.centers, &self.centers)?;
        let c = DVector::from_column_slice(&self.coeffs);
        Ok(c.dot(&(k * &c)).max(0.0).sqrt())
    }
}

/// `|mean f(target) - mean f(mixture)|`.
pub fn expectation_gap(
    f: &KernelFunction,
    target_samples: &SampleSet,
    mixture_samples: &SampleSet,
) -> Result<f64> {
    Ok((f.mean_over(target_samples)? - f.mean_over(mixture_samples)?).abs())
}
