//! Distribution-to-distribution regression models acting on mean embeddings.
//!
//! Four model classes are provided:
//!
//! * [`NonParametricOperator`]: the least-squares linear operator restricted
//!   to the span of the training input embeddings.
//! * [`OneParameterModel`]: `L = alpha * identity`.
//! * [`MixtureEmbeddingModel`]: `L [f_1..f_I] = sum_i alpha_i f_i`, alpha free.
//! * [`MixtureDistributionModel`]: same form with weights on the simplex,
//!   i.e. the output distribution is a mixture of the inputs.
//!
//! Outputs are signed-weight embeddings; nothing here projects them back
//! onto probability embeddings (see [`crate::sampler`]).

use nalgebra::{DMatrix, DVector};

use crate::embedding::{inner, Embedding, KernelConfig};
use crate::error::{Error, Result};
use crate::numeric::{inverse_spd, solve_spd};
use crate::simplex_qp::{self, SimplexQp, SolverOptions};

/// K training examples, each an I-tuple of input embeddings and one output.
#[derive(Debug, Clone)]
pub struct TrainingPairs {
    inputs: Vec<Vec<Embedding>>,
    outputs: Vec<Embedding>,
}

impl TrainingPairs {
    pub fn new(inputs: Vec<Vec<Embedding>>, outputs: Vec<Embedding>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidParameter("need at least one training pair".into()));
        }
        if inputs.len() != outputs.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                found: outputs.len(),
            });
        }
        let arity = inputs[0].len();
        if arity == 0 {
            return Err(Error::InvalidParameter("input tuples must be non-empty".into()));
        }
        let kernel = *outputs[0].kernel();
        for (tuple, out) in inputs.iter().zip(&outputs) {
            if tuple.len() != arity {
                return Err(Error::DimensionMismatch {
                    expected: arity,
                    found: tuple.len(),
                });
            }
            if tuple.iter().chain(std::iter::once(out)).any(|e| *e.kernel() != kernel) {
                return Err(Error::KernelMismatch);
            }
        }
        Ok(Self { inputs, outputs })
    }

    /// Single-input pairs `(Q^(k), P^(k))`.
    pub fn single(inputs: Vec<Embedding>, outputs: Vec<Embedding>) -> Result<Self> {
        Self::new(inputs.into_iter().map(|q| vec![q]).collect(), outputs)
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn kernel(&self) -> &KernelConfig {
        self.outputs[0].kernel()
    }

    pub fn inputs(&self) -> &[Vec<Embedding>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Embedding] {
        &self.outputs
    }

    fn require_single(&self) -> Result<()> {
        if self.arity() != 1 {
            return Err(Error::InvalidParameter(format!(
                "model takes a single input distribution, got {}",
                self.arity()
            )));
        }
        Ok(())
    }
}

/// Normal equations of `sum_k || mu_P^(k) - sum_i c_i mu_{Q_i}^(k) ||^2`.
///
/// `gram[i][j] = sum_k <mu_{Q_i}^(k), mu_{Q_j}^(k)>`,
/// `rhs[i] = sum_k <mu_{Q_i}^(k), mu_P^(k)>`,
/// `output_sq = sum_k ||mu_P^(k)||^2`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub output_sq: f64,
}

impl NormalEquations {
    pub fn from_pairs(pairs: &TrainingPairs) -> Result<Self> {
        let arity = pairs.arity();
        let mut gram = DMatrix::zeros(arity, arity);
        let mut rhs = DVector::zeros(arity);
        let mut output_sq = 0.0;
        for (tuple, out) in pairs.inputs.iter().zip(&pairs.outputs) {
            for i in 0..arity {
                for j in i..arity {
                    let v = inner(&tuple[i], &tuple[j])?;
                    gram[(i, j)] += v;
                    if i != j {
                        gram[(j, i)] += v;
                    }
                }
                rhs[i] += inner(&tuple[i], out)?;
            }
            output_sq += inner(out, out)?;
        }
        Ok(Self {
            gram,
            rhs,
            output_sq,
        })
    }

    /// Training objective at coefficients `c`, clamped at zero.
    pub fn objective(&self, c: &[f64]) -> f64 {
        let c = DVector::from_column_slice(c);
        (self.output_sq - 2.0 * self.rhs.dot(&c) + c.dot(&(&self.gram * &c))).max(0.0)
    }
}

/// Default ridge `1e-8 * trace(G) / n` for an `n x n` Gram matrix.
pub fn default_ridge(gram: &DMatrix<f64>) -> f64 {
    1e-8 * gram.trace() / gram.nrows().max(1) as f64
}

fn with_ridge(mut m: DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ridge must be non-negative, got {ridge}"
        )));
    }
    for i in 0..m.nrows() {
        m[(i, i)] += ridge;
    }
    Ok(m)
}

fn cross_gram(a: &[Embedding], b: &[Embedding]) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            m[(i, j)] = inner(x, y)?;
        }
    }
    Ok(m)
}

fn self_gram(a: &[Embedding]) -> Result<DMatrix<f64>> {
    let n = a.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = inner(&a[i], &a[j])?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Non-parametric operator `M_P (M_Q^T M_Q + ridge I)^{-1} M_Q^T`.
#[derive(Debug, Clone)]
pub struct NonParametricOperator {
    train_inputs: Vec<Embedding>,
    train_outputs: Vec<Embedding>,
    coeff: DMatrix<f64>,
    ridge: f64,
}

pub fn fit_nonparametric(pairs: &TrainingPairs, ridge: f64) -> Result<NonParametricOperator> {
    pairs.require_single()?;
    let inputs: Vec<Embedding> = pairs.inputs.iter().map(|t| t[0].clone()).collect();
    let m_qq = with_ridge(self_gram(&inputs)?, ridge)?;
    let coeff = inverse_spd(&m_qq, "non-parametric operator (input Gram)")?;
    Ok(NonParametricOperator {
        train_inputs: inputs,
        train_outputs: pairs.outputs.clone(),
        coeff,
        ridge,
    })
}

impl NonParametricOperator {
    pub fn coeff(&self) -> &DMatrix<f64> {
        &self.coeff
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn train_outputs(&self) -> &[Embedding] {
        &self.train_outputs
    }

    /// Coefficients `c = coeff * v`, `v_k = <mu_Q^(k), q>`, of the output in
    /// the basis of training output embeddings.
    pub fn output_coefficients(&self, q: &Embedding) -> Result<DVector<f64>> {
        let v = DVector::from_iterator(
            self.train_inputs.len(),
            self.train_inputs
                .iter()
                .map(|qk| inner(qk, q))
                .collect::<Result<Vec<_>>>()?,
        );
        Ok(&self.coeff * v)
    }

    /// `sum_k c_k mu_P^(k)`.
    pub fn apply(&self, q: &Embedding) -> Result<Embedding> {
        let c = self.output_coefficients(q)?;
        let terms: Vec<(f64, &Embedding)> = c.iter().copied().zip(&self.train_outputs).collect();
        Embedding::combine(&terms)
    }

    /// Gram matrix of the training output embeddings.
    pub fn output_gram(&self) -> Result<DMatrix<f64>> {
        self_gram(&self.train_outputs)
    }

    /// Hilbert-Schmidt norm of `Pi_P Pi_Q - Pi_P L Pi_Q`, the error of the
    /// estimate against an identity ground truth restricted to the spans of
    /// the training embeddings.
    ///
    /// Both operators have the form `M_P B M_Q^T`, so the squared norm is
    /// `trace(B^T m_PP B m_QQ)` with `B = m_PP^{-1} m_PQ m_QQ^{-1} - coeff`.
    pub fn projected_identity_error(&self) -> Result<f64> {
        let m_pp = self.output_gram()?;
        let m_qq = self_gram(&self.train_inputs)?;
        let m_pq = cross_gram(&self.train_outputs, &self.train_inputs)?;
        let m_pp_inv = inverse_spd(&m_pp, "projected error (output Gram)")?;
        let m_qq_inv = inverse_spd(&m_qq, "projected error (input Gram)")?;
        let b = &m_pp_inv * &m_pq * &m_qq_inv - &self.coeff;
        let hs2 = (b.transpose() * &m_pp * &b * &m_qq).trace();
        Ok(hs2.max(0.0).sqrt())
    }
}

/// `L = alpha * identity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneParameterModel {
    pub alpha: f64,
}

/// `alpha = trace(m_PQ) / trace(m_QQ)`, summing only the matched `k = k'`
/// entries `<mu_P^(k), mu_Q^(k)>` and `<mu_Q^(k), mu_Q^(k)>`.
pub fn fit_one_parameter(pairs: &TrainingPairs) -> Result<OneParameterModel> {
    pairs.require_single()?;
    let mut tr_pq = 0.0;
    let mut tr_qq = 0.0;
    for (tuple, p) in pairs.inputs.iter().zip(&pairs.outputs) {
        tr_pq += inner(p, &tuple[0])?;
        tr_qq += inner(&tuple[0], &tuple[0])?;
    }
    if tr_qq.is_nan() || tr_qq <= 0.0 {
        return Err(Error::Singular {
            context: "one-parameter model (zero input trace)".into(),
        });
    }
    Ok(OneParameterModel {
        alpha: tr_pq / tr_qq,
    })
}

impl OneParameterModel {
    pub fn apply(&self, q: &Embedding) -> Embedding {
        q.scaled(self.alpha)
    }
}

/// Models whose prediction is a fixed linear combination of the inputs.
pub trait LinearMixture {
    fn coefficients(&self) -> &[f64];
}

/// `sum_i alpha_i mu_{Q_i}`, unconstrained alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEmbeddingModel {
    pub alpha: Vec<f64>,
}

impl LinearMixture for MixtureEmbeddingModel {
    fn coefficients(&self) -> &[f64] {
        &self.alpha
    }
}

/// `sum_i w_i mu_{Q_i}` with `w` on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDistributionModel {
    pub w: Vec<f64>,
    pub kkt_residual: f64,
}

impl LinearMixture for MixtureDistributionModel {
    fn coefficients(&self) -> &[f64] {
        &self.w
    }
}

/// Least-squares alpha from `(G + ridge I) alpha = rhs`.
pub fn fit_mixture_embeddings(pairs: &TrainingPairs, ridge: f64) -> Result<MixtureEmbeddingModel> {
    let normal = NormalEquations::from_pairs(pairs)?;
    fit_mixture_embeddings_from(&normal, ridge)
}

pub fn fit_mixture_embeddings_from(
    normal: &NormalEquations,
    ridge: f64,
) -> Result<MixtureEmbeddingModel> {
    let lhs = with_ridge(normal.gram.clone(), ridge)?;
    let alpha = solve_spd(&lhs, &normal.rhs, "mixture of embeddings (normal equations)")?;
    Ok(MixtureEmbeddingModel {
        alpha: alpha.as_slice().to_vec(),
    })
}

/// Simplex-constrained least squares on the same normal equations.
pub fn fit_mixture_distributions(pairs: &TrainingPairs) -> Result<MixtureDistributionModel> {
    let normal = NormalEquations::from_pairs(pairs)?;
    fit_mixture_distributions_from(&normal)
}

pub fn fit_mixture_distributions_from(normal: &NormalEquations) -> Result<MixtureDistributionModel> {
    let problem = SimplexQp::new(normal.gram.clone(), normal.rhs.clone())?;
    let sol = simplex_qp::solve(&problem, SolverOptions::default())?;
    Ok(MixtureDistributionModel {
        w: sol.theta,
        kkt_residual: sol.kkt_residual,
    })
}

/// Apply a mixture model to an I-tuple of input embeddings.
pub fn predict_embedding<M: LinearMixture + ?Sized>(
    model: &M,
    inputs: &[Embedding],
) -> Result<Embedding> {
    let coeffs = model.coefficients();
    if inputs.len() != coeffs.len() {
        return Err(Error::DimensionMismatch {
            expected: coeffs.len(),
            found: inputs.len(),
        });
    }
    let terms: Vec<(f64, &Embedding)> = coeffs.iter().copied().zip(inputs).collect();
    Embedding::combine(&terms)
}
