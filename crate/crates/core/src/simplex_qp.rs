//! Minimize `theta^T G theta - 2 b^T theta` over the probability simplex.
//!
//! Projected gradient with a fixed `1/L` step, `L = 2 lambda_max(G)` from
//! power iteration. The step is halved whenever the objective would increase,
//! which keeps the iteration monotone if the power-iteration estimate falls
//! short of the true top eigenvalue. Every 50 iterations the solver also
//! tries the exact minimizer on the current support; it is accepted only if
//! a projected-gradient step from it moves less than `tol`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::{min_eigenvalue, power_iteration};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;
const POWER_ITERATIONS: usize = 100;
const POLISH_EVERY: usize = 50;

/// Quadratic `theta^T G theta - 2 b^T theta` with `G` symmetric PSD.
#[derive(Debug, Clone)]
pub struct SimplexQp {
    gram: DMatrix<f64>,
    linear: DVector<f64>,
}

impl SimplexQp {
    /// Validates symmetry (1e-10) and positive semidefiniteness. Eigenvalues
    /// in `[-1e-8, 0)` are absorbed by adding `1e-8 I`.
    pub fn new(gram: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let n = gram.nrows();
        if n == 0 {
            return Err(Error::InvalidParameter("empty QP".into()));
        }
        if gram.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: gram.ncols(),
            });
        }
        if linear.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: linear.len(),
            });
        }
        if gram.iter().chain(linear.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let asym = (&gram - gram.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidParameter(format!(
                "QP matrix is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        let mut gram = (&gram + gram.transpose()) * 0.5;
        let min_eig = min_eigenvalue(&gram);
        if min_eig < -PSD_TOL {
            return Err(Error::InvalidParameter(format!(
                "QP matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        if min_eig < 0.0 {
            for i in 0..n {
                gram[(i, i)] += PSD_TOL;
            }
        }
        Ok(Self { gram, linear })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn objective(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        self.objective_vec(&t)
    }

    fn objective_vec(&self, t: &DVector<f64>) -> f64 {
        t.dot(&(&self.gram * t)) - 2.0 * self.linear.dot(t)
    }

    fn gradient(&self, t: &DVector<f64>) -> DVector<f64> {
        (&self.gram * t - &self.linear) * 2.0
    }

    /// `||theta - P(theta - grad f(theta))||`, zero exactly at the optimum.
    pub fn kkt_residual(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        let g = self.gradient(&t);
        let moved: Vec<f64> = t.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
        let p = project_simplex(&moved);
        t.iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SimplexQpSolution {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Stop when an iteration moves the iterate by at most this much.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50_000,
        }
    }
}

/// Euclidean projection onto `{x >= 0, sum x = 1}` by sorting and
/// thresholding. Ties are ordered by descending value, then index.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += v[i];
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if v[i] - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

fn distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm()
}

fn project_vec(v: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(project_simplex(v.as_slice()))
}

/// Solve the simplex-constrained QP.
pub fn solve(problem: &SimplexQp, options: SolverOptions) -> Result<SimplexQpSolution> {
    let n = problem.dim();
    let mut lipschitz = 2.0 * power_iteration(&problem.gram, POWER_ITERATIONS);
    if !(lipschitz.is_finite() && lipschitz > 0.0) {
        lipschitz = 1.0;
    }

    let mut theta = DVector::from_element(n, 1.0 / n as f64);
    let mut f = problem.objective_vec(&theta);
    if n == 1 {
        return Ok(finish(problem, theta, f, 0));
    }

    for iteration in 1..=options.max_iter {
        let grad = problem.gradient(&theta);
        let mut candidate;
        let mut f_candidate;
        let mut halvings = 0;
        loop {
            candidate = project_vec(&(&theta - &grad / lipschitz));
            f_candidate = problem.objective_vec(&candidate);
            if f_candidate <= f + 1e-14 * f.abs().max(1.0) || halvings >= 60 {
                break;
            }
            lipschitz *= 2.0;
            halvings += 1;
        }
        debug_assert!(
            f_candidate <= f + 1e-12 * f.abs().max(1.0),
            "objective increased: {f} -> {f_candidate}"
        );
        let moved = distance(&candidate, &theta);
        theta = candidate;
        f = f_candidate;
        if moved <= options.tol {
            return Ok(finish(problem, theta, f, iteration));
        }
        if iteration % POLISH_EVERY == 0 {
            if let Some((polished, fp)) = polish(problem, &theta, f, lipschitz, options.tol) {
                return Ok(finish(problem, polished, fp, iteration));
            }
        }
    }

    let kkt_residual = problem.kkt_residual(theta.as_slice());
    Err(Error::QpNotConverged {
        iterations: options.max_iter,
        kkt_residual,
        last_iterate: theta.as_slice().to_vec(),
    })
}

/// Exact minimizer of the quadratic on the affine hull of the current
/// support, accepted only when it is feasible, no worse, and stationary for
/// the projected-gradient map.
fn polish(
    problem: &SimplexQp,
    theta: &DVector<f64>,
    f: f64,
    lipschitz: f64,
    tol: f64,
) -> Option<(DVector<f64>, f64)> {
    let support: Vec<usize> = (0..theta.len()).filter(|&i| theta[i] > 0.0).collect();
    let m = support.len();
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = 2.0 * problem.gram[(i, j)];
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
        rhs[a] = 2.0 * problem.linear[i];
    }
    rhs[m] = 1.0;
    let x = kkt.lu().solve(&rhs)?;
    if x.iter().any(|v| !v.is_finite()) || (0..m).any(|a| x[a] < -1e-12) {
        return None;
    }
    let mut full = DVector::zeros(theta.len());
    for (a, &i) in support.iter().enumerate() {
        full[i] = x[a];
    }
    let candidate = project_vec(&full);
    let fc = problem.objective_vec(&candidate);
    if fc > f + 1e-14 * f.abs().max(1.0) {
        return None;
    }
    let step = project_vec(&(&candidate - problem.gradient(&candidate) / lipschitz));
    if distance(&step, &candidate) <= tol {
        Some((candidate, fc))
    } else {
        None
    }
}

fn finish(problem: &SimplexQp, theta: DVector<f64>, objective: f64, iterations: usize) -> SimplexQpSolution {
    let theta = theta.as_slice().to_vec();
    let kkt_residual = problem.kkt_residual(&theta);
    SimplexQpSolution {
        theta,
        objective,
        kkt_residual,
        iterations,
    }
}

/// Minimum of the objective over the grid `{(t, 1 - t) : t = 0, step, ..., 1}`
/// for two-dimensional problems, or the corresponding triangular grid in
/// three dimensions. Used as a brute-force oracle.
pub fn grid_minimum(problem: &SimplexQp, step: f64) -> Result<(Vec<f64>, f64)> {
    let steps = (1.0 / step).round() as usize;
    let mut best = (Vec::new(), f64::INFINITY);
    match problem.dim() {
        2 => {
            for a in 0..=steps {
                let t = a as f64 / steps as f64;
                let theta = vec![t, 1.0 - t];
                let f = problem.objective(&theta);
                if f < best.1 {
                    best = (theta, f);
                }
            }
        }
        3 => {
            for a in 0..=steps {
                for b in 0..=steps - a {
                    let (t, u) = (a as f64 / steps as f64, b as f64 / steps as f64);
                    let theta = vec![t, u, (1.0 - t - u).max(0.0)];
                    let f = problem.objective(&theta);
                    if f < best.1 {
                        best = (theta, f);
                    }
                }
            }
        }
        n => {
            return Err(Error::InvalidParameter(format!(
                "grid oracle supports dimensions 2 and 3, got {n}"
            )))
        }
    }
    Ok(best)
}
