//! Brute-force self-checks exposed through `distreg oracle`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::embedding::{embed, gram, inner, mmd2, KernelConfig, KernelFamily, SampleSet};
use crate::error::{Error, Result};
use crate::network::{bfs_distance, shortest_path, terminal_access_adjacency, Graph};
use crate::numeric::stream_rng;
use crate::simplex_qp::{grid_minimum, solve, SimplexQp, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gram,
    Qp,
    Bfs,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gram" => Ok(Self::Gram),
            "qp" => Ok(Self::Qp),
            "bfs" => Ok(Self::Bfs),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidParameter(format!(
                "unknown suite '{other}' (expected gram, qp, bfs or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCase {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for OracleCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

pub fn run(suite: Suite) -> Result<Vec<OracleCase>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Gram | Suite::All) {
        out.extend(gram_cases()?);
    }
    if matches!(suite, Suite::Qp | Suite::All) {
        out.extend(qp_cases(100, 20)?);
    }
    if matches!(suite, Suite::Bfs | Suite::All) {
        out.extend(bfs_cases()?);
    }
    Ok(out)
}

fn case(suite: &'static str, name: String, passed: bool, detail: String) -> OracleCase {
    OracleCase {
        suite,
        name,
        passed,
        detail,
    }
}

fn random_set(rng: &mut impl Rng, n: usize, dim: usize, shift: f64) -> Result<SampleSet> {
    let data = (0..n * dim).map(|_| shift + rng.random_range(-2.0..2.0)).collect();
    SampleSet::new(dim, data)
}

fn naive_kernel(family: KernelFamily, rho: f64, x: &[f64], y: &[f64]) -> f64 {
    let mut d = 0.0;
    for i in 0..x.len() {
        d += match family {
            KernelFamily::Gaussian => (x[i] - y[i]).powi(2),
            KernelFamily::Laplace => (x[i] - y[i]).abs(),
        };
    }
    (-rho * d).exp()
}

fn naive_mean(family: KernelFamily, rho: f64, x: &SampleSet, y: &SampleSet) -> f64 {
    let mut s = 0.0;
    for a in x.rows() {
        for b in y.rows() {
            s += naive_kernel(family, rho, a, b);
        }
    }
    s / (x.len() * y.len()) as f64
}

/// Gram entries, inner products and MMD against direct double sums.
pub fn gram_cases() -> Result<Vec<OracleCase>> {
    let mut out = Vec::new();
    let mut rng = stream_rng(7, 0);
    for (k, family) in [KernelFamily::Gaussian, KernelFamily::Laplace].into_iter().cycle().take(6).enumerate() {
        let dim = 1 + k % 3;
        let rho = 0.1 + 0.2 * k as f64;
        let kernel = KernelConfig::new(family, rho)?;
        let x = random_set(&mut rng, 20 + k, dim, 0.0)?;
        let y = random_set(&mut rng, 15 + 2 * k, dim, 0.5 * k as f64)?;
        let g = gram(&kernel, &x, &y)?;
        let mut err: f64 = 0.0;
        for (i, a) in x.rows().enumerate() {
            for (j, b) in y.rows().enumerate() {
                err = err.max((g[(i, j)] - naive_kernel(family, rho, a, b)).abs());
            }
        }
        let (ex, ey) = (embed(kernel, x.clone()), embed(kernel, y.clone()));
        let xy = naive_mean(family, rho, &x, &y);
        let want_mmd = naive_mean(family, rho, &x, &x) + naive_mean(family, rho, &y, &y) - 2.0 * xy;
        err = err.max((inner(&ex, &ey)? - xy).abs());
        err = err.max((mmd2(&ex, &ey)? - want_mmd.max(0.0)).abs());
        out.push(case(
            "gram",
            format!("{family:?}-d{dim}-{k}").to_lowercase(),
            err <= 1e-12,
            format!("max abs error {err:.2e}"),
        ));
    }
    Ok(out)
}

fn random_psd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n + 1, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose()
}

/// Simplex QP solutions against a grid search with step 0.01.
pub fn qp_cases(n2: usize, n3: usize) -> Result<Vec<OracleCase>> {
    let mut out = Vec::new();
    let mut rng = stream_rng(11, 0);
    for (k, n) in std::iter::repeat_n(2, n2).chain(std::iter::repeat_n(3, n3)).enumerate() {
        let g = random_psd(&mut rng, n);
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let problem = SimplexQp::new(g, b)?;
        let sol = solve(&problem, SolverOptions::default())?;
        let (_, grid) = grid_minimum(&problem, 0.01)?;
        let passed = sol.objective <= grid + 1e-6 && sol.kkt_residual <= 1e-8;
        out.push(case(
            "qp",
            format!("n{n}-{k}"),
            passed,
            format!(
                "objective {:.9} grid {:.9} kkt {:.1e}",
                sol.objective, grid, sol.kkt_residual
            ),
        ));
    }
    Ok(out)
}

/// Hand-checked distances and paths on small graphs.
pub fn bfs_cases() -> Result<Vec<OracleCase>> {
    let mut out = Vec::new();
    let mut check = |name: &str, got: String, want: &str| {
        out.push(case("bfs", name.to_string(), got == want, format!("got {got}, want {want}")));
    };
    let fmt = |d: Vec<Option<u32>>| {
        d.iter()
            .map(|v| v.map_or("-".to_string(), |x| x.to_string()))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let path = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)])?;
    check("path-distances", fmt(bfs_distance(&path, 0)?), "0 1 2 3");
    let cycle = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)])?;
    check("cycle-distances", fmt(bfs_distance(&cycle, 0)?), "0 1 2 2 1");
    let split = Graph::from_edges(4, &[(0, 1), (2, 3)])?;
    check("disconnected", fmt(bfs_distance(&split, 0)?), "0 1 - -");
    // 3 x 3 grid, ties broken towards lower ids
    let grid = Graph::from_edges(
        9,
        &[(0, 1), (1, 2), (3, 4), (4, 5), (6, 7), (7, 8), (0, 3), (3, 6), (1, 4), (4, 7), (2, 5), (5, 8)],
    )?;
    check("grid-distances", fmt(bfs_distance(&grid, 4)?), "2 1 2 1 0 1 2 1 2");
    let p = shortest_path(&grid, 0, 8)?.unwrap_or_default();
    check(
        "grid-path",
        p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
        "0 1 2 5 8",
    );
    // closing the centre forces a detour around the ring
    let closed = terminal_access_adjacency(&grid, &[4], 1)?;
    check("grid-closed-centre", fmt(bfs_distance(&closed, 3)?), "1 2 3 0 - 4 1 2 3");
    let closed = terminal_access_adjacency(&path, &[1, 2], 2)?;
    check("path-closed-link", fmt(bfs_distance(&closed, 0)?), "0 - - -");
    Ok(out)
}
