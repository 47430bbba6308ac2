//! Station graph, hop distances and disruption scoring.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Undirected, unweighted graph over stations `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    adjacency: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Build from an edge list. Self loops and repeated edges are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![false; n * n];
        for &(u, v) in edges {
            for x in [u, v] {
                if x >= n {
                    return Err(Error::InvalidNode(x));
                }
            }
            if u == v {
                return Err(Error::Validation(format!("self edge at node {u}")));
            }
            if adjacency[u * n + v] {
                return Err(Error::Validation(format!("duplicate edge {u}-{v}")));
            }
            adjacency[u * n + v] = true;
            adjacency[v * n + u] = true;
        }
        Ok(Self::from_mask(n, adjacency))
    }

    /// Build from a dense 0/1 matrix given row by row.
    pub fn from_adjacency(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut adjacency = vec![false; n * n];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            for (j, &a) in row.iter().enumerate() {
                if a > 1 {
                    return Err(Error::Validation(format!("adjacency entry ({i},{j}) is {a}")));
                }
                adjacency[i * n + j] = a == 1;
            }
        }
        for i in 0..n {
            if adjacency[i * n + i] {
                return Err(Error::Validation(format!("self edge at node {i}")));
            }
            for j in 0..i {
                if adjacency[i * n + j] != adjacency[j * n + i] {
                    return Err(Error::Validation(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self::from_mask(n, adjacency))
    }

    fn from_mask(n: usize, adjacency: Vec<bool>) -> Self {
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| adjacency[i * n + j]).collect())
            .collect();
        Self {
            n,
            adjacency,
            neighbors,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && v < self.n && self.adjacency[u * self.n + v]
    }

    /// Neighbours in increasing id order.
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    /// Edges `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|u| self.neighbors[u].iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn check_node(&self, u: usize) -> Result<()> {
        if u < self.n {
            Ok(())
        } else {
            Err(Error::InvalidNode(u))
        }
    }
}

/// Hop distances from `source`; `None` marks unreachable nodes.
pub fn bfs_distance(g: &Graph, source: usize) -> Result<Vec<Option<u32>>> {
    g.check_node(source)?;
    let mut dist = vec![None; g.n];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in &g.neighbors[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// One shortest path from `source` to `target` (inclusive), preferring the
/// lowest-id predecessor at every step. `None` when unreachable.
pub fn shortest_path(g: &Graph, source: usize, target: usize) -> Result<Option<Vec<usize>>> {
    g.check_node(target)?;
    let from_target = bfs_distance(g, target)?;
    let Some(mut remaining) = from_target[source] else {
        return Ok(None);
    };
    let mut path = vec![source];
    let mut u = source;
    while remaining > 0 {
        // the lowest-id neighbour one step closer to the target
        u = *g.neighbors[u]
            .iter()
            .find(|&&v| from_target[v] == Some(remaining - 1))
            .expect("BFS layers are consistent");
        path.push(u);
        remaining -= 1;
    }
    Ok(Some(path))
}

/// Distance matrix, row `s` is [`bfs_distance`] from `s`.
pub fn all_pairs(g: &Graph) -> Vec<Vec<Option<u32>>> {
    (0..g.n)
        .into_par_iter()
        .map(|s| bfs_distance(g, s).expect("source in range"))
        .collect()
}

/// Zero every row and column indexed by `roi`.
pub fn disrupted_adjacency(g: &Graph, roi: &[usize]) -> Result<Graph> {
    for &r in roi {
        g.check_node(r)?;
    }
    let n = g.n;
    let mut adjacency = g.adjacency.clone();
    for &r in roi {
        for j in 0..n {
            adjacency[r * n + j] = false;
            adjacency[j * n + r] = false;
        }
    }
    Ok(Graph::from_mask(n, adjacency))
}

/// Disrupted graph used to reach station `target` inside the ROI: all other
/// ROI stations are removed, `target` keeps its links to stations outside
/// the ROI.
pub fn terminal_access_adjacency(g: &Graph, roi: &[usize], target: usize) -> Result<Graph> {
    g.check_node(target)?;
    let others: Vec<usize> = roi.iter().copied().filter(|&r| r != target).collect();
    disrupted_adjacency(g, &others)
}

/// Which ratio the detour score uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GConvention {
    /// `1 - dist_A / dist_disrupted`, in `[0, 1]`; disconnection gives 1.
    #[default]
    Inverted,
    /// `1 - dist_disrupted / dist_A`, at most 0; disconnection gives `-inf`.
    Direct,
}

impl FromStr for GConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverted" => Ok(Self::Inverted),
            "direct" => Ok(Self::Direct),
            other => Err(Error::InvalidParameter(format!(
                "unknown g convention '{other}' (expected inverted or direct)"
            ))),
        }
    }
}

impl fmt::Display for GConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Inverted => "inverted",
            Self::Direct => "direct",
        })
    }
}

/// Score from two hop distances, `natural` being finite and positive.
pub fn detour_from_distances(natural: u32, disrupted: Option<u32>, convention: GConvention) -> f64 {
    let a = f64::from(natural);
    match (convention, disrupted) {
        (GConvention::Inverted, None) => 1.0,
        (GConvention::Inverted, Some(d)) => 1.0 - a / f64::from(d),
        (GConvention::Direct, None) => f64::NEG_INFINITY,
        (GConvention::Direct, Some(d)) => 1.0 - f64::from(d) / a,
    }
}

/// Relative lengthening of the `o`-`d` path caused by the disruption.
pub fn detour_score(
    g: &Graph,
    g_disrupted: &Graph,
    o: usize,
    d: usize,
    convention: GConvention,
) -> Result<f64> {
    g.check_node(o)?;
    g.check_node(d)?;
    if g_disrupted.n_nodes() != g.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: g.n_nodes(),
            found: g_disrupted.n_nodes(),
        });
    }
    if o == d {
        return Err(Error::InvalidParameter(format!(
            "detour score needs distinct stations, got {o} twice"
        )));
    }
    let natural = bfs_distance(g, o)?[d].ok_or(Error::Disconnected(o, d))?;
    let disrupted = bfs_distance(g_disrupted, o)?[d];
    Ok(detour_from_distances(natural, disrupted, convention))
}

/// `detour_score <= xi`.
pub fn feasible(
    o: usize,
    d: usize,
    g: &Graph,
    g_disrupted: &Graph,
    xi: f64,
    convention: GConvention,
) -> Result<bool> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::InvalidParameter(format!("xi must be positive, got {xi}")));
    }
    Ok(detour_score(g, g_disrupted, o, d, convention)? <= xi)
}

/// A disruption event: day index, closure window in minutes and the stations
/// of the region of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disruption {
    pub day: u32,
    pub t_start: u32,
    pub t_end: u32,
    pub roi: Vec<usize>,
}

impl Disruption {
    pub fn validate(&self, n_nodes: usize, t_min: u32, t_max: u32) -> Result<()> {
        if self.t_start > self.t_end {
            return Err(Error::Validation(format!(
                "disruption on day {}: t_start {} after t_end {}",
                self.day, self.t_start, self.t_end
            )));
        }
        if self.t_start < t_min || self.t_end > t_max {
            return Err(Error::Validation(format!(
                "disruption on day {}: window [{}, {}] outside [{t_min}, {t_max}]",
                self.day, self.t_start, self.t_end
            )));
        }
        if self.roi.is_empty() {
            return Err(Error::Validation(format!("disruption on day {}: empty ROI", self.day)));
        }
        let mut seen = BTreeSet::new();
        for &r in &self.roi {
            if r >= n_nodes {
                return Err(Error::InvalidNode(r));
            }
            if !seen.insert(r) {
                return Err(Error::Validation(format!(
                    "disruption on day {}: station {r} repeated in ROI",
                    self.day
                )));
            }
        }
        Ok(())
    }

    /// Stable identifier used in output files.
    pub fn id(&self) -> String {
        let roi: Vec<String> = self.roi.iter().map(|r| r.to_string()).collect();
        format!("d{}_{}_{}_{}", self.day, self.t_start, self.t_end, roi.join("-"))
    }
}
