//! CSV loading and writing, and the synthetic scenario generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};

use crate::config::{parse_entries, parse_value};
use crate::error::{Error, Result};
use crate::network::{bfs_distance, shortest_path, Disruption, Graph};
use crate::numeric::stream_rng;
use crate::pipeline::{aggregate_day, rescale_levels, DayCounts, JourneyRecord, TimeWindow};

/// Everything the pipeline reads from a data directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    /// Sorted by day.
    pub days: Vec<DayCounts>,
    pub disruptions: Vec<Disruption>,
    pub window: TimeWindow,
}

impl Dataset {
    pub fn day(&self, day: u32) -> Result<&DayCounts> {
        self.days
            .binary_search_by_key(&day, |d| d.day)
            .map(|i| &self.days[i])
            .map_err(|_| Error::Validation(format!("no journey data for day {day}")))
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn header_index(path: &Path, headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::parse(path, 1, format!("missing column '{name}'")))
}

fn field<T: FromStr>(path: &Path, rec: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec
        .get(idx)
        .ok_or_else(|| Error::parse(path, line, format!("missing field '{name}'")))?;
    raw.parse()
        .map_err(|_| Error::parse(path, line, format!("invalid {name} '{raw}'")))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Edge list with header `u,v`. The node count is one more than the
/// largest id.
pub fn load_graph(path: &Path) -> Result<Graph> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let (iu, iv) = (header_index(path, &headers, "u")?, header_index(path, &headers, "v")?);
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        edges.push((field(path, &rec, iu, "u")?, field(path, &rec, iv, "v")?));
    }
    let n = edges.iter().map(|&(u, v): &(usize, usize)| u.max(v) + 1).max().unwrap_or(0);
    Graph::from_edges(n, &edges).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// Day encoded in a `journeys_<day>.csv` file name.
pub fn day_from_file_name(path: &Path) -> Option<u32> {
    path.file_stem()?
        .to_str()?
        .strip_prefix("journeys_")?
        .parse()
        .ok()
}

/// Journeys grouped by day. The day comes from a `day` column if present,
/// otherwise from the `journeys_<day>.csv` file name.
pub fn load_journeys(
    path: &Path,
    n_nodes: usize,
    window: TimeWindow,
) -> Result<BTreeMap<u32, Vec<JourneyRecord>>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = ["origin", "destination", "t_entry", "t_exit"]
        .iter()
        .map(|c| header_index(path, &headers, c))
        .collect::<Result<_>>()?;
    let day_col = headers.iter().position(|h| h == "day");
    let file_day = day_from_file_name(path);
    if day_col.is_none() && file_day.is_none() {
        return Err(Error::parse(
            path,
            1,
            "no 'day' column and file name is not journeys_<day>.csv",
        ));
    }
    let mut out: BTreeMap<u32, Vec<JourneyRecord>> = BTreeMap::new();
    if let Some(d) = file_day {
        out.entry(d).or_default();
    }
    for rec in rdr.records() {
        let rec = rec?;
        let j = JourneyRecord {
            origin: field(path, &rec, cols[0], "origin")?,
            destination: field(path, &rec, cols[1], "destination")?,
            t_entry: field(path, &rec, cols[2], "t_entry")?,
            t_exit: field(path, &rec, cols[3], "t_exit")?,
        };
        j.validate(n_nodes, window)
            .map_err(|m| Error::parse(path, line_of(&rec), m))?;
        let day = match day_col {
            Some(c) => field(path, &rec, c, "day")?,
            None => file_day.unwrap_or_default(),
        };
        out.entry(day).or_default().push(j);
    }
    Ok(out)
}

/// Header `day,t_start,t_end,roi`, roi as `;`-separated station ids.
pub fn load_disruptions(path: &Path) -> Result<Vec<Disruption>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = ["day", "t_start", "t_end", "roi"]
        .iter()
        .map(|c| header_index(path, &headers, c))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let roi_raw: String = field(path, &rec, cols[3], "roi")?;
        let roi = roi_raw
            .split(';')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(path, line, format!("invalid roi id '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut seen = BTreeSet::new();
        if let Some(dup) = roi.iter().find(|r| !seen.insert(**r)) {
            return Err(Error::parse(path, line, format!("station {dup} repeated in roi")));
        }
        out.push(Disruption {
            day: field(path, &rec, cols[0], "day")?,
            t_start: field(path, &rec, cols[1], "t_start")?,
            t_end: field(path, &rec, cols[2], "t_end")?,
            roi,
        });
    }
    Ok(out)
}

/// Read `graph.csv`, every `journeys*.csv` and `disruptions.csv` from `dir`.
pub fn load_dataset(dir: &Path, window: TimeWindow) -> Result<Dataset> {
    let graph = load_graph(&dir.join("graph.csv"))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("journeys") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!("no journeys*.csv files in {}", dir.display())));
    }
    let mut by_day: BTreeMap<u32, Vec<JourneyRecord>> = BTreeMap::new();
    for f in &files {
        for (day, js) in load_journeys(f, graph.n_nodes(), window)? {
            by_day.entry(day).or_default().extend(js);
        }
    }
    let days = by_day
        .into_iter()
        .map(|(d, js)| aggregate_day(d, &js, graph.n_nodes(), window))
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join("disruptions.csv");
    let disruptions = load_disruptions(&path)?;
    let mut ids = BTreeSet::new();
    for (i, z) in disruptions.iter().enumerate() {
        z.validate(graph.n_nodes(), window.t_min, window.t_max)
            .map_err(|e| Error::parse(&path, i as u64 + 2, e.to_string()))?;
        if !ids.insert(z.id()) {
            return Err(Error::parse(&path, i as u64 + 2, "duplicate disruption"));
        }
    }
    Ok(Dataset {
        graph,
        days,
        disruptions,
        window,
    })
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub fn write_graph(path: &Path, g: &Graph) -> Result<()> {
    let mut s = String::from("u,v\n");
    for (u, v) in g.edges() {
        s.push_str(&format!("{u},{v}\n"));
    }
    write(path, &s)
}

pub fn write_journeys(path: &Path, journeys: &[JourneyRecord]) -> Result<()> {
    let mut s = String::from("origin,destination,t_entry,t_exit\n");
    for j in journeys {
        s.push_str(&format!("{},{},{},{}\n", j.origin, j.destination, j.t_entry, j.t_exit));
    }
    write(path, &s)
}

fn join_ids<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_disruptions(path: &Path, disruptions: &[Disruption]) -> Result<()> {
    let mut s = String::from("day,t_start,t_end,roi\n");
    for z in disruptions {
        s.push_str(&format!("{},{},{},{}\n", z.day, z.t_start, z.t_end, join_ids(&z.roi)));
    }
    write(path, &s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Topology {
    Path,
    Cycle,
    Grid,
    ErdosRenyi(f64),
}

impl FromStr for Topology {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(Self::Path),
            "cycle" => Ok(Self::Cycle),
            "grid" => Ok(Self::Grid),
            "erdos-renyi" => Ok(Self::ErdosRenyi(0.1)),
            other => Err(Error::InvalidParameter(format!(
                "unknown topology '{other}' (expected path, cycle, grid or erdos-renyi)"
            ))),
        }
    }
}

/// How disruption days are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationMode {
    /// A fixed fraction of through-traffic is re-destined to the ROI.
    Recovery,
    /// The fraction is shocked by a lognormal factor per disruption.
    Misspecified,
}

impl FromStr for PerturbationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recovery" => Ok(Self::Recovery),
            "misspecified" => Ok(Self::Misspecified),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode '{other}' (expected recovery or misspecified)"
            ))),
        }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub topology: Topology,
    pub nodes: usize,
    /// Grid width; defaults to the largest divisor of `nodes` not above its
    /// square root.
    pub grid_width: Option<usize>,
    pub days: usize,
    pub disruptions: usize,
    /// Links closed per disruption; 0 closes a single station.
    pub roi_links: usize,
    /// Mean daily journeys per origin-destination pair, before the spread.
    pub base_rate: f64,
    /// Log-scale standard deviation of the per-pair rate multiplier.
    pub rate_spread: f64,
    /// Fraction of through-traffic re-destined to the ROI.
    pub phi: f64,
    pub mode: PerturbationMode,
    pub shock_sigma: f64,
    pub window_len: u32,
    pub window: TimeWindow,
    pub minutes_per_hop: u32,
    /// Basis levels and span used to express the ground truth as weights.
    pub levels: usize,
    pub span: f64,
    pub seed: u64,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        Self {
            topology: Topology::Grid,
            nodes: 30,
            grid_width: None,
            days: 30,
            disruptions: 12,
            roi_links: 1,
            base_rate: 2.0,
            rate_spread: 0.5,
            phi: 0.8,
            mode: PerturbationMode::Recovery,
            shock_sigma: 0.5,
            window_len: 120,
            window: TimeWindow::default(),
            minutes_per_hop: 2,
            levels: 5,
            span: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticScenario {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut s = Self::default();
        let mut edge_prob = None;
        for e in parse_entries(text, path)? {
            match e.key.as_str() {
                "topology" => s.topology = parse_value(&e, path)?,
                "nodes" => s.nodes = parse_value(&e, path)?,
                "grid_width" => s.grid_width = Some(parse_value(&e, path)?),
                "edge_prob" => edge_prob = Some(parse_value::<f64>(&e, path)?),
                "days" => s.days = parse_value(&e, path)?,
                "disruptions" => s.disruptions = parse_value(&e, path)?,
                "roi_links" => s.roi_links = parse_value(&e, path)?,
                "base_rate" => s.base_rate = parse_value(&e, path)?,
                "rate_spread" => s.rate_spread = parse_value(&e, path)?,
                "phi" => s.phi = parse_value(&e, path)?,
                "mode" => s.mode = parse_value(&e, path)?,
                "shock_sigma" => s.shock_sigma = parse_value(&e, path)?,
                "window_len" => s.window_len = parse_value(&e, path)?,
                "t_min" => s.window.t_min = parse_value(&e, path)?,
                "t_max" => s.window.t_max = parse_value(&e, path)?,
                "minutes_per_hop" => s.minutes_per_hop = parse_value(&e, path)?,
                "levels" => s.levels = parse_value(&e, path)?,
                "span" => s.span = parse_value(&e, path)?,
                "seed" => s.seed = parse_value(&e, path)?,
                other => return Err(Error::parse(path, e.line, format!("unknown key '{other}'"))),
            }
        }
        if let (Topology::ErdosRenyi(_), Some(p)) = (s.topology, edge_prob) {
            s.topology = Topology::ErdosRenyi(p);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.nodes < 2 {
            return bad("scenario needs at least 2 nodes");
        }
        if self.days < 2 {
            return bad("scenario needs at least 2 days");
        }
        if self.disruptions > self.days {
            return bad("at most one disruption per day");
        }
        if !(self.base_rate >= 0.0 && self.base_rate.is_finite()) {
            return bad("base_rate must be non-negative");
        }
        if !(self.rate_spread >= 0.0 && self.shock_sigma >= 0.0) {
            return bad("rate_spread and shock_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return bad("phi must lie in [0, 1]");
        }
        if let Topology::ErdosRenyi(p) = self.topology {
            if !(0.0..=1.0).contains(&p) {
                return bad("edge_prob must lie in [0, 1]");
            }
        }
        if self.window.t_min > self.window.t_max {
            return bad("t_min after t_max");
        }
        if self.window_len == 0 || self.window_len > self.window.t_max - self.window.t_min + 1 {
            return bad("window_len must fit inside [t_min, t_max]");
        }
        if self.levels < 2 || self.span.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
            return bad("levels must be at least 2 and span above 1");
        }
        Ok(())
    }
}

/// Known perturbation behind one synthetic disruption.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub disruption: Disruption,
    /// Expected natural exits at each ROI station during the window.
    pub natural_mean: Vec<f64>,
    /// Expected journeys in the window whose route first meets the ROI at
    /// each station without ending inside the ROI.
    pub through_mean: Vec<f64>,
    /// Expected disruption-day exits over natural exits, per station.
    pub lambda_star: Vec<f64>,
    /// Weights on the rescaled-marginal basis (level-major), or empty when
    /// the scenario has no recovery target.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub graph: Graph,
    /// Journeys of day `d` at index `d`.
    pub journeys: Vec<Vec<JourneyRecord>>,
    pub disruptions: Vec<Disruption>,
    pub ground_truth: Vec<GroundTruth>,
    /// Number of journeys drawn for each day before perturbation.
    pub drawn: Vec<usize>,
}

impl SyntheticData {
    pub fn to_dataset(&self, window: TimeWindow) -> Result<Dataset> {
        let days = self
            .journeys
            .iter()
            .enumerate()
            .map(|(d, js)| aggregate_day(d as u32, js, self.graph.n_nodes(), window))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            graph: self.graph.clone(),
            days,
            disruptions: self.disruptions.clone(),
            window,
        })
    }

    /// Write `graph.csv`, `journeys_<day>.csv`, `disruptions.csv` and
    /// `ground_truth.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_graph(&dir.join("graph.csv"), &self.graph)?;
        let width = self.journeys.len().saturating_sub(1).to_string().len();
        for (d, js) in self.journeys.iter().enumerate() {
            write_journeys(&dir.join(format!("journeys_{d:0width$}.csv")), js)?;
        }
        write_disruptions(&dir.join("disruptions.csv"), &self.disruptions)?;
        write_ground_truth(&dir.join("ground_truth.csv"), &self.ground_truth)
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

pub fn write_ground_truth(path: &Path, truth: &[GroundTruth]) -> Result<()> {
    let mut s = String::from("day,t_start,t_end,roi,natural_mean,through_mean,lambda_star,weights\n");
    for g in truth {
        let z = &g.disruption;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            z.day,
            z.t_start,
            z.t_end,
            join_ids(&z.roi),
            fmt_list(&g.natural_mean),
            fmt_list(&g.through_mean),
            fmt_list(&g.lambda_star),
            fmt_list(&g.weights)
        ));
    }
    write(path, &s)
}

pub fn build_topology(s: &SyntheticScenario) -> Result<Graph> {
    let n = s.nodes;
    let mut edges = Vec::new();
    match s.topology {
        Topology::Path => edges.extend((0..n - 1).map(|i| (i, i + 1))),
        Topology::Cycle => {
            edges.extend((0..n - 1).map(|i| (i, i + 1)));
            if n > 2 {
                edges.push((0, n - 1));
            }
        }
        Topology::Grid => {
            let w = match s.grid_width {
                Some(w) => w,
                None => (1..=n).filter(|w| n.is_multiple_of(*w) && w * w <= n).max().unwrap_or(1),
            };
            if w == 0 || !n.is_multiple_of(w) {
                return Err(Error::InvalidParameter(format!(
                    "grid width {w} does not divide {n} nodes"
                )));
            }
            for i in 0..n {
                if (i + 1) % w != 0 {
                    edges.push((i, i + 1));
                }
                if i + w < n {
                    edges.push((i, i + w));
                }
            }
        }
        Topology::ErdosRenyi(p) => {
            let mut rng = stream_rng(s.seed, STREAM_TOPOLOGY);
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((u, v));
                    }
                }
            }
        }
    }
    Graph::from_edges(n, &edges)
}

const STREAM_TOPOLOGY: u64 = 1;
const STREAM_RATES: u64 = 2;
const STREAM_DISRUPTIONS: u64 = 3;
const STREAM_DAYS: u64 = 1 << 32;
const STREAM_PERTURB: u64 = 2 << 32;

/// Fraction of uniformly drawn exit minutes, over `[t_min + travel, t_max]`,
/// that fall inside `[t_start, t_end]`.
pub fn window_probability(window: TimeWindow, travel: u32, t_start: u32, t_end: u32) -> f64 {
    let lo = window.t_min + travel;
    if lo > window.t_max {
        return 0.0;
    }
    let a = t_start.max(lo);
    let b = t_end.min(window.t_max);
    if a > b {
        return 0.0;
    }
    f64::from(b - a + 1) / f64::from(window.t_max - lo + 1)
}

struct Routes {
    /// `paths[o][d]`, lowest-id shortest path.
    paths: Vec<Vec<Vec<usize>>>,
}

impl Routes {
    fn new(g: &Graph) -> Result<Self> {
        let n = g.n_nodes();
        let mut paths = vec![vec![Vec::new(); n]; n];
        for d in 0..n {
            let dist = bfs_distance(g, d)?;
            for o in 0..n {
                if dist[o].is_none() {
                    return Err(Error::Validation(format!(
                        "demand pair {o}-{d} is disconnected in the generated network"
                    )));
                }
                paths[o][d] = shortest_path(g, o, d)?.unwrap_or_default();
            }
        }
        Ok(Self { paths })
    }

    fn hops(&self, o: usize, d: usize) -> u32 {
        (self.paths[o][d].len() - 1) as u32
    }

    /// First ROI station strictly inside the route, when the destination
    /// is outside the ROI.
    fn first_roi_hit(&self, o: usize, d: usize, roi: &[usize]) -> Option<usize> {
        if roi.contains(&d) {
            return None;
        }
        let p = &self.paths[o][d];
        p[1..p.len().saturating_sub(1)].iter().copied().find(|s| roi.contains(s))
    }
}

/// Draw a synthetic dataset. Natural days, the per-pair rates, disruption
/// features and each day's perturbation use separate generator streams.
pub fn generate_synthetic(s: &SyntheticScenario) -> Result<SyntheticData> {
    s.validate()?;
    let graph = build_topology(s)?;
    let routes = Routes::new(&graph)?;
    let n = graph.n_nodes();

    let mut rate_rng = stream_rng(s.seed, STREAM_RATES);
    let spread = LogNormal::new(0.0, s.rate_spread).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rates = vec![vec![0.0; n]; n];
    for (o, row) in rates.iter_mut().enumerate() {
        for (d, r) in row.iter_mut().enumerate() {
            if o != d {
                *r = s.base_rate * spread.sample(&mut rate_rng);
            }
        }
    }
    let travel = |o: usize, d: usize| routes.hops(o, d) * s.minutes_per_hop;
    for o in 0..n {
        for d in 0..n {
            if o != d && s.window.t_min + travel(o, d) > s.window.t_max {
                return Err(Error::InvalidParameter(format!(
                    "journey {o}-{d} takes longer than the observation window"
                )));
            }
        }
    }

    let disruptions = draw_disruptions(s, &graph)?;
    let mut journeys = Vec::with_capacity(s.days);
    let mut drawn = Vec::with_capacity(s.days);
    for day in 0..s.days {
        let mut rng = stream_rng(s.seed, STREAM_DAYS + day as u64);
        let mut js = Vec::new();
        for o in 0..n {
            for d in 0..n {
                if o == d || rates[o][d] <= 0.0 {
                    continue;
                }
                let count = Poisson::new(rates[o][d])
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?
                    .sample(&mut rng) as u64;
                let tt = travel(o, d);
                for _ in 0..count {
                    let t_exit = rng.random_range(s.window.t_min + tt..=s.window.t_max);
                    js.push(JourneyRecord {
                        origin: o,
                        destination: d,
                        t_entry: t_exit - tt,
                        t_exit,
                    });
                }
            }
        }
        drawn.push(js.len());
        journeys.push(js);
    }

    let mut truth = Vec::with_capacity(disruptions.len());
    for (k, z) in disruptions.iter().enumerate() {
        let mut rng = stream_rng(s.seed, STREAM_PERTURB + k as u64);
        let phi = match s.mode {
            PerturbationMode::Recovery => s.phi,
            PerturbationMode::Misspecified => {
                let shock = LogNormal::new(0.0, s.shock_sigma)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?
                    .sample(&mut rng);
                (s.phi * shock).min(1.0)
            }
        };
        for j in journeys[z.day as usize].iter_mut() {
            if j.t_exit < z.t_start || j.t_exit > z.t_end {
                continue;
            }
            if let Some(hit) = routes.first_roi_hit(j.origin, j.destination, &z.roi) {
                if rng.random::<f64>() < phi {
                    j.destination = hit;
                }
            }
        }
        truth.push(ground_truth(s, z, &rates, &routes, &travel));
    }
    for js in journeys.iter_mut() {
        js.sort_by_key(|j| (j.t_exit, j.origin, j.destination, j.t_entry));
    }
    Ok(SyntheticData {
        graph,
        journeys,
        disruptions,
        ground_truth: truth,
        drawn,
    })
}

fn draw_disruptions(s: &SyntheticScenario, g: &Graph) -> Result<Vec<Disruption>> {
    let mut rng = stream_rng(s.seed, STREAM_DISRUPTIONS);
    let mut days: Vec<u32> = (0..s.days as u32).collect();
    days.shuffle(&mut rng);
    let mut days: Vec<u32> = days.into_iter().take(s.disruptions).collect();
    days.sort_unstable();
    let edges = g.edges();
    let mut out = Vec::with_capacity(days.len());
    for day in days {
        let roi = if s.roi_links == 0 || edges.is_empty() {
            vec![rng.random_range(0..g.n_nodes())]
        } else {
            let (a, b) = edges[rng.random_range(0..edges.len())];
            let mut roi = BTreeSet::from([a, b]);
            // further links share the first endpoint
            let mut extra: Vec<usize> = g.neighbors(a).iter().copied().filter(|v| *v != b).collect();
            extra.shuffle(&mut rng);
            roi.extend(extra.into_iter().take(s.roi_links - 1));
            roi.into_iter().collect()
        };
        let t_start = rng.random_range(s.window.t_min..=s.window.t_max + 1 - s.window_len);
        out.push(Disruption {
            day,
            t_start,
            t_end: t_start + s.window_len - 1,
            roi,
        });
    }
    Ok(out)
}

fn ground_truth(
    s: &SyntheticScenario,
    z: &Disruption,
    rates: &[Vec<f64>],
    routes: &Routes,
    travel: &dyn Fn(usize, usize) -> u32,
) -> GroundTruth {
    let n = rates.len();
    let m = z.roi.len();
    let mut natural = vec![0.0; m];
    let mut through = vec![0.0; m];
    for o in 0..n {
        for d in 0..n {
            if o == d {
                continue;
            }
            let mass = rates[o][d] * window_probability(s.window, travel(o, d), z.t_start, z.t_end);
            if let Some(j) = z.roi.iter().position(|&r| r == d) {
                natural[j] += mass;
            }
            if let Some(hit) = routes.first_roi_hit(o, d, &z.roi) {
                let j = z.roi.iter().position(|&r| r == hit).expect("hit is in roi");
                through[j] += mass;
            }
        }
    }
    let lambda_star: Vec<f64> = natural
        .iter()
        .zip(&through)
        .map(|(a, b)| if *a > 0.0 { 1.0 + s.phi * b / a } else { f64::NAN })
        .collect();
    let weights = match s.mode {
        PerturbationMode::Misspecified => Vec::new(),
        PerturbationMode::Recovery => implied_weights(s.levels, s.span, &natural, &lambda_star),
    };
    GroundTruth {
        disruption: z.clone(),
        natural_mean: natural,
        through_mean: through,
        lambda_star,
        weights,
    }
}

/// Split each station's `lambda_star` between the two bracketing levels of
/// the rescaled basis; each station carries total weight `1 / m`.
pub fn implied_weights(levels: usize, span: f64, natural_mean: &[f64], lambda_star: &[f64]) -> Vec<f64> {
    let m = natural_mean.len();
    let max_mean = natural_mean.iter().copied().fold(0.0, f64::max);
    let mut w = vec![0.0; levels * m];
    if max_mean <= 0.0 {
        return w;
    }
    let lambdas = rescale_levels(levels, span, max_mean);
    let share = 1.0 / m as f64;
    for (j, &target) in lambda_star.iter().enumerate() {
        if !target.is_finite() {
            continue;
        }
        let r = lambdas.iter().rposition(|&l| l <= target).unwrap_or(0);
        if r + 1 >= levels {
            w[(levels - 1) * m + j] += share;
            continue;
        }
        let frac = (target - lambdas[r]) / (lambdas[r + 1] - lambdas[r]);
        w[r * m + j] += share * (1.0 - frac);
        w[(r + 1) * m + j] += share * frac;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{embed, median_heuristic, mmd2, KernelConfig, KernelFamily, SampleSet};
    use crate::pipeline::roi_exit_vector;
    use tempfile::tempdir;

    #[test]
    fn journey_rows_parse() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("journeys_4.csv");
        fs::write(&p, "origin,destination,t_entry,t_exit\n").unwrap();
        let w = TimeWindow::default();
        let days = load_journeys(&p, 10, w).unwrap();
        assert_eq!(days[&4], vec![]);
        fs::write(&p, "origin,destination,t_entry,t_exit\n3,7,510,530\n").unwrap();
        let days = load_journeys(&p, 10, w).unwrap();
        assert_eq!(
            days[&4],
            vec![JourneyRecord { origin: 3, destination: 7, t_entry: 510, t_exit: 530 }]
        );
    }

    #[test]
    fn journey_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("journeys_1.csv");
        let w = TimeWindow::default();
        fs::write(&p, "origin,destination,t_entry,t_exit\n1,2,10,20\n3,7,530,510\n").unwrap();
        let e = load_journeys(&p, 10, w).unwrap_err();
        assert!(e.to_string().contains(":3:"), "{e}");
        fs::write(&p, "origin,destination,t_entry,t_exit\n1,x,10,20\n").unwrap();
        assert!(load_journeys(&p, 10, w).unwrap_err().to_string().contains(":2:"));
        fs::write(&p, "origin,destination,t_entry,t_exit\n1,12,10,20\n").unwrap();
        assert!(load_journeys(&p, 10, w).is_err());
        fs::write(&p, "origin,destination,t_exit\n").unwrap();
        assert!(load_journeys(&p, 10, w).is_err());
    }

    #[test]
    fn journeys_with_day_column() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("journeys.csv");
        fs::write(&p, "day,origin,destination,t_entry,t_exit\n2,0,1,5,6\n0,1,0,5,9\n2,1,1,3,3\n").unwrap();
        let days = load_journeys(&p, 3, TimeWindow::default()).unwrap();
        assert_eq!(days.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(days[&2].len(), 2);
        let bare = dir.path().join("trips.csv");
        fs::write(&bare, "origin,destination,t_entry,t_exit\n").unwrap();
        assert!(load_journeys(&bare, 3, TimeWindow::default()).is_err());
    }

    #[test]
    fn disruption_rows_parse() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("disruptions.csv");
        fs::write(&p, "day,t_start,t_end,roi\n2,540,600,5;6\n").unwrap();
        assert_eq!(
            load_disruptions(&p).unwrap(),
            vec![Disruption { day: 2, t_start: 540, t_end: 600, roi: vec![5, 6] }]
        );
        fs::write(&p, "day,t_start,t_end,roi\n2,540,600,5;5\n").unwrap();
        assert!(load_disruptions(&p).is_err());
        let mut many = String::from("day,t_start,t_end,roi\n");
        for k in 0..72 {
            many.push_str(&format!("{},{},{},{};{}\n", k % 35, 480 + k, 560 + k, k % 269, (k + 1) % 269));
        }
        fs::write(&p, many).unwrap();
        assert_eq!(load_disruptions(&p).unwrap().len(), 72);
    }

    #[test]
    fn graph_file_validation() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("graph.csv");
        fs::write(&p, "u,v\n0,1\n1,2\n").unwrap();
        assert_eq!(load_graph(&p).unwrap().n_edges(), 2);
        fs::write(&p, "u,v\n0,1\n1,0\n").unwrap();
        assert!(load_graph(&p).is_err());
        fs::write(&p, "u,v\n1,1\n").unwrap();
        assert!(load_graph(&p).is_err());
    }

    #[test]
    fn topologies() {
        let mut s = SyntheticScenario { nodes: 6, ..Default::default() };
        s.topology = Topology::Grid;
        assert_eq!(build_topology(&s).unwrap().n_edges(), 7);
        s.topology = Topology::Cycle;
        assert_eq!(build_topology(&s).unwrap().n_edges(), 6);
        s.topology = Topology::Path;
        assert_eq!(build_topology(&s).unwrap().n_edges(), 5);
        let grid30 = build_topology(&SyntheticScenario::default()).unwrap();
        // 5 x 6 grid
        assert_eq!(grid30.n_edges(), 5 * 5 + 4 * 6);
        assert!("hexagon".parse::<Topology>().is_err());
    }

    #[test]
    fn scenario_file_parsing() {
        let p = Path::new("s.txt");
        let s = SyntheticScenario::parse("topology = erdos-renyi\nedge_prob = 0.3\nnodes = 8\nseed = 4\n", p).unwrap();
        assert_eq!(s.topology, Topology::ErdosRenyi(0.3));
        assert!(SyntheticScenario::parse("phi = 2\n", p).is_err());
        assert!(SyntheticScenario::parse("shape = grid\n", p).is_err());
        assert!(SyntheticScenario::parse("days = 1\n", p).is_err());
    }

    fn small() -> SyntheticScenario {
        SyntheticScenario {
            nodes: 12,
            days: 8,
            disruptions: 4,
            base_rate: 1.0,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn generation_conserves_journeys() {
        let data = generate_synthetic(&small()).unwrap();
        for (d, js) in data.journeys.iter().enumerate() {
            assert_eq!(js.len(), data.drawn[d]);
        }
        assert_eq!(data.disruptions.len(), 4);
        assert_eq!(data.ground_truth.len(), 4);
        for g in &data.ground_truth {
            assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(g.lambda_star.iter().all(|&l| l >= 1.0));
        }
    }

    #[test]
    fn round_trip_through_files() {
        let s = small();
        let data = generate_synthetic(&s).unwrap();
        let dir = tempdir().unwrap();
        data.write(dir.path()).unwrap();
        let loaded = load_dataset(dir.path(), s.window).unwrap();
        assert_eq!(loaded, data.to_dataset(s.window).unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small();
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        generate_synthetic(&s).unwrap().write(a.path()).unwrap();
        generate_synthetic(&s).unwrap().write(b.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 8 + 3);
        for n in names {
            assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap());
        }
    }

    #[test]
    fn disconnected_network_is_rejected() {
        let s = SyntheticScenario {
            topology: Topology::ErdosRenyi(0.0),
            nodes: 5,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn no_perturbation_keeps_natural_regime() {
        // with phi = 0 the disruption days are ordinary draws; compare the
        // ROI exits of disruption days with those of other days
        let s = SyntheticScenario {
            phi: 0.0,
            days: 40,
            disruptions: 20,
            seed: 11,
            base_rate: 3.0,
            ..Default::default()
        };
        let data = generate_synthetic(&s).unwrap();
        let ds = data.to_dataset(s.window).unwrap();
        let z_days: BTreeSet<u32> = data.disruptions.iter().map(|z| z.day).collect();
        let mut shifted = Vec::new();
        let mut other = Vec::new();
        for z in &data.disruptions {
            for day in &ds.days {
                let zz = Disruption { day: day.day, ..z.clone() };
                let total: u64 = roi_exit_vector(day, &zz).unwrap().iter().sum();
                let mean: f64 = data.ground_truth.iter().find(|g| g.disruption == *z).unwrap().natural_mean.iter().sum();
                let v = total as f64 / mean.max(1e-9);
                if z_days.contains(&day.day) { shifted.push(v) } else { other.push(v) }
            }
        }
        let a = SampleSet::from_scalars(&shifted).unwrap();
        let b = SampleSet::from_scalars(&other).unwrap();
        let rho = median_heuristic(&SampleSet::concat(&[&a, &b]).unwrap(), KernelFamily::Gaussian).unwrap();
        let k = KernelConfig::gaussian(rho).unwrap();
        assert!(mmd2(&embed(k, a), &embed(k, b)).unwrap() < 0.01);
    }

    #[test]
    fn full_rerouting_on_a_path() {
        // path 0-1-2 with station 1 closed: the through pairs 0-2 and 2-0
        // have the same rates as the pairs ending at 1, so lambda* follows
        // from the window probabilities alone
        let s = SyntheticScenario {
            topology: Topology::Path,
            nodes: 3,
            days: 400,
            disruptions: 200,
            roi_links: 0,
            base_rate: 20.0,
            rate_spread: 0.0,
            phi: 1.0,
            window_len: 600,
            minutes_per_hop: 30,
            seed: 2,
            ..Default::default()
        };
        let data = generate_synthetic(&s).unwrap();
        let ds = data.to_dataset(s.window).unwrap();
        let mut ratios = Vec::new();
        for (z, g) in data.disruptions.iter().zip(&data.ground_truth) {
            let w = s.window;
            let p1 = window_probability(w, 30, z.t_start, z.t_end);
            let p2 = window_probability(w, 60, z.t_start, z.t_end);
            let (natural, through) = if z.roi == vec![1] {
                (2.0 * 20.0 * p1, 2.0 * 20.0 * p2)
            } else {
                // an end station has no through-traffic
                (20.0 * (p1 + p2), 0.0)
            };
            assert!((g.natural_mean[0] - natural).abs() < 1e-9);
            assert!((g.through_mean[0] - through).abs() < 1e-9);
            assert!((g.lambda_star[0] - (1.0 + through / natural)).abs() < 1e-12);
            if z.roi == vec![1] {
                let y = roi_exit_vector(ds.day(z.day).unwrap(), z).unwrap()[0] as f64;
                ratios.push(y / g.natural_mean[0] / g.lambda_star[0]);
            }
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(ratios.len() > 20);
        assert!((mean - 1.0).abs() < 0.05, "mean ratio {mean}");
    }

    #[test]
    fn implied_weights_interpolate() {
        // levels 1, 7, 13 for max mean 4, span 3, R = 3
        let w = implied_weights(3, 3.0, &[4.0], &[4.0]);
        assert_eq!(w, vec![0.5, 0.5, 0.0]);
        let w = implied_weights(3, 3.0, &[4.0, 2.0], &[1.0, 20.0]);
        assert_eq!(w, vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.5]);
    }
}
