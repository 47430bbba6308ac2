//! Disruption pipeline: journey aggregation, input variables, training,
//! basis construction and prediction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::embedding::{embed, Embedding, KernelConfig, SampleSet};
use crate::error::{Error, Result};
use crate::network::{
    bfs_distance, detour_from_distances, disrupted_adjacency, terminal_access_adjacency,
    Disruption, GConvention, Graph,
};
use crate::regression::{
    default_ridge, fit_mixture_embeddings_from, predict_embedding, MixtureEmbeddingModel,
    NormalEquations, TrainingPairs,
};
use crate::sampler::{fit_mixture_weights, sample_mixture, Basis, FittedMixture};

/// Observation window in minutes, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub t_min: u32,
    pub t_max: u32,
}

impl Default for TimeWindow {
    fn default() -> Self {
        Self {
            t_min: 0,
            t_max: 1439,
        }
    }
}

impl TimeWindow {
    pub fn contains(&self, t: u32) -> bool {
        (self.t_min..=self.t_max).contains(&t)
    }
}

/// One tap-in/tap-out journey.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JourneyRecord {
    pub origin: usize,
    pub destination: usize,
    pub t_entry: u32,
    pub t_exit: u32,
}

impl JourneyRecord {
    pub fn validate(&self, n_nodes: usize, window: TimeWindow) -> std::result::Result<(), String> {
        if self.origin >= n_nodes {
            return Err(format!("origin {} out of range (network has {n_nodes} stations)", self.origin));
        }
        if self.destination >= n_nodes {
            return Err(format!(
                "destination {} out of range (network has {n_nodes} stations)",
                self.destination
            ));
        }
        if self.t_entry > self.t_exit {
            return Err(format!("t_entry {} after t_exit {}", self.t_entry, self.t_exit));
        }
        if !window.contains(self.t_entry) || !window.contains(self.t_exit) {
            return Err(format!(
                "times [{}, {}] outside observation window [{}, {}]",
                self.t_entry, self.t_exit, window.t_min, window.t_max
            ));
        }
        Ok(())
    }
}

/// Exit counts of one day, keyed internally by (destination, exit minute,
/// origin) so that per-station window sums are range scans.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DayCounts {
    pub day: u32,
    counts: BTreeMap<(usize, u32, usize), u64>,
}

impl DayCounts {
    pub fn new(day: u32) -> Self {
        Self {
            day,
            counts: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, origin: usize, destination: usize, t_exit: u32, count: u64) {
        if count > 0 {
            *self.counts.entry((destination, t_exit, origin)).or_insert(0) += count;
        }
    }

    pub fn get(&self, origin: usize, destination: usize, t_exit: u32) -> u64 {
        self.counts
            .get(&(destination, t_exit, origin))
            .copied()
            .unwrap_or(0)
    }

    /// `((origin, destination, t_exit), count)` for every non-zero entry.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, u32), u64)> + '_ {
        self.counts.iter().map(|(&(d, t, o), &c)| ((o, d, t), c))
    }

    pub fn n_keys(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// `(origin, count)` pairs of exits at `destination` in `[t_start, t_end]`.
    pub fn exits_at(
        &self,
        destination: usize,
        t_start: u32,
        t_end: u32,
    ) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts
            .range((destination, t_start, 0)..=(destination, t_end, usize::MAX))
            .map(|(&(_, _, o), &c)| (o, c))
    }

    pub fn window_total(&self, destination: usize, t_start: u32, t_end: u32) -> u64 {
        self.exits_at(destination, t_start, t_end).map(|(_, c)| c).sum()
    }

    /// Every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            day: self.day,
            counts: self.counts.iter().map(|(&k, &c)| (k, c * factor)).collect(),
        }
    }
}

/// Count journeys by origin, destination and exit minute. Errors name the
/// zero-based index of the first offending record.
pub fn aggregate_day(
    day: u32,
    journeys: &[JourneyRecord],
    n_nodes: usize,
    window: TimeWindow,
) -> Result<DayCounts> {
    let mut dc = DayCounts::new(day);
    for (i, j) in journeys.iter().enumerate() {
        j.validate(n_nodes, window)
            .map_err(|m| Error::Validation(format!("day {day}, record {i}: {m}")))?;
        dc.add(j.origin, j.destination, j.t_exit, 1);
    }
    Ok(dc)
}

/// Exits at each ROI station during the disruption window of its own day.
pub fn roi_exit_vector(dc: &DayCounts, z: &Disruption) -> Result<Vec<u64>> {
    if dc.day != z.day {
        return Err(Error::Validation(format!(
            "counts are for day {}, disruption is on day {}",
            dc.day, z.day
        )));
    }
    Ok(z.roi
        .iter()
        .map(|&d| dc.window_total(d, z.t_start, z.t_end))
        .collect())
}

/// Exit total of the ROI broadcast to every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum X5Mode {
    /// Total divided by the ROI size.
    #[default]
    Mean,
    /// Undivided total.
    Sum,
}

impl FromStr for X5Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(Error::InvalidParameter(format!(
                "unknown x5 mode '{other}' (expected mean or sum)"
            ))),
        }
    }
}

impl fmt::Display for X5Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

/// How origins reach an ROI station in the disrupted network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoiAccess {
    /// The target station keeps its links to stations outside the ROI;
    /// the other ROI stations are removed.
    #[default]
    Terminal,
    /// Every ROI station is removed, including the target.
    Strict,
}

impl FromStr for RoiAccess {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "terminal" => Ok(Self::Terminal),
            "strict" => Ok(Self::Strict),
            other => Err(Error::InvalidParameter(format!(
                "unknown roi access '{other}' (expected terminal or strict)"
            ))),
        }
    }
}

impl fmt::Display for RoiAccess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Terminal => "terminal",
            Self::Strict => "strict",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `1e-8 * trace / dim` of the normal-equation matrix.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceConfig {
    pub xi: f64,
    pub beta: f64,
    /// Number of input distributions per disruption.
    pub inputs: usize,
    /// Number of rescaling levels in the sampling basis.
    pub levels: usize,
    /// Rescale span, `lambda_R - 1 = span * max_j mean ROI total`.
    pub span: f64,
    pub kernel: KernelConfig,
    pub ridge: Ridge,
    pub g_convention: GConvention,
    pub x5_mode: X5Mode,
    pub include_x4: bool,
    pub roi_access: RoiAccess,
    pub window: TimeWindow,
}

impl InterferenceConfig {
    pub fn new(kernel: KernelConfig) -> Self {
        Self {
            xi: 0.25,
            beta: 1.0,
            inputs: 5,
            levels: 5,
            span: 1.5,
            kernel,
            ridge: Ridge::Auto,
            g_convention: GConvention::Inverted,
            x5_mode: X5Mode::Mean,
            include_x4: true,
            roi_access: RoiAccess::Terminal,
            window: TimeWindow::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return bad(format!("xi must be positive, got {}", self.xi));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.inputs != self.expected_inputs() {
            return bad(format!(
                "I = {} but the disruption features provide {} inputs",
                self.inputs,
                self.expected_inputs()
            ));
        }
        if self.levels < 2 {
            return bad(format!("R must be at least 2, got {}", self.levels));
        }
        if !(self.span > 1.0 && self.span.is_finite()) {
            return bad(format!("c must exceed 1, got {}", self.span));
        }
        if let Ridge::Fixed(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return bad(format!("ridge must be non-negative, got {r}"));
            }
        }
        if self.window.t_min > self.window.t_max {
            return bad("t_min after t_max".into());
        }
        Ok(())
    }

    fn expected_inputs(&self) -> usize {
        if self.include_x4 {
            5
        } else {
            4
        }
    }
}

/// Per-day realizations of the five disruption-specific input variables.
/// Each set has one row per natural day and one column per ROI station.
#[derive(Debug, Clone)]
pub struct InputVariables {
    /// Exits from origins whose route to the station survives the disruption.
    pub feasible: SampleSet,
    /// Exits from origins whose route is lengthened beyond the threshold.
    pub infeasible: SampleSet,
    pub total: SampleSet,
    /// Mean of `total` over natural days, repeated on every row.
    pub expected: SampleSet,
    /// ROI-wide total broadcast to every coordinate.
    pub pooled: SampleSet,
}

impl InputVariables {
    pub fn to_vec(&self, include_expected: bool) -> Vec<SampleSet> {
        let mut v = vec![self.feasible.clone(), self.infeasible.clone(), self.total.clone()];
        if include_expected {
            v.push(self.expected.clone());
        }
        v.push(self.pooled.clone());
        v
    }
}

/// `feasible[j][o]`: origin `o` can still reach ROI station `j` within the
/// relative detour threshold.
pub fn feasibility_mask(g: &Graph, z: &Disruption, cfg: &InterferenceConfig) -> Result<Vec<Vec<bool>>> {
    z.validate(g.n_nodes(), cfg.window.t_min, cfg.window.t_max)?;
    let strict = match cfg.roi_access {
        RoiAccess::Strict => Some(disrupted_adjacency(g, &z.roi)?),
        RoiAccess::Terminal => None,
    };
    z.roi
        .iter()
        .map(|&d| {
            let natural = bfs_distance(g, d)?;
            let disrupted_graph = match &strict {
                Some(s) => s.clone(),
                None => terminal_access_adjacency(g, &z.roi, d)?,
            };
            let disrupted = bfs_distance(&disrupted_graph, d)?;
            Ok((0..g.n_nodes())
                .map(|o| {
                    if o == d {
                        return true;
                    }
                    match natural[o] {
                        // no route at all, nothing can arrive from here
                        None => false,
                        Some(a) => detour_from_distances(a, disrupted[o], cfg.g_convention) <= cfg.xi,
                    }
                })
                .collect())
        })
        .collect()
}

fn check_days(natural_days: &[DayCounts], z: &Disruption) -> Result<()> {
    if natural_days.is_empty() {
        return Err(Error::Validation(format!(
            "no natural days available for disruption {}",
            z.id()
        )));
    }
    if natural_days.iter().any(|d| d.day == z.day) {
        return Err(Error::Validation(format!(
            "natural days include the disruption day {}",
            z.day
        )));
    }
    Ok(())
}

/// Natural-regime days with the disruption's own day removed.
pub fn natural_days_for(days: &[DayCounts], z: &Disruption) -> Vec<DayCounts> {
    days.iter().filter(|d| d.day != z.day).cloned().collect()
}

pub fn input_variable_samples(
    natural_days: &[DayCounts],
    z: &Disruption,
    g: &Graph,
    cfg: &InterferenceConfig,
) -> Result<InputVariables> {
    check_days(natural_days, z)?;
    let mask = feasibility_mask(g, z, cfg)?;
    let m = z.roi.len();
    let n = natural_days.len();
    let mut x1 = Vec::with_capacity(n * m);
    let mut x2 = Vec::with_capacity(n * m);
    let mut x3 = Vec::with_capacity(n * m);
    let mut x5 = Vec::with_capacity(n * m);
    for day in natural_days {
        let mut day_total = 0.0;
        for (j, &d) in z.roi.iter().enumerate() {
            let (mut ok, mut blocked) = (0u64, 0u64);
            for (o, c) in day.exits_at(d, z.t_start, z.t_end) {
                if mask[j][o] {
                    ok += c;
                } else {
                    blocked += c;
                }
            }
            x1.push(ok as f64);
            x2.push(blocked as f64);
            x3.push((ok + blocked) as f64);
            day_total += (ok + blocked) as f64;
        }
        let broadcast = match cfg.x5_mode {
            X5Mode::Mean => day_total / m as f64,
            X5Mode::Sum => day_total,
        };
        x5.extend(std::iter::repeat_n(broadcast, m));
    }
    let total = SampleSet::new(m, x3)?;
    let means = total.column_means();
    let x4: Vec<f64> = (0..n).flat_map(|_| means.iter().copied()).collect();
    Ok(InputVariables {
        feasible: SampleSet::new(m, x1)?,
        infeasible: SampleSet::new(m, x2)?,
        total,
        expected: SampleSet::new(m, x4)?,
        pooled: SampleSet::new(m, x5)?,
    })
}

/// Distance-decayed copies of full-network samples: set `i` (1-based) scales
/// coordinate `d` by `exp(-i * beta * dist(d, center))`.
pub fn decay_inputs(
    natural_samples: &SampleSet,
    center: usize,
    g: &Graph,
    beta: f64,
    count: usize,
) -> Result<Vec<SampleSet>> {
    if natural_samples.dim() != g.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: g.n_nodes(),
            found: natural_samples.dim(),
        });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let dist = bfs_distance(g, center)?;
    (1..=count)
        .map(|i| {
            let factors: Vec<f64> = dist
                .iter()
                .map(|d| match d {
                    Some(h) => (-(i as f64) * beta * f64::from(*h)).exp(),
                    None => 0.0,
                })
                .collect();
            let data = natural_samples
                .rows()
                .flat_map(|row| row.iter().zip(&factors).map(|(x, f)| x * f))
                .collect();
            SampleSet::new(g.n_nodes(), data)
        })
        .collect()
}

/// Disruption features paired with the exits observed on its day.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedObservation {
    pub disruption: Disruption,
    pub exit_vector: Vec<u64>,
}

impl PerturbedObservation {
    pub fn new(disruption: Disruption, exit_vector: Vec<u64>) -> Result<Self> {
        if exit_vector.len() != disruption.roi.len() {
            return Err(Error::DimensionMismatch {
                expected: disruption.roi.len(),
                found: exit_vector.len(),
            });
        }
        Ok(Self {
            disruption,
            exit_vector,
        })
    }

    /// Observation read from the counts of the disruption day.
    pub fn from_day(disruption: Disruption, day: &DayCounts) -> Result<Self> {
        let v = roi_exit_vector(day, &disruption)?;
        Self::new(disruption, v)
    }

    pub fn as_sample(&self) -> Result<SampleSet> {
        let v: Vec<f64> = self.exit_vector.iter().map(|&c| c as f64).collect();
        SampleSet::new(v.len(), v)
    }
}

fn embed_inputs(sets: Vec<SampleSet>, kernel: KernelConfig) -> Vec<Embedding> {
    sets.into_iter().map(|s| embed(kernel, s)).collect()
}

/// Input embeddings of one disruption, from all days except its own.
pub fn disruption_inputs(
    days: &[DayCounts],
    z: &Disruption,
    g: &Graph,
    cfg: &InterferenceConfig,
) -> Result<Vec<Embedding>> {
    let natural = natural_days_for(days, z);
    let vars = input_variable_samples(&natural, z, g, cfg)?;
    Ok(embed_inputs(vars.to_vec(cfg.include_x4), cfg.kernel))
}

/// Assemble the training pairs for a set of observed disruptions.
pub fn training_pairs(
    days: &[DayCounts],
    observations: &[PerturbedObservation],
    g: &Graph,
    cfg: &InterferenceConfig,
) -> Result<TrainingPairs> {
    cfg.validate()?;
    let mut inputs = Vec::with_capacity(observations.len());
    let mut outputs = Vec::with_capacity(observations.len());
    for obs in observations {
        inputs.push(disruption_inputs(days, &obs.disruption, g, cfg)?);
        outputs.push(embed(cfg.kernel, obs.as_sample()?));
    }
    TrainingPairs::new(inputs, outputs)
}

/// Fit the mixture-of-embeddings model. `days` may contain the disruption
/// days; each disruption uses every other day as its natural sample.
pub fn train(
    days: &[DayCounts],
    observations: &[PerturbedObservation],
    g: &Graph,
    cfg: &InterferenceConfig,
) -> Result<MixtureEmbeddingModel> {
    let pairs = training_pairs(days, observations, g, cfg)?;
    let normal = NormalEquations::from_pairs(&pairs)?;
    let ridge = match cfg.ridge {
        Ridge::Auto => default_ridge(&normal.gram),
        Ridge::Fixed(r) => r,
    };
    fit_mixture_embeddings_from(&normal, ridge)
}

/// Rescaling factors `lambda_r = 1 + (r - 1) C` for `r = 1..R`.
pub fn rescale_levels(levels: usize, span: f64, max_mean_total: f64) -> Vec<f64> {
    let step = span / (levels - 1) as f64 * max_mean_total;
    (0..levels).map(|r| 1.0 + r as f64 * step).collect()
}

/// Rescaled single-station marginals of the natural exit totals.
pub fn build_basis(natural_days: &[DayCounts], z: &Disruption, cfg: &InterferenceConfig) -> Result<Basis> {
    cfg.validate()?;
    check_days(natural_days, z)?;
    let m = z.roi.len();
    let totals: Vec<Vec<f64>> = natural_days
        .iter()
        .map(|day| {
            z.roi
                .iter()
                .map(|&d| day.window_total(d, z.t_start, z.t_end) as f64)
                .collect()
        })
        .collect();
    let n = totals.len() as f64;
    let max_mean = (0..m)
        .map(|j| totals.iter().map(|t| t[j]).sum::<f64>() / n)
        .fold(0.0, f64::max);
    if max_mean <= 0.0 {
        return Err(Error::Validation(format!(
            "no natural traffic at the ROI of disruption {} during its window",
            z.id()
        )));
    }
    let lambdas = rescale_levels(cfg.levels, cfg.span, max_mean);
    let mut components = Vec::with_capacity(cfg.levels * m);
    let mut labels = Vec::with_capacity(cfg.levels * m);
    for (r, &lambda) in lambdas.iter().enumerate() {
        for (j, &station) in z.roi.iter().enumerate() {
            let mut data = vec![0.0; totals.len() * m];
            for (row, t) in totals.iter().enumerate() {
                data[row * m + j] = lambda * t[j];
            }
            components.push(SampleSet::new(m, data)?);
            labels.push(format!("r{}_s{station}", r + 1));
        }
    }
    Basis::new(cfg.kernel, components, labels)
}

/// Predicted distribution of ROI exits for a new disruption.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub embedding: Embedding,
    pub mixture: FittedMixture,
    pub samples: SampleSet,
}

pub fn predict(
    model: &MixtureEmbeddingModel,
    days: &[DayCounts],
    z_new: &Disruption,
    g: &Graph,
    cfg: &InterferenceConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Prediction> {
    cfg.validate()?;
    let natural = natural_days_for(days, z_new);
    let vars = input_variable_samples(&natural, z_new, g, cfg)?;
    let inputs = embed_inputs(vars.to_vec(cfg.include_x4), cfg.kernel);
    let embedding = predict_embedding(model, &inputs)?;
    let basis = build_basis(&natural, z_new, cfg)?;
    let mixture = fit_mixture_weights(&embedding, &basis)?;
    let samples = sample_mixture(&mixture, n_samples, seed)?;
    Ok(Prediction {
        embedding,
        mixture,
        samples,
    })
}
