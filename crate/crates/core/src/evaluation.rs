//! Disruption scoring and out-of-sample comparison of the regression model
//! against the natural-regime baseline and random mixtures.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::data_io::Dataset;
use crate::embedding::{median_heuristic_pooled, KernelConfig, KernelFamily, SampleSet};
use crate::error::{Error, Result};
use crate::network::Disruption;
use crate::numeric::{derive_seed, median};
use crate::pipeline::{
    build_basis, input_variable_samples, natural_days_for, predict, train, DayCounts,
    InterferenceConfig, PerturbedObservation,
};
use crate::sampler::{sample_mixture, Basis, FittedMixture};

/// `sum_d ||x1_d - x2_d||^2 / sum_d ||x1_d||^2` over natural days.
pub fn observable_score(x1: &SampleSet, x2: &SampleSet) -> Result<f64> {
    if x1.len() != x2.len() || x1.dim() != x2.dim() {
        return Err(Error::DimensionMismatch {
            expected: x1.as_slice().len(),
            found: x2.as_slice().len(),
        });
    }
    let num: f64 = x1.as_slice().iter().zip(x2.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = x1.as_slice().iter().map(|a| a * a).sum();
    if den <= 0.0 {
        return Err(Error::Validation(
            "observable score undefined: no feasible-route exits on any natural day".into(),
        ));
    }
    Ok(num / den)
}

/// Mean ROI window totals over the given days.
pub fn natural_roi_means(natural_days: &[DayCounts], z: &Disruption) -> Result<Vec<f64>> {
    if natural_days.is_empty() {
        return Err(Error::Validation("no natural days".into()));
    }
    let n = natural_days.len() as f64;
    Ok(z.roi
        .iter()
        .map(|&d| {
            natural_days
                .iter()
                .map(|day| day.window_total(d, z.t_start, z.t_end) as f64)
                .sum::<f64>()
                / n
        })
        .collect())
}

/// `sum_j (mean_j - observed_j)^2 / sum_j mean_j^2`.
pub fn severity_score(day: &DayCounts, natural_mean: &[f64], z: &Disruption) -> Result<f64> {
    let observed = crate::pipeline::roi_exit_vector(day, z)?;
    if observed.len() != natural_mean.len() {
        return Err(Error::DimensionMismatch {
            expected: observed.len(),
            found: natural_mean.len(),
        });
    }
    let den: f64 = natural_mean.iter().map(|m| m * m).sum();
    if den <= 0.0 {
        return Err(Error::Validation(
            "severity score undefined: no natural traffic at the ROI".into(),
        ));
    }
    let num: f64 = natural_mean
        .iter()
        .zip(&observed)
        .map(|(m, &y)| (m - y as f64).powi(2))
        .sum();
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    /// Position of the disruption in the input list.
    pub index: usize,
    pub id: String,
    pub observable: f64,
    pub severity: f64,
    pub selected: bool,
}

/// Scores of every disruption; failures are reported per disruption.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    pub records: Vec<ScoreRecord>,
    pub failures: Vec<(usize, String, String)>,
}

impl ScoreTable {
    /// Input positions of the selected disruptions, ascending.
    pub fn selected(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.selected).map(|r| r.index).collect()
    }
}

pub fn score_disruptions(data: &Dataset, cfg: &InterferenceConfig, top: usize) -> ScoreTable {
    let results: Vec<(usize, Result<ScoreRecord>)> = data
        .disruptions
        .par_iter()
        .enumerate()
        .map(|(index, z)| (index, score_one(data, cfg, index, z)))
        .collect();
    let mut table = ScoreTable::default();
    for (index, r) in results {
        match r {
            Ok(rec) => table.records.push(rec),
            Err(e) => table
                .failures
                .push((index, data.disruptions[index].id(), e.to_string())),
        }
    }
    let chosen = select_top(&table.records, top);
    for rec in &mut table.records {
        rec.selected = chosen.contains(&rec.index);
    }
    table
}

fn score_one(data: &Dataset, cfg: &InterferenceConfig, index: usize, z: &Disruption) -> Result<ScoreRecord> {
    let natural = natural_days_for(&data.days, z);
    let vars = input_variable_samples(&natural, z, &data.graph, cfg)?;
    let observable = observable_score(&vars.feasible, &vars.infeasible)?;
    let day = data.day(z.day)?;
    let severity = severity_score(day, &natural_roi_means(&natural, z)?, z)?;
    Ok(ScoreRecord {
        index,
        id: z.id(),
        observable,
        severity,
        selected: false,
    })
}

/// Indices of the `n` highest observable scores, ties to the lower index.
pub fn select_top(scores: &[ScoreRecord], n: usize) -> BTreeSet<usize> {
    let mut order: Vec<&ScoreRecord> = scores.iter().collect();
    order.sort_by(|a, b| b.observable.total_cmp(&a.observable).then(a.index.cmp(&b.index)));
    order.into_iter().take(n).map(|r| r.index).collect()
}

/// Seeded shuffle followed by `k` contiguous near-equal folds. Returns
/// `(train, test)` pairs.
pub fn kfold<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    if k == 0 || k > items.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot split {} items into {k} folds",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = items.len() / k;
    let extra = items.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test: BTreeSet<usize> = order[start..start + size].iter().copied().collect();
        start += size;
        let pick = |keep: bool| {
            (0..items.len())
                .filter(|i| test.contains(i) == keep)
                .map(|i| items[i].clone())
                .collect::<Vec<T>>()
        };
        folds.push((pick(false), pick(true)));
    }
    Ok(folds)
}

/// Per-coordinate log density of a normalized Gaussian KDE,
/// `log( sqrt(h_j / pi) / N * sum_s exp(-h_j (y_j - s_j)^2) )`.
pub fn kde_log_density(samples: &SampleSet, h: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let dim = samples.dim();
    for len in [h.len(), y.len()] {
        if len != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: len,
            });
        }
    }
    if h.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("KDE smoothing must be positive".into()));
    }
    let n = samples.len() as f64;
    Ok((0..dim)
        .map(|j| {
            let exps: Vec<f64> = samples.rows().map(|s| -h[j] * (y[j] - s[j]).powi(2)).collect();
            let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = exps.iter().map(|e| (e - top).exp()).sum();
            top + sum.ln() + 0.5 * (h[j] / std::f64::consts::PI).ln() - n.ln()
        })
        .collect())
}

/// Smoothing `h = 1 / (2 sigma^2)` per coordinate from Silverman's rule
/// `sigma = 0.9 min(sd, IQR / 1.34) n^(-1/5)`, with `sigma >= min_sigma`.
pub fn silverman_smoothing(samples: &SampleSet, min_sigma: f64) -> Vec<f64> {
    let n = samples.len() as f64;
    (0..samples.dim())
        .map(|j| {
            let mut col = samples.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let sd = if col.len() > 1 {
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            col.sort_by(f64::total_cmp);
            let iqr = quantile(&col, 0.75) - quantile(&col, 0.25);
            let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
            let sigma = (0.9 * spread * n.powf(-0.2)).max(min_sigma);
            1.0 / (2.0 * sigma * sigma)
        })
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Negative log-likelihood under the product of KDE marginals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll {
    pub nll: f64,
    /// `ln(nll)`, absent when `nll <= 0`.
    pub log_nll: Option<f64>,
}

pub fn nll(samples: &SampleSet, observed: &[f64], h: &[f64]) -> Result<Nll> {
    let v = -kde_log_density(samples, h, observed)?.iter().sum::<f64>();
    Ok(Nll {
        nll: v,
        log_nll: (v > 0.0).then(|| v.ln()),
    })
}

/// `||mean(samples) - observed||^2 / ||observed||^2`.
pub fn squared_error(samples: &SampleSet, observed: &[f64]) -> Result<f64> {
    if observed.len() != samples.dim() {
        return Err(Error::DimensionMismatch {
            expected: samples.dim(),
            found: observed.len(),
        });
    }
    let den: f64 = observed.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(Error::Validation("squared error undefined for a zero observation".into()));
    }
    let mean = samples.column_means();
    let num: f64 = mean.iter().zip(observed).map(|(m, y)| (m - y).powi(2)).sum();
    Ok(num / den)
}

/// Natural-regime ROI totals, one row per day.
pub fn baseline_model(natural_days: &[DayCounts], z: &Disruption) -> Result<SampleSet> {
    if natural_days.iter().any(|d| d.day == z.day) {
        return Err(Error::Validation(format!(
            "baseline for disruption {} includes its own day",
            z.id()
        )));
    }
    let rows: Vec<Vec<f64>> = natural_days
        .iter()
        .map(|day| {
            z.roi
                .iter()
                .map(|&d| day.window_total(d, z.t_start, z.t_end) as f64)
                .collect()
        })
        .collect();
    SampleSet::from_rows(&rows)
}

/// Flat-Dirichlet weights from normalized exponential draws.
pub fn random_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Samples from the basis mixed with random simplex weights.
pub fn random_model(basis: &Basis, seed: u64, n: usize) -> Result<SampleSet> {
    let theta = random_weights(basis.len(), seed);
    let m = FittedMixture {
        basis: basis.clone(),
        theta,
        fit_residual: f64::NAN,
    };
    sample_mixture(&m, n, derive_seed(seed, 1, 0))
}

/// How the kernel bandwidth is chosen during evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoSetting {
    Fixed(f64),
    /// Median heuristic over the training disruptions of each fold.
    PerFold,
    /// Median heuristic over all selected disruptions, shared by every fold.
    Global,
    /// Chosen within each fold's training set from multiples of the
    /// median heuristic, by held-out NLL over inner folds.
    CrossValidated,
}

/// Multiples of the median-heuristic bandwidth tried by cross-validation.
pub const CV_RHO_SCALES: [f64; 5] = [1.0, 1.0 / 3.0, 0.1, 1.0 / 30.0, 0.01];

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub interference: InterferenceConfig,
    pub rho: RhoSetting,
    pub folds: usize,
    pub top: usize,
    pub seed: u64,
    pub n_samples: usize,
    /// Lower bound on the KDE standard deviation.
    pub kde_min_bandwidth: f64,
}

/// Pooled median-heuristic bandwidth over the natural totals and observed
/// exit vectors of the given disruptions.
pub fn pooled_rho(data: &Dataset, obs: &[PerturbedObservation], family: KernelFamily) -> Result<f64> {
    // totals and observations of different ROI sizes cannot be pooled, so
    // sets are reduced to their per-row coordinates
    let mut values = Vec::new();
    for o in obs {
        let natural = natural_days_for(&data.days, &o.disruption);
        let base = baseline_model(&natural, &o.disruption)?;
        values.extend_from_slice(base.as_slice());
        values.extend(o.exit_vector.iter().map(|&v| v as f64));
    }
    let set = SampleSet::from_scalars(&values)?;
    median_heuristic_pooled(&[&set], family)
}

/// Observed exit vectors of the disruptions at `indices`; failures are
/// appended to `failures`.
pub fn observations_for(
    data: &Dataset,
    indices: &[usize],
    failures: &mut Vec<(usize, String, String)>,
) -> Vec<(usize, PerturbedObservation)> {
    let mut out = Vec::new();
    for &i in indices {
        let z = data.disruptions[i].clone();
        match data.day(z.day).and_then(|d| PerturbedObservation::from_day(z.clone(), d)) {
            Ok(o) => out.push((i, o)),
            Err(e) => failures.push((i, z.id(), e.to_string())),
        }
    }
    out
}

/// Bandwidth for a model trained on `obs`. `stream` separates the
/// cross-validation splits of different folds.
pub fn resolve_rho(data: &Dataset, cfg: &EvalConfig, obs: &[PerturbedObservation], stream: u64) -> Result<f64> {
    let family = cfg.interference.kernel.family();
    match cfg.rho {
        RhoSetting::Fixed(r) => Ok(r),
        RhoSetting::PerFold | RhoSetting::Global => pooled_rho(data, obs, family),
        RhoSetting::CrossValidated => cross_validated_rho(data, cfg, obs, derive_seed(cfg.seed, 4, stream)),
    }
}

/// Pick the bandwidth among `CV_RHO_SCALES` times the pooled median
/// heuristic that minimises summed held-out NLL over inner folds of `obs`.
/// Ties go to the wider kernel listed first.
pub fn cross_validated_rho(
    data: &Dataset,
    cfg: &EvalConfig,
    obs: &[PerturbedObservation],
    seed: u64,
) -> Result<f64> {
    if obs.len() < 3 {
        return Err(Error::Validation(
            "cross-validated bandwidth needs at least 3 training disruptions".into(),
        ));
    }
    let family = cfg.interference.kernel.family();
    let base = pooled_rho(data, obs, family)?;
    let inner = kfold(obs, obs.len().min(5), seed)?;
    let n_samples = cfg.n_samples.min(250);
    let mut best: Option<(f64, f64)> = None;
    for scale in CV_RHO_SCALES {
        let rho = base * scale;
        let mut icfg = cfg.interference.clone();
        icfg.kernel = KernelConfig::new(family, rho)?;
        let mut total = 0.0;
        for (train_set, test_set) in &inner {
            let loss = (|| {
                let model = train(&data.days, train_set, &data.graph, &icfg)?;
                let mut sum = 0.0;
                for (j, o) in test_set.iter().enumerate() {
                    let p = predict(&model, &data.days, &o.disruption, &data.graph, &icfg, n_samples, derive_seed(seed, 5, j as u64))?;
                    let observed: Vec<f64> = o.exit_vector.iter().map(|&v| v as f64).collect();
                    let h = silverman_smoothing(&p.samples, cfg.kde_min_bandwidth);
                    sum += nll(&p.samples, &observed, &h)?.nll;
                }
                Ok::<_, Error>(sum)
            })();
            total += loss.unwrap_or(f64::INFINITY);
        }
        if total.is_finite() && best.is_none_or(|(b, _)| total < b) {
            best = Some((total, rho));
        }
    }
    best.map(|(_, r)| r).ok_or_else(|| Error::Validation("no candidate bandwidth could be evaluated".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub index: usize,
    pub id: String,
    pub fold: usize,
    pub rho: f64,
    pub model_nll: Nll,
    pub baseline_nll: Nll,
    pub random_nll: Nll,
    pub model_se: f64,
    pub baseline_se: f64,
    pub random_se: f64,
    pub theta: Vec<f64>,
    pub fit_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub id: String,
    pub station: usize,
    pub y: Vec<f64>,
    pub p_model: Vec<f64>,
    pub p_baseline: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub scores: ScoreTable,
    pub rows: Vec<MetricRow>,
    pub densities: Vec<DensityGrid>,
    pub failures: Vec<(usize, String, String)>,
    /// Training indices of each fold, for out-of-sample checks.
    pub fold_train: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Fraction of rows where the model's NLL is below the random model's.
    pub fn nll_win_rate_vs_random(&self) -> f64 {
        self.win_rate(|r| r.model_nll.nll < r.random_nll.nll)
    }

    pub fn se_win_rate_vs_baseline(&self) -> f64 {
        self.win_rate(|r| r.model_se < r.baseline_se)
    }

    pub fn nll_win_rate_vs_baseline(&self) -> f64 {
        self.win_rate(|r| r.model_nll.nll < r.baseline_nll.nll)
    }

    fn win_rate(&self, f: impl Fn(&MetricRow) -> bool) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| f(r)).count() as f64 / self.rows.len() as f64
    }

    pub fn median_nll_gap_vs_baseline(&self) -> Option<f64> {
        let mut gaps: Vec<f64> = self.rows.iter().map(|r| r.model_nll.nll - r.baseline_nll.nll).collect();
        median(&mut gaps)
    }
}

/// Score, select, and run the k-fold protocol.
pub fn run_evaluation(data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.interference.validate()?;
    if cfg.n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be positive".into()));
    }
    if !(cfg.kde_min_bandwidth > 0.0 && cfg.kde_min_bandwidth.is_finite()) {
        return Err(Error::InvalidParameter("kde_min_bandwidth must be positive".into()));
    }
    let scores = score_disruptions(data, &cfg.interference, cfg.top);
    let selected = scores.selected();
    let mut failures = scores.failures.clone();
    let observations = observations_for(data, &selected, &mut failures);
    let folds = kfold(&observations, cfg.folds, cfg.seed)?;
    let family = cfg.interference.kernel.family();
    let global_rho = match cfg.rho {
        RhoSetting::Global => {
            let all: Vec<PerturbedObservation> = observations.iter().map(|(_, o)| o.clone()).collect();
            Some(pooled_rho(data, &all, family)?)
        }
        RhoSetting::Fixed(r) => Some(r),
        RhoSetting::PerFold | RhoSetting::CrossValidated => None,
    };

    let fold_results: Vec<FoldOutcome> = folds
        .par_iter()
        .enumerate()
        .map(|(f, (train_set, test_set))| {
            run_fold(data, cfg, f, train_set, test_set, global_rho)
        })
        .collect();

    let mut report = EvalReport {
        scores,
        ..Default::default()
    };
    for outcome in fold_results {
        report.fold_train.push(outcome.train);
        report.rows.extend(outcome.rows);
        report.densities.extend(outcome.densities);
        failures.extend(outcome.failures);
    }
    report.rows.sort_by_key(|r| r.index);
    report.densities.sort_by(|a, b| a.id.cmp(&b.id).then(a.station.cmp(&b.station)));
    failures.sort();
    report.failures = failures;
    Ok(report)
}

struct FoldOutcome {
    train: Vec<usize>,
    rows: Vec<MetricRow>,
    densities: Vec<DensityGrid>,
    failures: Vec<(usize, String, String)>,
}

fn run_fold(
    data: &Dataset,
    cfg: &EvalConfig,
    fold: usize,
    train_set: &[(usize, PerturbedObservation)],
    test_set: &[(usize, PerturbedObservation)],
    global_rho: Option<f64>,
) -> FoldOutcome {
    let mut out = FoldOutcome {
        train: train_set.iter().map(|(i, _)| *i).collect(),
        rows: Vec::new(),
        densities: Vec::new(),
        failures: Vec::new(),
    };
    let train_obs: Vec<PerturbedObservation> = train_set.iter().map(|(_, o)| o.clone()).collect();
    let fitted = (|| {
        let family = cfg.interference.kernel.family();
        let rho = match global_rho {
            Some(r) => r,
            None => resolve_rho(data, cfg, &train_obs, fold as u64)?,
        };
        let mut icfg = cfg.interference.clone();
        icfg.kernel = KernelConfig::new(family, rho)?;
        let model = train(&data.days, &train_obs, &data.graph, &icfg)?;
        Ok::<_, Error>((icfg, model))
    })();
    let (icfg, model) = match fitted {
        Ok(v) => v,
        Err(e) => {
            for (i, o) in test_set {
                out.failures.push((*i, o.disruption.id(), format!("fold {fold} training failed: {e}")));
            }
            return out;
        }
    };
    for (index, obs) in test_set {
        debug_assert!(!out.train.contains(index));
        match evaluate_one(data, cfg, &icfg, &model, fold, *index, obs) {
            Ok((row, dens)) => {
                out.rows.push(row);
                out.densities.extend(dens);
            }
            Err(e) => out.failures.push((*index, obs.disruption.id(), e.to_string())),
        }
    }
    out
}

fn evaluate_one(
    data: &Dataset,
    cfg: &EvalConfig,
    icfg: &InterferenceConfig,
    model: &crate::regression::MixtureEmbeddingModel,
    fold: usize,
    index: usize,
    obs: &PerturbedObservation,
) -> Result<(MetricRow, Vec<DensityGrid>)> {
    let z = &obs.disruption;
    let model_seed = derive_seed(cfg.seed, 2, index as u64);
    let random_seed = derive_seed(cfg.seed, 3, index as u64);
    let prediction = predict(model, &data.days, z, &data.graph, icfg, cfg.n_samples, model_seed)?;
    let natural = natural_days_for(&data.days, z);
    let baseline = baseline_model(&natural, z)?;
    let basis = build_basis(&natural, z, icfg)?;
    let random = random_model(&basis, random_seed, cfg.n_samples)?;
    let observed: Vec<f64> = obs.exit_vector.iter().map(|&v| v as f64).collect();

    let h_model = silverman_smoothing(&prediction.samples, cfg.kde_min_bandwidth);
    let h_base = silverman_smoothing(&baseline, cfg.kde_min_bandwidth);
    let h_rand = silverman_smoothing(&random, cfg.kde_min_bandwidth);
    let row = MetricRow {
        index,
        id: z.id(),
        fold,
        rho: icfg.kernel.rho(),
        model_nll: nll(&prediction.samples, &observed, &h_model)?,
        baseline_nll: nll(&baseline, &observed, &h_base)?,
        random_nll: nll(&random, &observed, &h_rand)?,
        model_se: squared_error(&prediction.samples, &observed)?,
        baseline_se: squared_error(&baseline, &observed)?,
        random_se: squared_error(&random, &observed)?,
        theta: prediction.mixture.theta.clone(),
        fit_residual: prediction.mixture.fit_residual,
    };

    let mut grids = Vec::with_capacity(z.roi.len());
    for (j, &station) in z.roi.iter().enumerate() {
        let top = prediction
            .samples
            .column(j)
            .into_iter()
            .chain(baseline.column(j))
            .chain(std::iter::once(observed[j]))
            .fold(0.0, f64::max);
        let y = density_grid(top);
        let eval = |s: &SampleSet, h: &[f64]| -> Result<Vec<f64>> {
            let one = s.column(j);
            let set = SampleSet::from_scalars(&one)?;
            y.iter()
                .map(|&v| Ok(kde_log_density(&set, &h[j..=j], &[v])?[0].exp()))
                .collect()
        };
        grids.push(DensityGrid {
            id: z.id(),
            station,
            p_model: eval(&prediction.samples, &h_model)?,
            p_baseline: eval(&baseline, &h_base)?,
            y,
        });
    }
    Ok((row, grids))
}

fn density_grid(top: f64) -> Vec<f64> {
    let upper = (top * 1.25).ceil().max(10.0);
    let step = (upper / 200.0).ceil().max(1.0);
    let n = (upper / step) as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

fn write_file(path: &Path, content: String) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn fmt_log(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

/// `id,observable,severity,selected`, ordered by input position.
pub fn write_scores(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut s = String::from("id,observable,severity,selected\n");
    for r in &table.records {
        s.push_str(&format!("{},{},{},{}\n", r.id, r.observable, r.severity, u8::from(r.selected)));
    }
    write_file(path, s)
}

/// Per-disruption metrics plus the log-of-NLL columns used for plotting.
pub fn write_metrics(path: &Path, report: &EvalReport) -> Result<()> {
    let mut s = String::from(
        "id,fold,model_nll,baseline_nll,random_nll,model_se,baseline_se,random_se,\
         model_log_nll,baseline_log_nll,random_log_nll,rho,fit_residual\n",
    );
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.fold,
            r.model_nll.nll,
            r.baseline_nll.nll,
            r.random_nll.nll,
            r.model_se,
            r.baseline_se,
            r.random_se,
            fmt_log(r.model_nll.log_nll),
            fmt_log(r.baseline_nll.log_nll),
            fmt_log(r.random_nll.log_nll),
            r.rho,
            r.fit_residual
        ));
    }
    write_file(path, s)
}

/// One `density_<id>_<station>.csv` per grid.
pub fn write_densities(dir: &Path, report: &EvalReport) -> Result<()> {
    for g in &report.densities {
        let mut s = String::from("y,p_model,p_baseline\n");
        for ((y, a), b) in g.y.iter().zip(&g.p_model).zip(&g.p_baseline) {
            s.push_str(&format!("{y},{a},{b}\n"));
        }
        write_file(&dir.join(format!("density_{}_{}.csv", g.id, g.station)), s)?;
    }
    Ok(())
}

/// `id,error` for disruptions that could not be scored or evaluated.
pub fn write_failures(path: &Path, failures: &[(usize, String, String)]) -> Result<()> {
    let mut s = String::from("id,error\n");
    for (_, id, msg) in failures {
        s.push_str(&format!("{id},\"{}\"\n", msg.replace('"', "'")));
    }
    write_file(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Graph;
    use crate::pipeline::TimeWindow;

    fn rows(r: &[[f64; 2]]) -> SampleSet {
        SampleSet::from_rows(r).unwrap()
    }

    #[test]
    fn observable_examples() {
        let a = rows(&[[1.0, 2.0], [3.0, 0.0]]);
        assert_eq!(observable_score(&a, &a).unwrap(), 0.0);
        assert_eq!(observable_score(&a, &rows(&[[0.0, 0.0], [0.0, 0.0]])).unwrap(), 1.0);
        let x1 = rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let x2 = rows(&[[0.0, 0.0], [0.0, 1.0]]);
        assert_eq!(observable_score(&x1, &x2).unwrap(), 0.5);
        let zero = rows(&[[0.0, 0.0]]);
        assert!(observable_score(&zero, &zero).is_err());
    }

    fn z() -> Disruption {
        Disruption { day: 0, t_start: 10, t_end: 20, roi: vec![1, 2] }
    }

    #[test]
    fn severity_examples() {
        let mut day = DayCounts::new(0);
        day.add(0, 1, 15, 10);
        day.add(0, 2, 15, 10);
        assert_eq!(severity_score(&day, &[10.0, 10.0], &z()).unwrap(), 0.0);
        assert_eq!(severity_score(&DayCounts::new(0), &[10.0, 10.0], &z()).unwrap(), 1.0);
        let mut half = DayCounts::new(0);
        half.add(0, 1, 15, 5);
        half.add(3, 2, 12, 10);
        assert_eq!(severity_score(&half, &[10.0, 10.0], &z()).unwrap(), 0.125);
        assert!(severity_score(&day, &[0.0, 0.0], &z()).is_err());
    }

    #[test]
    fn scores_are_scale_invariant() {
        let x1 = rows(&[[1.0, 4.0], [2.0, 3.0]]);
        let x2 = rows(&[[0.0, 1.0], [5.0, 3.0]]);
        let s = observable_score(&x1, &x2).unwrap();
        let scale = |m: &SampleSet| SampleSet::new(2, m.as_slice().iter().map(|v| 7.0 * v).collect()).unwrap();
        assert!((observable_score(&scale(&x1), &scale(&x2)).unwrap() - s).abs() < 1e-14);
        let mut day = DayCounts::new(0);
        day.add(0, 1, 15, 3);
        day.add(0, 2, 15, 8);
        let a = severity_score(&day, &[4.0, 6.0], &z()).unwrap();
        let b = severity_score(&day.scaled(7), &[28.0, 42.0], &z()).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    fn rec(index: usize, observable: f64) -> ScoreRecord {
        ScoreRecord { index, id: index.to_string(), observable, severity: 0.0, selected: false }
    }

    #[test]
    fn select_top_cases() {
        let scores = vec![rec(0, 0.1), rec(1, 0.9), rec(2, 0.5), rec(3, 0.5)];
        assert_eq!(select_top(&scores, 4).len(), 4);
        assert_eq!(select_top(&scores, 2), BTreeSet::from([1, 2]));
        assert_eq!(select_top(&scores, 10).len(), 4);
    }

    #[test]
    fn kfold_partition() {
        let items: Vec<usize> = (0..20).collect();
        let folds = kfold(&items, 10, 3).unwrap();
        assert_eq!(folds.len(), 10);
        let mut seen = BTreeSet::new();
        for (train, test) in &folds {
            assert_eq!(test.len(), 2);
            assert_eq!(train.len(), 18);
            for t in test {
                assert!(!train.contains(t));
                assert!(seen.insert(*t));
            }
        }
        assert_eq!(seen.len(), 20);
        let again = kfold(&items, 10, 3).unwrap();
        assert_eq!(folds, again);
        assert_ne!(folds, kfold(&items, 10, 4).unwrap());
        assert!(kfold(&items, 21, 0).is_err());
        let uneven = kfold(&(0..7).collect::<Vec<_>>(), 3, 1).unwrap();
        let sizes: Vec<usize> = uneven.iter().map(|(_, t)| t.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
    }

    #[test]
    fn kde_peak_and_symmetry() {
        let s = SampleSet::from_scalars(&[2.0]).unwrap();
        let h = 0.7;
        let peak = kde_log_density(&s, &[h], &[2.0]).unwrap()[0];
        assert!((peak - 0.5 * (h / std::f64::consts::PI).ln()).abs() < 1e-15);
        let up = kde_log_density(&s, &[h], &[2.5]).unwrap()[0];
        let down = kde_log_density(&s, &[h], &[1.5]).unwrap()[0];
        assert_eq!(up, down);
        assert!(kde_log_density(&s, &[0.0], &[2.0]).is_err());
    }

    #[test]
    fn kde_integrates_to_one() {
        let s = rows(&[[0.0, 10.0], [3.0, 11.0], [4.5, 30.0]]);
        let h = [0.3, 0.05];
        for j in 0..2 {
            let (lo, hi, steps) = (-40.0, 80.0, 24_000);
            let dx = (hi - lo) / steps as f64;
            let mut total = 0.0;
            for i in 0..=steps {
                let mut y = [5.0, 20.0];
                y[j] = lo + i as f64 * dx;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                total += w * kde_log_density(&s, &h, &y).unwrap()[j].exp() * dx;
            }
            assert!((total - 1.0).abs() < 1e-3, "coordinate {j}: {total}");
        }
    }

    #[test]
    fn kde_stable_far_in_tail() {
        let s = SampleSet::from_scalars(&[0.0, 1.0]).unwrap();
        let v = kde_log_density(&s, &[10.0], &[1000.0]).unwrap()[0];
        assert!(v.is_finite() && v < -1e6);
    }

    #[test]
    fn nll_cases() {
        let s = SampleSet::from_scalars(&[4.0]).unwrap();
        let r = nll(&s, &[4.0], &[std::f64::consts::PI]).unwrap();
        assert!(r.nll.abs() < 1e-15);
        assert_eq!(r.log_nll, None);
        let far = nll(&s, &[40.0], &[1.0]).unwrap();
        assert!(far.nll > 1000.0 && far.log_nll.is_some());

        // direct recomputation
        let samples = rows(&[[1.0, 2.0], [2.0, 5.0], [0.5, 3.5]]);
        let y = [1.2, 4.0];
        let h = [0.8, 0.2];
        let mut direct = 0.0;
        for j in 0..2 {
            let p: f64 = samples.rows().map(|r| (-h[j] * (y[j] - r[j]) * (y[j] - r[j])).exp()).sum::<f64>()
                * (h[j] / std::f64::consts::PI).sqrt()
                / 3.0;
            direct -= p.ln();
        }
        assert!((nll(&samples, &y, &h).unwrap().nll - direct).abs() < 1e-12);
    }

    #[test]
    fn squared_error_cases() {
        let s = rows(&[[1.0, 3.0], [3.0, 5.0]]);
        assert_eq!(squared_error(&s, &[2.0, 4.0]).unwrap(), 0.0);
        let zero = rows(&[[0.0, 0.0]]);
        assert_eq!(squared_error(&zero, &[3.0, 4.0]).unwrap(), 1.0);
        let scaled = rows(&[[5.0, 15.0], [15.0, 25.0]]);
        let a = squared_error(&s, &[1.0, 7.0]).unwrap();
        let b = squared_error(&scaled, &[5.0, 35.0]).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(squared_error(&s, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn silverman_floor_and_scale() {
        let constant = SampleSet::from_scalars(&[3.0; 10]).unwrap();
        let h = silverman_smoothing(&constant, 0.5);
        assert!((h[0] - 2.0).abs() < 1e-12);
        let spread: Vec<f64> = (0..100).map(f64::from).collect();
        let wide = silverman_smoothing(&SampleSet::from_scalars(&spread).unwrap(), 0.5)[0];
        let scaled: Vec<f64> = spread.iter().map(|v| 10.0 * v).collect();
        let wider = silverman_smoothing(&SampleSet::from_scalars(&scaled).unwrap(), 0.5)[0];
        assert!((wide / wider - 100.0).abs() < 1e-9);
    }

    #[test]
    fn random_weights_on_simplex() {
        let w = random_weights(6, 1);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(random_weights(1, 9), vec![1.0]);
        assert_eq!(random_weights(6, 1), w);
    }

    #[test]
    fn random_weights_mean_is_uniform() {
        let n = 4;
        let mut mean = vec![0.0; n];
        for s in 0..10_000u64 {
            for (m, v) in mean.iter_mut().zip(random_weights(n, s)) {
                *m += v / 10_000.0;
            }
        }
        for m in mean {
            assert!((m - 0.25).abs() < 0.01, "{m}");
        }
    }

    fn small_dataset() -> Dataset {
        let graph = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let days = (0..5)
            .map(|d| {
                let mut dc = DayCounts::new(d);
                dc.add(0, 2, 100, 5 + d as u64);
                dc.add(3, 2, 100, 4);
                dc.add(1, 2, 101, 2);
                dc
            })
            .collect();
        Dataset {
            graph,
            days,
            disruptions: vec![
                Disruption { day: 2, t_start: 90, t_end: 110, roi: vec![1, 2] },
                Disruption { day: 3, t_start: 90, t_end: 110, roi: vec![2] },
            ],
            window: TimeWindow::default(),
        }
    }

    #[test]
    fn baseline_matches_total_variable() {
        let data = small_dataset();
        let z = &data.disruptions[0];
        let natural = natural_days_for(&data.days, z);
        let icfg = InterferenceConfig::new(KernelConfig::gaussian(0.1).unwrap());
        let x = input_variable_samples(&natural, z, &data.graph, &icfg).unwrap();
        let b = baseline_model(&natural, z).unwrap();
        assert_eq!(b.as_slice(), x.total.as_slice());
        assert_eq!(b.len(), 4);
        assert!(baseline_model(&data.days, z).is_err());
    }

    #[test]
    fn random_model_single_component() {
        let basis = Basis::unlabeled(
            KernelConfig::gaussian(1.0).unwrap(),
            vec![SampleSet::from_scalars(&[1.0, 2.0]).unwrap()],
        )
        .unwrap();
        let s = random_model(&basis, 4, 50).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 1.0 || v == 2.0));
        assert_eq!(random_model(&basis, 4, 50).unwrap().as_slice(), s.as_slice());
    }

    #[test]
    fn scoring_small_dataset() {
        let data = small_dataset();
        let icfg = InterferenceConfig::new(KernelConfig::gaussian(0.1).unwrap());
        let table = score_disruptions(&data, &icfg, 20);
        assert!(table.failures.is_empty(), "{:?}", table.failures);
        let r = &table.records[0];
        assert!(r.selected);
        // link 1-2 closed: origin 0 loses its route to 2, origin 3 keeps it
        let expected: f64 = (0..5u32)
            .filter(|&d| d != 2)
            .map(|d| (4.0 - (7 + d) as f64).powi(2))
            .sum::<f64>()
            / (4.0 * 16.0);
        assert!((r.observable - expected).abs() < 1e-12);
        assert!(r.severity.abs() < 1e-12 || r.severity > 0.0);
        // a lone station keeps all its links, so nothing is infeasible
        assert_eq!(table.records[1].observable, 1.0);
        assert_eq!(select_top(&table.records, 1), BTreeSet::from([0]));
    }
}
