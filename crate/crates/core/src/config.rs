//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::path::Path;
use std::str::FromStr;

use crate::embedding::{KernelConfig, KernelFamily};
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, RhoSetting};
use crate::network::GConvention;
use crate::pipeline::{InterferenceConfig, Ridge, RoiAccess, TimeWindow, X5Mode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: u64,
}

/// Split a file into entries. Repeated keys are an error.
pub fn parse_entries(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::parse(path, line, format!("expected key = value, got '{s}'")))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::parse(path, line, "empty key"));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::parse(path, line, format!("key '{key}' given twice")));
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// Parse `entry.value` as `T`, attributing failures to the entry's line.
pub fn parse_value<T: FromStr>(entry: &Entry, path: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entry.value.parse::<T>().map_err(|e| {
        Error::parse(
            path,
            entry.line,
            format!("invalid value '{}' for {}: {e}", entry.value, entry.key),
        )
    })
}

pub fn parse_bool(entry: &Entry, path: &Path) -> Result<bool> {
    match entry.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::parse(
            path,
            entry.line,
            format!("invalid boolean '{other}' for {}", entry.key),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoChoice {
    Fixed(f64),
    /// Median heuristic, recomputed on the training disruptions of each fold.
    PerFold,
    /// Median heuristic over every selected disruption.
    Global,
    /// Nested cross-validation inside each training fold.
    CrossValidated,
}

/// Settings for `train`, `predict` and `evaluate`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub family: KernelFamily,
    pub rho: RhoChoice,
    pub xi: f64,
    pub beta: f64,
    pub inputs: Option<usize>,
    pub levels: usize,
    pub span: f64,
    pub ridge: Ridge,
    pub g_convention: GConvention,
    pub x5_mode: X5Mode,
    pub include_x4: bool,
    pub roi_access: RoiAccess,
    pub window: TimeWindow,
    pub seed: u64,
    pub n_samples: usize,
    pub top: usize,
    pub folds: usize,
    pub kde_min_bandwidth: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: KernelFamily::Gaussian,
            rho: RhoChoice::PerFold,
            xi: 0.25,
            beta: 1.0,
            inputs: None,
            levels: 5,
            span: 1.5,
            ridge: Ridge::Auto,
            g_convention: GConvention::Inverted,
            x5_mode: X5Mode::Mean,
            include_x4: true,
            roi_access: RoiAccess::Terminal,
            window: TimeWindow::default(),
            seed: 0,
            n_samples: 1000,
            top: 20,
            folds: 10,
            kde_min_bandwidth: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = Self::default();
        for e in parse_entries(text, path)? {
            match e.key.as_str() {
                "kernel.family" => c.family = parse_value(&e, path)?,
                "kernel.rho" => {
                    c.rho = match e.value.as_str() {
                        "auto" | "auto-perfold" => RhoChoice::PerFold,
                        "auto-global" => RhoChoice::Global,
                        "cv" => RhoChoice::CrossValidated,
                        _ => RhoChoice::Fixed(parse_value(&e, path)?),
                    }
                }
                "xi" => c.xi = parse_value(&e, path)?,
                "beta" => c.beta = parse_value(&e, path)?,
                "I" => c.inputs = Some(parse_value(&e, path)?),
                "R" => c.levels = parse_value(&e, path)?,
                "c" => c.span = parse_value(&e, path)?,
                "ridge" => {
                    c.ridge = match e.value.as_str() {
                        "auto" => Ridge::Auto,
                        _ => Ridge::Fixed(parse_value(&e, path)?),
                    }
                }
                "g_convention" => c.g_convention = parse_value(&e, path)?,
                "x5_mode" => c.x5_mode = parse_value(&e, path)?,
                "include_x4" => c.include_x4 = parse_bool(&e, path)?,
                "roi_access" => c.roi_access = parse_value(&e, path)?,
                "t_min" => c.window.t_min = parse_value(&e, path)?,
                "t_max" => c.window.t_max = parse_value(&e, path)?,
                "seed" => c.seed = parse_value(&e, path)?,
                "n_samples" => c.n_samples = parse_value(&e, path)?,
                "top" => c.top = parse_value(&e, path)?,
                "folds" => c.folds = parse_value(&e, path)?,
                "kde_min_bandwidth" => c.kde_min_bandwidth = parse_value(&e, path)?,
                other => {
                    return Err(Error::parse(path, e.line, format!("unknown key '{other}'")));
                }
            }
        }
        // surface range errors at load time
        c.interference(1.0)?;
        if let RhoChoice::Fixed(r) = c.rho {
            KernelConfig::new(c.family, r)?;
        }
        Ok(c)
    }

    /// Pipeline configuration with kernel bandwidth `rho`.
    pub fn interference(&self, rho: f64) -> Result<InterferenceConfig> {
        let expected = if self.include_x4 { 5 } else { 4 };
        let cfg = InterferenceConfig {
            xi: self.xi,
            beta: self.beta,
            inputs: self.inputs.unwrap_or(expected),
            levels: self.levels,
            span: self.span,
            kernel: KernelConfig::new(self.family, rho)?,
            ridge: self.ridge,
            g_convention: self.g_convention,
            x5_mode: self.x5_mode,
            include_x4: self.include_x4,
            roi_access: self.roi_access,
            window: self.window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let (rho, setting) = match self.rho {
            RhoChoice::Fixed(r) => (r, RhoSetting::Fixed(r)),
            RhoChoice::PerFold => (1.0, RhoSetting::PerFold),
            RhoChoice::Global => (1.0, RhoSetting::Global),
            RhoChoice::CrossValidated => (1.0, RhoSetting::CrossValidated),
        };
        Ok(EvalConfig {
            interference: self.interference(rho)?,
            rho: setting,
            folds: self.folds,
            top: self.top,
            seed: self.seed,
            n_samples: self.n_samples,
            kde_min_bandwidth: self.kde_min_bandwidth,
        })
    }
}
