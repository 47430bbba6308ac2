use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use distreg::config::RunConfig;
use distreg::data_io::{generate_synthetic, load_dataset, Dataset, SyntheticScenario};
use distreg::embedding::{KernelConfig, KernelFamily};
use distreg::evaluation::{
    observations_for, resolve_rho, run_evaluation, score_disruptions, write_densities, write_failures,
    write_metrics, write_scores, EvalConfig,
};
use distreg::network::Disruption;
use distreg::numeric::derive_seed;
use distreg::oracle::{self, Suite};
use distreg::pipeline::{predict, train, PerturbedObservation};
use distreg::regression::MixtureEmbeddingModel;

#[derive(Parser)]
#[command(name = "distreg", version, about = "Distribution regression for network disruptions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute observable and severity scores and flag the top disruptions.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the regression on every selected disruption.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Predict the ROI exit distribution of one disruption.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// `day,t_start,t_end,roi` with roi ids separated by `;`.
        #[arg(long)]
        disruption: String,
        /// Model written by `train`; without it the model is refit on the
        /// selected disruptions other than the target.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Run the k-fold comparison against the baseline and random models.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run brute-force self-checks.
    Oracle {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<(RunConfig, Dataset)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(k) = self.folds {
            cfg.folds = k;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.top {
            cfg.top = t;
        }
        let data = load_dataset(&self.data, cfg.window)?;
        Ok((cfg, data))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<distreg::Error>().is_some_and(|d| d.is_numerical()));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DISTREG_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("DISTREG_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Simulate { scenario, out, seed } => {
            let mut s = SyntheticScenario::from_file(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let data = generate_synthetic(&s)?;
            data.write(&out)?;
            println!(
                "wrote {} days and {} disruptions to {}",
                data.journeys.len(),
                data.disruptions.len(),
                out.display()
            );
        }
        Command::Score { data, out, top, config } => {
            let cfg = match config {
                Some(p) => RunConfig::from_file(&p)?,
                None => RunConfig::default(),
            };
            let dataset = load_dataset(&data, cfg.window)?;
            let icfg = cfg.interference(1.0)?;
            let table = score_disruptions(&dataset, &icfg, top.unwrap_or(cfg.top));
            create_parent(&out)?;
            write_scores(&out, &table)?;
            for (_, id, msg) in &table.failures {
                eprintln!("warning: {id}: {msg}");
            }
            println!("scored {} disruptions, {} selected", table.records.len(), table.selected().len());
        }
        Command::Train { run } => {
            let (cfg, data) = run.load()?;
            let ecfg = cfg.eval_config()?;
            let (obs, failures) = selected_observations(&data, &ecfg, None);
            report_failures(&failures);
            let (model, rho) = fit(&data, &ecfg, &obs)?;
            fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
            write_model(&run.out.join("model.csv"), &model, ecfg.interference.kernel.family(), rho)?;
            let ids: String = obs.iter().map(|o| format!("{}\n", o.disruption.id())).collect();
            write(&run.out.join("training.csv"), format!("id\n{ids}"))?;
            println!("trained on {} disruptions, rho {rho}", obs.len());
        }
        Command::Predict {
            run,
            disruption,
            model,
            n_samples,
        } => {
            let (cfg, data) = run.load()?;
            let mut ecfg = cfg.eval_config()?;
            let z = parse_disruption(&disruption)?;
            z.validate(data.graph.n_nodes(), ecfg.interference.window.t_min, ecfg.interference.window.t_max)?;
            let (model, family, rho) = match model {
                Some(p) => read_model(&p)?,
                None => {
                    let (obs, failures) = selected_observations(&data, &ecfg, Some(&z));
                    report_failures(&failures);
                    let (m, rho) = fit(&data, &ecfg, &obs)?;
                    (m, ecfg.interference.kernel.family(), rho)
                }
            };
            ecfg.interference.kernel = KernelConfig::new(family, rho)?;
            let n = n_samples.unwrap_or(cfg.n_samples);
            let p = predict(
                &model,
                &data.days,
                &z,
                &data.graph,
                &ecfg.interference,
                n,
                derive_seed(cfg.seed, 2, 0),
            )?;
            fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
            let mut theta = String::from("component,weight\n");
            for (label, w) in p.mixture.basis.labels().iter().zip(&p.mixture.theta) {
                writeln!(theta, "{label},{w}")?;
            }
            write(&run.out.join("theta.csv"), theta)?;
            let mut samples = z.roi.iter().map(|s| format!("s{s}")).collect::<Vec<_>>().join(",");
            samples.push('\n');
            for row in p.samples.rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(samples, "{}", line.join(","))?;
            }
            write(&run.out.join("samples.csv"), samples)?;
            write(
                &run.out.join("summary.csv"),
                format!(
                    "key,value\nid,{}\nrho,{rho}\nfit_residual,{}\nn_samples,{n}\n",
                    z.id(),
                    p.mixture.fit_residual
                ),
            )?;
            println!("fit residual {}", p.mixture.fit_residual);
        }
        Command::Evaluate { run } => {
            let (cfg, data) = run.load()?;
            let ecfg = cfg.eval_config()?;
            let report = run_evaluation(&data, &ecfg)?;
            fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
            write_scores(&run.out.join("scores.csv"), &report.scores)?;
            write_metrics(&run.out.join("metrics.csv"), &report)?;
            write_densities(&run.out, &report)?;
            write_failures(&run.out.join("failures.csv"), &report.failures)?;
            let gap = report
                .median_nll_gap_vs_baseline()
                .map_or("NA".to_string(), |g| g.to_string());
            let summary = format!(
                "key,value\nevaluated,{}\nfailed,{}\nnll_win_rate_vs_random,{}\nnll_win_rate_vs_baseline,{}\n\
                 se_win_rate_vs_baseline,{}\nmedian_nll_gap_vs_baseline,{gap}\n",
                report.rows.len(),
                report.failures.len(),
                report.nll_win_rate_vs_random(),
                report.nll_win_rate_vs_baseline(),
                report.se_win_rate_vs_baseline(),
            );
            write(&run.out.join("summary.csv"), summary.clone())?;
            print!("{}", summary.replace(',', " "));
        }
        Command::Oracle { suite } => {
            let suite: Suite = suite.parse()?;
            let cases = oracle::run(suite)?;
            let failed = cases.iter().filter(|c| !c.passed).count();
            for c in &cases {
                println!("{c}");
            }
            println!("{} passed, {failed} failed", cases.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, content: String) -> anyhow::Result<()> {
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn report_failures(failures: &[(usize, String, String)]) {
    for (_, id, msg) in failures {
        eprintln!("warning: skipped {id}: {msg}");
    }
}

/// Observations of the selected disruptions, leaving out `exclude`.
fn selected_observations(
    data: &Dataset,
    cfg: &EvalConfig,
    exclude: Option<&Disruption>,
) -> (Vec<PerturbedObservation>, Vec<(usize, String, String)>) {
    let table = score_disruptions(data, &cfg.interference, cfg.top);
    let mut failures = table.failures.clone();
    let indices: Vec<usize> = table
        .selected()
        .into_iter()
        .filter(|&i| exclude.is_none_or(|z| data.disruptions[i] != *z))
        .collect();
    let obs = observations_for(data, &indices, &mut failures)
        .into_iter()
        .map(|(_, o)| o)
        .collect();
    (obs, failures)
}

fn fit(data: &Dataset, cfg: &EvalConfig, obs: &[PerturbedObservation]) -> anyhow::Result<(MixtureEmbeddingModel, f64)> {
    if obs.is_empty() {
        bail!("no usable training disruptions");
    }
    let rho = resolve_rho(data, cfg, obs, 0)?;
    let mut icfg = cfg.interference.clone();
    icfg.kernel = KernelConfig::new(icfg.kernel.family(), rho)?;
    Ok((train(&data.days, obs, &data.graph, &icfg)?, rho))
}

fn parse_disruption(s: &str) -> anyhow::Result<Disruption> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [day, t_start, t_end, roi] = parts[..] else {
        bail!("disruption must be 'day,t_start,t_end,roi', got '{s}'");
    };
    let roi = roi
        .split(';')
        .map(|v| v.trim().parse::<usize>().with_context(|| format!("invalid roi id '{v}'")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Disruption {
        day: day.parse().context("invalid day")?,
        t_start: t_start.parse().context("invalid t_start")?,
        t_end: t_end.parse().context("invalid t_end")?,
        roi,
    })
}

fn write_model(path: &Path, model: &MixtureEmbeddingModel, family: KernelFamily, rho: f64) -> anyhow::Result<()> {
    let mut s = format!("key,value\nfamily,{family}\nrho,{rho}\n");
    for (i, a) in model.alpha.iter().enumerate() {
        writeln!(s, "alpha_{},{a}", i + 1)?;
    }
    write(path, s)
}

fn read_model(path: &Path) -> anyhow::Result<(MixtureEmbeddingModel, KernelFamily, f64)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut family = KernelFamily::Gaussian;
    let mut rho = None;
    let mut alpha = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let Some((k, v)) = line.split_once(',') else {
            bail!("{}:{}: expected key,value", path.display(), i + 1);
        };
        let parse = || v.parse::<f64>().with_context(|| format!("{}:{}: invalid number '{v}'", path.display(), i + 1));
        match k {
            "family" => family = v.parse()?,
            "rho" => rho = Some(parse()?),
            _ if k.starts_with("alpha_") => alpha.push(parse()?),
            _ => bail!("{}:{}: unknown key '{k}'", path.display(), i + 1),
        }
    }
    let rho = rho.with_context(|| format!("{}: missing rho", path.display()))?;
    if alpha.is_empty() {
        bail!("{}: no coefficients", path.display());
    }
    Ok((MixtureEmbeddingModel { alpha }, family, rho))
}
