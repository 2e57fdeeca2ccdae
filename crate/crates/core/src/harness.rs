//! Monte Carlo experiments over problem instances and replications.
//!
//! Seeds are derived with [`SimRng::split_path`] from the experiment seed:
//! `[s, instance, 0]` draws the coefficients, `[s, instance, 1, rep, 0]` draws
//! the dataset shared by every method, and `[s, instance, 1, rep, 1 + m]`
//! drives the fold assignment of method `m`. Per-rep results are collected in
//! rep order before any reduction, so output is bit-identical for any number
//! of worker threads.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dgp::{
    default_discrete_eta, default_eps, generate_dataset, generate_instance, CoefficientLaw,
    NoiseDistribution,
};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimateReport, EstimatorConfig};
use crate::rng::SimRng;

/// Failure rate above which a run is flagged.
pub const FAILURE_FLAG_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    #[default]
    Desk,
    Paper,
}

impl FromStr for ScalePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(ScalePreset::Desk),
            "paper" => Ok(ScalePreset::Paper),
            other => Err(Error::InvalidParameter(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidParameter(format!("unknown format {other:?}"))),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        })
    }
}

fn default_theta0() -> f64 {
    3.0
}

fn default_eta() -> NoiseDistribution {
    default_discrete_eta()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub p: usize,
    pub sparsity_grid: Vec<usize>,
    pub sigma_eps: f64,
    pub n_instances: usize,
    pub n_reps: usize,
    pub methods: Vec<EstimatorConfig>,
    pub seed: u64,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default)]
    pub scale_preset: ScalePreset,
    #[serde(default = "default_theta0")]
    pub theta0: f64,
    #[serde(default = "default_eta")]
    pub eta: NoiseDistribution,
    #[serde(default)]
    pub coefficient_law: CoefficientLaw,
    /// Keep every per-rep estimate in the results (for histograms).
    #[serde(default)]
    pub keep_samples: bool,
}

impl ExperimentConfig {
    /// `n = 2000, p = 200, s in {0, 20, 40, 80}`, 10 instances of 100 reps.
    pub fn desk() -> Self {
        Self {
            n: 2000,
            p: 200,
            sparsity_grid: vec![0, 20, 40, 80],
            sigma_eps: 1.0,
            n_instances: 10,
            n_reps: 100,
            methods: vec![EstimatorConfig::dml(), EstimatorConfig::second_order(3)],
            seed: 0,
            output_path: None,
            scale_preset: ScalePreset::Desk,
            theta0: 3.0,
            eta: default_discrete_eta(),
            coefficient_law: CoefficientLaw::default(),
            keep_samples: false,
        }
    }

    /// `n = 5000, p = 1000, s = 100`, 100 instances of 2000 reps.
    pub fn paper() -> Self {
        Self {
            n: 5000,
            p: 1000,
            sparsity_grid: vec![100],
            n_instances: 100,
            n_reps: 2000,
            scale_preset: ScalePreset::Paper,
            ..Self::desk()
        }
    }

    pub fn preset(preset: ScalePreset) -> Self {
        match preset {
            ScalePreset::Desk => Self::desk(),
            ScalePreset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 8 || self.p == 0 || self.n_instances == 0 || self.n_reps == 0 {
            return Err(Error::InvalidParameter(
                "n >= 8 and p, n_instances, n_reps > 0 are required".into(),
            ));
        }
        if self.sparsity_grid.is_empty() {
            return Err(Error::InvalidParameter("sparsity_grid is empty".into()));
        }
        if let Some(&s) = self.sparsity_grid.iter().find(|&&s| s > self.p) {
            return Err(Error::InvalidParameter(format!(
                "sparsity {s} exceeds p = {}",
                self.p
            )));
        }
        if !(self.sigma_eps > 0.0) {
            return Err(Error::InvalidParameter("sigma_eps must be > 0".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("no methods configured".into()));
        }
        for m in &self.methods {
            m.validate()?;
        }
        self.eta.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Aggregates for one (method, s, instance) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub sigma_eps: f64,
    pub instance_id: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub bias: f64,
    /// Population (1/N) standard deviation of the estimates.
    pub sd: f64,
    pub mse: f64,
    pub coverage_95: f64,
    pub mean_theta: f64,
    pub mean_se: f64,
    pub j_hat: f64,
    pub nuisance_l2_q: f64,
    pub nuisance_l2_gamma: f64,
    pub mu2_err: Option<f64>,
    pub mu3_err: Option<f64>,
    /// Largest `|moment sum at theta_hat| / n_second_stage` over the reps.
    pub max_root_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let m = v.len();
        let median = if m % 2 == 1 {
            v[m / 2]
        } else {
            0.5 * (v[m / 2 - 1] + v[m / 2])
        };
        Spread {
            median,
            min: v[0],
            max: v[m - 1],
        }
    }
}

/// Summary across instances for one (method, s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub s: usize,
    pub bias: Spread,
    pub abs_bias: Spread,
    pub sd: Spread,
    pub mse: Spread,
    /// Coverage over all successful reps of all instances.
    pub coverage_95: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResults {
    pub n: usize,
    pub p: usize,
    pub sigma_eps: f64,
    pub theta0: f64,
    pub seed: u64,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<MethodSummary>,
    pub total_reps: usize,
    pub failed_reps: usize,
    /// Set when the failure rate reaches [`FAILURE_FLAG_RATE`].
    pub flagged: bool,
}

impl McResults {
    pub fn summary(&self, method: &str, s: usize) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|m| m.method == method && m.s == s)
    }

    pub fn cells_for<'a>(
        &'a self,
        method: &'a str,
        s: usize,
    ) -> impl Iterator<Item = &'a CellResult> + 'a {
        self.cells
            .iter()
            .filter(move |c| c.method == method && c.s == s)
    }
}

// Outcome of one method on one rep; `None` marks an excluded rep.
type RepOutcome = Vec<Option<EstimateReport>>;

fn run_rep(
    cfg: &ExperimentConfig,
    instance: &crate::dgp::PlrInstance,
    path: [u64; 3],
    rep: usize,
) -> Result<RepOutcome> {
    let base = SimRng::new(cfg.seed);
    let data = generate_dataset(
        instance,
        cfg.n,
        &mut base.split_path(&[path[0], path[1], path[2], rep as u64, 0]),
    )?;
    cfg.methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let mut rng = base.split_path(&[path[0], path[1], path[2], rep as u64, 1 + m as u64]);
            match estimate(&data, Some(instance), method, &mut rng) {
                Ok(report) if report.lasso_nonconverged == 0 => Ok(Some(report)),
                Ok(_) => {
                    log::warn!("rep {rep}: lasso did not converge, excluded");
                    Ok(None)
                }
                Err(Error::DegenerateJacobian { .. }) => {
                    log::warn!("rep {rep}: degenerate jacobian, excluded");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn run_reps(
    cfg: &ExperimentConfig,
    instance: &crate::dgp::PlrInstance,
    path: [u64; 3],
) -> Result<Vec<RepOutcome>> {
    use rayon::prelude::*;
    (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| run_rep(cfg, instance, path, rep))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_reps(
    cfg: &ExperimentConfig,
    instance: &crate::dgp::PlrInstance,
    path: [u64; 3],
) -> Result<Vec<RepOutcome>> {
    (0..cfg.n_reps)
        .map(|rep| run_rep(cfg, instance, path, rep))
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = v
        .into_iter()
        .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn aggregate_cell(
    cfg: &ExperimentConfig,
    s: usize,
    instance_id: usize,
    method: &EstimatorConfig,
    reports: Vec<&EstimateReport>,
    n_failed: usize,
) -> CellResult {
    let thetas: Vec<f64> = reports.iter().map(|r| r.theta_hat).collect();
    let mean_theta = mean(thetas.iter().copied());
    let bias = mean_theta - cfg.theta0;
    let sd = mean(thetas.iter().map(|t| (t - mean_theta).powi(2))).sqrt();
    let opt_mean = |f: fn(&EstimateReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| mean(v))
    };
    CellResult {
        method: method.method.label(),
        n: cfg.n,
        p: cfg.p,
        s,
        sigma_eps: cfg.sigma_eps,
        instance_id,
        n_ok: reports.len(),
        n_failed,
        bias,
        sd,
        mse: bias * bias + sd * sd,
        coverage_95: mean(
            reports
                .iter()
                .map(|r| f64::from(u8::from(r.covers(cfg.theta0)))),
        ),
        mean_theta,
        mean_se: mean(reports.iter().map(|r| r.se_hat)),
        j_hat: mean(reports.iter().map(|r| r.j_hat)),
        nuisance_l2_q: opt_mean(|r| r.mean_q_l2_err()).unwrap_or(f64::NAN),
        nuisance_l2_gamma: opt_mean(|r| r.mean_gamma_l2_err()).unwrap_or(f64::NAN),
        mu2_err: opt_mean(|r| r.mean_mu2_err()),
        mu3_err: opt_mean(|r| r.mean_mu3_err()),
        max_root_residual: reports
            .iter()
            .map(|r| r.moment_sum_at_root.abs() / r.n_second_stage as f64)
            .fold(0.0, f64::max),
        samples: cfg.keep_samples.then_some(thetas),
    }
}

fn summarize(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<MethodSummary> {
    let mut out = Vec::new();
    for &s in &cfg.sparsity_grid {
        for method in &cfg.methods {
            let label = method.method.label();
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.s == s && c.method == label)
                .collect();
            let ok: Vec<&&CellResult> = group.iter().filter(|c| c.n_ok > 0).collect();
            if ok.is_empty() {
                continue;
            }
            let pick = |f: fn(&CellResult) -> f64| {
                Spread::of(&ok.iter().map(|c| f(c)).collect::<Vec<_>>())
            };
            let n_ok: usize = group.iter().map(|c| c.n_ok).sum();
            let covered: f64 = ok.iter().map(|c| c.coverage_95 * c.n_ok as f64).sum();
            out.push(MethodSummary {
                method: label,
                s,
                bias: pick(|c| c.bias),
                abs_bias: pick(|c| c.bias.abs()),
                sd: pick(|c| c.sd),
                mse: pick(|c| c.mse),
                coverage_95: covered / n_ok as f64,
                n_ok,
                n_failed: group.iter().map(|c| c.n_failed).sum(),
            });
        }
    }
    out
}

/// Runs every method on `n_reps` fresh datasets for each of `n_instances`
/// coefficient draws at each sparsity level.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<McResults> {
    cfg.validate()?;
    let root = SimRng::new(cfg.seed);
    let eps = default_eps(cfg.sigma_eps)?;
    let mut cells = Vec::new();
    let mut failed_reps = 0;
    for &s in &cfg.sparsity_grid {
        for inst_id in 0..cfg.n_instances {
            let instance = generate_instance(
                cfg.p,
                s,
                cfg.theta0,
                cfg.coefficient_law,
                cfg.eta.clone(),
                eps.clone(),
                &mut root.split_path(&[s as u64, inst_id as u64, 0]),
            )?;
            let outcomes = run_reps(cfg, &instance, [s as u64, inst_id as u64, 1])?;
            for (m, method) in cfg.methods.iter().enumerate() {
                let reports: Vec<&EstimateReport> =
                    outcomes.iter().filter_map(|o| o[m].as_ref()).collect();
                let n_failed = cfg.n_reps - reports.len();
                failed_reps += n_failed;
                cells.push(aggregate_cell(cfg, s, inst_id, method, reports, n_failed));
            }
        }
    }
    let total_reps = cfg.sparsity_grid.len() * cfg.n_instances * cfg.n_reps * cfg.methods.len();
    let flagged = failed_reps as f64 >= FAILURE_FLAG_RATE * total_reps as f64;
    if failed_reps > 0 {
        log::warn!(
            "{failed_reps} of {total_reps} method-reps excluded ({:.2}%)",
            100.0 * failed_reps as f64 / total_reps as f64
        );
    }
    let summaries = summarize(cfg, &cells);
    Ok(McResults {
        n: cfg.n,
        p: cfg.p,
        sigma_eps: cfg.sigma_eps,
        theta0: cfg.theta0,
        seed: cfg.seed,
        cells,
        summaries,
        total_reps,
        failed_reps,
        flagged,
    })
}

/// [`run_monte_carlo`] on a dedicated pool of `threads` workers.
pub fn run_monte_carlo_with_threads(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<McResults> {
    #[cfg(feature = "parallel")]
    if let Some(t) = threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        return pool.install(|| run_monte_carlo(cfg));
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    run_monte_carlo(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    Sparsity(Vec<usize>),
    SigmaEps(Vec<f64>),
    NpPairs(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub results: McResults,
}

/// One [`run_monte_carlo`] per grid value. Every point reuses the experiment
/// seed, so methods and grid points share instance and dataset streams.
pub fn sweep(cfg: &ExperimentConfig, axis: &SweepAxis) -> Result<Vec<SweepPoint>> {
    let points: Vec<(String, ExperimentConfig)> = match axis {
        SweepAxis::Sparsity(grid) => grid
            .iter()
            .map(|&s| {
                (
                    format!("s={s}"),
                    ExperimentConfig {
                        sparsity_grid: vec![s],
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
        SweepAxis::SigmaEps(grid) => grid
            .iter()
            .map(|&sigma_eps| {
                (
                    format!("sigma_eps={sigma_eps}"),
                    ExperimentConfig {
                        sigma_eps,
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
        SweepAxis::NpPairs(grid) => grid
            .iter()
            .map(|&(n, p)| {
                (
                    format!("n={n},p={p}"),
                    ExperimentConfig {
                        n,
                        p,
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
    };
    if points.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    points
        .into_iter()
        .map(|(label, c)| {
            Ok(SweepPoint {
                label,
                results: run_monte_carlo(&c)?,
            })
        })
        .collect()
}

/// One CSV row; the column order is the published results schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub sigma_eps: f64,
    pub instance_id: usize,
    pub bias: f64,
    pub sd: f64,
    pub mse: f64,
    pub coverage_95: f64,
    pub mean_theta: f64,
    pub j_hat: f64,
    pub nuisance_l2_q: f64,
    pub nuisance_l2_gamma: f64,
    pub mu2_err: Option<f64>,
    pub mu3_err: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "method",
    "n",
    "p",
    "s",
    "sigma_eps",
    "instance_id",
    "bias",
    "sd",
    "mse",
    "coverage_95",
    "mean_theta",
    "j_hat",
    "nuisance_l2_q",
    "nuisance_l2_gamma",
    "mu2_err",
    "mu3_err",
];

impl From<&CellResult> for CsvRow {
    fn from(c: &CellResult) -> Self {
        CsvRow {
            method: c.method.clone(),
            n: c.n,
            p: c.p,
            s: c.s,
            sigma_eps: c.sigma_eps,
            instance_id: c.instance_id,
            bias: c.bias,
            sd: c.sd,
            mse: c.mse,
            coverage_95: c.coverage_95,
            mean_theta: c.mean_theta,
            j_hat: c.j_hat,
            nuisance_l2_q: c.nuisance_l2_q,
            nuisance_l2_gamma: c.nuisance_l2_gamma,
            mu2_err: c.mu2_err,
            mu3_err: c.mu3_err,
        }
    }
}

/// Writes the per-cell table as CSV, or the full results as JSON.
pub fn write_results(results: &McResults, path: &Path, format: OutputFormat) -> Result<()> {
    match format {
        OutputFormat::Json => {
            let text = serde_json::to_string_pretty(results)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        OutputFormat::Csv => write_csv(results.cells.iter(), path),
    }
}

/// CSV over the cells of several runs (for sweeps).
pub fn write_csv<'a>(cells: impl Iterator<Item = &'a CellResult>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.write_record(CSV_COLUMNS)?;
    for c in cells {
        w.serialize(CsvRow::from(c))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    if let Some(missing) = CSV_COLUMNS
        .iter()
        .find(|c| !headers.iter().any(|h| h == **c))
    {
        return Err(Error::InvalidParameter(format!(
            "{}: missing column {missing}",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn read_json(path: &Path) -> Result<McResults> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// JSON Schema for [`McResults`] documents.
pub const RESULTS_SCHEMA: &str = include_str!("../schemas/mc_results.schema.json");
