//! Second-stage Z-estimation of the treatment effect.
//!
//! Every implemented moment is linear in theta, so the empirical moment
//! equation `sum_t (a_t - theta e_t) w_t = 0` has the closed-form root
//! `theta = sum a_t w_t / sum e_t w_t`, with outcome residual
//! `a_t = y_t - <x_t, q_hat>`, treatment residual `e_t = t_t - <x_t, gamma_hat>`
//! and weight `w_t = e_t` (first order) or `e_t^r - mu_r - r e_t mu_{r-1}`
//! (second order). Cross-fitting pools numerators and denominators across folds.
//!
//! Fold topology for the second-order moment with estimated residual moments:
//! the first stage is fit on the complement of fold `k`; fold `k` is halved,
//! one half estimates `mu2, mu3` from residuals of the out-of-fold `gamma_hat`
//! and the other half enters the second stage, then the halves swap. The
//! alternative [`NestedTopology::SplitComplement`] instead halves the
//! complement into a first-stage part and a residual-moment part.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dgp::{exact_noise_moments, Dataset, PlrInstance};
use crate::error::{Error, Result};
use crate::lasso::{lambda_experiment, lambda_theory, lasso_fit, LassoConfig};
use crate::moments::{
    estimate_residual_moments, moment_weight, residual_moment_pair, MomentMode, MomentOrder,
    MomentSpec, NuisancePoint,
};
use crate::rng::SimRng;

/// Relative threshold on `|sum e w| / n` below which the Jacobian is treated as zero.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;

const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    DmlFirstOrder,
    SecondOrder { r: u8 },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::DmlFirstOrder => "dml".to_string(),
            Method::SecondOrder { r } => format!("second_order_r{r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    CrossFit,
    SampleSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LambdaRule {
    /// `sqrt(log p / n)`.
    #[default]
    Experiment,
    /// `2 C M sqrt(3 log p / n)`.
    Theory { c: f64, m: f64 },
}

impl LambdaRule {
    pub fn lambda(&self, p: usize, n: usize) -> f64 {
        match *self {
            LambdaRule::Experiment => lambda_experiment(p as f64, n as f64),
            LambdaRule::Theory { c, m } => lambda_theory(c, m, p as f64, n as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NestedTopology {
    /// Halve each second-stage fold between residual-moment estimation and
    /// the second stage, and swap the halves.
    #[default]
    SplitSecondStage,
    /// Halve each first-stage complement between the Lasso fits and
    /// residual-moment estimation.
    SplitComplement,
}

fn default_k() -> usize {
    2
}

fn default_scale() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    LassoConfig::default().max_iters
}

fn default_tol() -> f64 {
    LassoConfig::default().tol
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    #[serde(default = "default_k")]
    pub k_folds: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub lambda_rule: LambdaRule,
    /// Multiplier on the penalty of the outcome (`Y` on `X`) Lasso.
    #[serde(default = "default_scale")]
    pub outcome_lambda_scale: f64,
    #[serde(default)]
    pub moment_mode: MomentMode,
    #[serde(default)]
    pub nested: NestedTopology,
    #[serde(default = "default_max_iters")]
    pub lasso_max_iters: usize,
    #[serde(default = "default_tol")]
    pub lasso_tol: f64,
}

impl EstimatorConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            k_folds: 2,
            scheme: Scheme::CrossFit,
            lambda_rule: LambdaRule::Experiment,
            outcome_lambda_scale: 1.0,
            moment_mode: MomentMode::Estimated,
            nested: NestedTopology::SplitSecondStage,
            lasso_max_iters: default_max_iters(),
            lasso_tol: default_tol(),
        }
    }

    pub fn dml() -> Self {
        Self::new(Method::DmlFirstOrder)
    }

    pub fn second_order(r: u8) -> Self {
        Self::new(Method::SecondOrder { r })
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_mode(mut self, mode: MomentMode) -> Self {
        self.moment_mode = mode;
        self
    }

    pub fn with_folds(mut self, k: usize) -> Self {
        self.k_folds = k;
        self
    }

    pub fn moment_spec(&self) -> MomentSpec {
        match self.method {
            Method::DmlFirstOrder => MomentSpec::first_order(),
            Method::SecondOrder { r } => MomentSpec {
                order: MomentOrder::SecondOrder { r },
                mode: self.moment_mode,
            },
        }
    }

    /// Whether a separate subsample is needed to estimate `mu2, mu3`.
    pub fn needs_moment_stage(&self) -> bool {
        matches!(self.method, Method::SecondOrder { .. })
            && self.moment_mode == MomentMode::Estimated
    }

    pub fn validate(&self) -> Result<()> {
        self.moment_spec().validate()?;
        if self.k_folds < 2 {
            return Err(Error::InvalidParameter(format!(
                "k_folds must be >= 2, got {}",
                self.k_folds
            )));
        }
        if !(self.outcome_lambda_scale > 0.0) {
            return Err(Error::InvalidParameter(
                "outcome_lambda_scale must be > 0".into(),
            ));
        }
        if let LambdaRule::Theory { c, m } = self.lambda_rule {
            if !(c > 0.0 && m > 0.0) {
                return Err(Error::InvalidParameter(
                    "theory lambda needs C, M > 0".into(),
                ));
            }
        }
        LassoConfig {
            lambda: 0.0,
            max_iters: self.lasso_max_iters,
            tol: self.lasso_tol,
            standardize: false,
        }
        .validate()
    }
}

/// Index sets for one first-stage fit and the evaluations that use it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub nuisance_idx: Vec<usize>,
    pub evaluations: Vec<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    /// Rows used to estimate `mu2, mu3` (empty when not needed).
    pub moment_idx: Vec<usize>,
    pub second_stage_idx: Vec<usize>,
}

fn halves(v: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mid = v.len() / 2;
    (v[..mid].to_vec(), v[mid..].to_vec())
}

/// Assigns rows to stages. Rows are shuffled once by `rng`; cross-fit folds
/// take every `K`-th shuffled row, so fold sizes differ by at most one.
pub fn plan_folds(n: usize, cfg: &EstimatorConfig, rng: &mut SimRng) -> Result<Vec<FoldPlan>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let nested = cfg.needs_moment_stage();
    match cfg.scheme {
        Scheme::SampleSplit => {
            if n < 4 {
                return Err(Error::InvalidDimensions(format!(
                    "sample splitting needs n >= 4, got {n}"
                )));
            }
            let (a, b) = halves(&perm);
            let evaluation = if nested {
                let (b1, b2) = halves(&b);
                Evaluation {
                    moment_idx: b1,
                    second_stage_idx: b2,
                }
            } else {
                Evaluation {
                    moment_idx: Vec::new(),
                    second_stage_idx: b,
                }
            };
            Ok(vec![FoldPlan {
                nuisance_idx: a,
                evaluations: vec![evaluation],
            }])
        }
        Scheme::CrossFit => {
            let k = cfg.k_folds;
            let min_n = if nested { 2 * k } else { k };
            if n < min_n.max(4) {
                return Err(Error::InvalidDimensions(format!(
                    "{k}-fold cross-fitting needs n >= {}, got {n}",
                    min_n.max(4)
                )));
            }
            let folds: Vec<Vec<usize>> = (0..k)
                .map(|f| perm.iter().skip(f).step_by(k).copied().collect())
                .collect();
            Ok(folds
                .iter()
                .enumerate()
                .map(|(f, fold)| {
                    let complement: Vec<usize> = folds
                        .iter()
                        .enumerate()
                        .filter(|&(g, _)| g != f)
                        .flat_map(|(_, v)| v.iter().copied())
                        .collect();
                    if !nested {
                        return FoldPlan {
                            nuisance_idx: complement,
                            evaluations: vec![Evaluation {
                                moment_idx: Vec::new(),
                                second_stage_idx: fold.clone(),
                            }],
                        };
                    }
                    match cfg.nested {
                        NestedTopology::SplitSecondStage => {
                            let (a, b) = halves(fold);
                            FoldPlan {
                                nuisance_idx: complement,
                                evaluations: vec![
                                    Evaluation {
                                        moment_idx: a.clone(),
                                        second_stage_idx: b.clone(),
                                    },
                                    Evaluation {
                                        moment_idx: b,
                                        second_stage_idx: a,
                                    },
                                ],
                            }
                        }
                        NestedTopology::SplitComplement => {
                            let (c1, c2) = halves(&complement);
                            FoldPlan {
                                nuisance_idx: c1,
                                evaluations: vec![Evaluation {
                                    moment_idx: c2,
                                    second_stage_idx: fold.clone(),
                                }],
                            }
                        }
                    }
                })
                .collect())
        }
    }
}

/// Out-of-fold linear nuisance coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStageFit {
    pub q_hat: Array1<f64>,
    pub gamma_hat: Array1<f64>,
    pub q_converged: bool,
    pub gamma_converged: bool,
    pub q_iterations: usize,
    pub gamma_iterations: usize,
}

pub trait FirstStage {
    /// Fits `q` (outcome on covariates) and `gamma` (treatment on covariates)
    /// on `train`. `n_total` is the size of the full dataset.
    fn fit(&self, train: &Dataset, n_total: usize) -> Result<FirstStageFit>;
}

/// Lasso regressions of `Y` on `X` and `T` on `X`. The penalty is set from the
/// full dataset size, so every fold uses the same `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoFirstStage {
    pub lambda_rule: LambdaRule,
    pub outcome_lambda_scale: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl LassoFirstStage {
    pub fn from_config(cfg: &EstimatorConfig) -> Self {
        Self {
            lambda_rule: cfg.lambda_rule,
            outcome_lambda_scale: cfg.outcome_lambda_scale,
            max_iters: cfg.lasso_max_iters,
            tol: cfg.lasso_tol,
        }
    }
}

impl FirstStage for LassoFirstStage {
    fn fit(&self, train: &Dataset, n_total: usize) -> Result<FirstStageFit> {
        let lambda = self.lambda_rule.lambda(train.p(), n_total);
        let base = LassoConfig {
            lambda,
            max_iters: self.max_iters,
            tol: self.tol,
            standardize: false,
        };
        let q = lasso_fit(
            train.x.view(),
            train.y.view(),
            &LassoConfig {
                lambda: lambda * self.outcome_lambda_scale,
                ..base
            },
        )?;
        let g = lasso_fit(train.x.view(), train.t.view(), &base)?;
        Ok(FirstStageFit {
            q_hat: q.beta_hat,
            gamma_hat: g.beta_hat,
            q_converged: q.converged,
            gamma_converged: g.converged,
            q_iterations: q.iterations,
            gamma_iterations: g.iterations,
        })
    }
}

/// Injected coefficients, ignoring the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedFirstStage {
    pub q: Array1<f64>,
    pub gamma: Array1<f64>,
}

impl FixedFirstStage {
    pub fn oracle(instance: &PlrInstance) -> Self {
        Self {
            q: Array1::from(instance.q0.clone()),
            gamma: Array1::from(instance.gamma0.clone()),
        }
    }
}

impl FirstStage for FixedFirstStage {
    fn fit(&self, train: &Dataset, _n_total: usize) -> Result<FirstStageFit> {
        if self.q.len() != train.p() || self.gamma.len() != train.p() {
            return Err(Error::InvalidDimensions(format!(
                "fixed nuisance has length {} / {}, data has p = {}",
                self.q.len(),
                self.gamma.len(),
                train.p()
            )));
        }
        Ok(FirstStageFit {
            q_hat: self.q.clone(),
            gamma_hat: self.gamma.clone(),
            q_converged: true,
            gamma_converged: true,
            q_iterations: 0,
            gamma_iterations: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NuisanceDiagnostics {
    pub q_l2_err: Option<f64>,
    pub gamma_l2_err: Option<f64>,
    pub mu2_err: Option<f64>,
    pub mu3_err: Option<f64>,
    pub q_converged: bool,
    pub gamma_converged: bool,
    pub q_iterations: usize,
    pub gamma_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEstimate {
    pub q_hat: Array1<f64>,
    pub gamma_hat: Array1<f64>,
    /// `None` when the moment does not use residual moments.
    pub mu2_hat: Option<f64>,
    pub mu3_hat: Option<f64>,
    pub mode: MomentMode,
    pub diagnostics: NuisanceDiagnostics,
}

impl NuisanceEstimate {
    /// `(mu_{r-1}, mu_r)` for `spec`, zero for the first-order moment.
    pub fn moment_pair(&self, spec: &MomentSpec) -> (f64, f64) {
        match spec.order {
            MomentOrder::FirstOrder => (0.0, 0.0),
            MomentOrder::SecondOrder { r } => {
                residual_moment_pair(r, self.mu2_hat.unwrap_or(0.0), self.mu3_hat.unwrap_or(0.0))
            }
        }
    }
}

/// Per-observation residuals and weights of the second stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SecondStageSample {
    /// `y - <x, q_hat>`
    pub outcome_resid: Vec<f64>,
    /// `t - <x, gamma_hat>`
    pub treat_resid: Vec<f64>,
    pub weight: Vec<f64>,
}

impl SecondStageSample {
    pub fn from_fold(
        x: ArrayView2<f64>,
        t: ArrayView1<f64>,
        y: ArrayView1<f64>,
        nuisance: &NuisanceEstimate,
        spec: &MomentSpec,
    ) -> Result<Self> {
        let n = x.nrows();
        if t.len() != n || y.len() != n {
            return Err(Error::InvalidDimensions(format!(
                "fold has {n} rows, t has {}, y has {}",
                t.len(),
                y.len()
            )));
        }
        if x.ncols() != nuisance.q_hat.len() || x.ncols() != nuisance.gamma_hat.len() {
            return Err(Error::InvalidDimensions(
                "nuisance length does not match p".into(),
            ));
        }
        let (mu_prev, mu_r) = nuisance.moment_pair(spec);
        let np = NuisancePoint {
            q: 0.0,
            g: 0.0,
            mu_prev,
            mu_r,
        };
        let a = &y - &x.dot(&nuisance.q_hat);
        let e = &t - &x.dot(&nuisance.gamma_hat);
        let weight = e.iter().map(|&ei| moment_weight(spec, ei, &np)).collect();
        Ok(Self {
            outcome_resid: a.to_vec(),
            treat_resid: e.to_vec(),
            weight,
        })
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn append(&mut self, other: SecondStageSample) {
        self.outcome_resid.extend(other.outcome_resid);
        self.treat_resid.extend(other.treat_resid);
        self.weight.extend(other.weight);
    }

    pub fn numerator(&self) -> f64 {
        self.outcome_resid
            .iter()
            .zip(&self.weight)
            .map(|(a, w)| a * w)
            .sum()
    }

    /// `sum e w`, equal to minus the summed theta-derivative of the moment.
    pub fn denominator(&self) -> f64 {
        self.treat_resid
            .iter()
            .zip(&self.weight)
            .map(|(e, w)| e * w)
            .sum()
    }

    pub fn moment_values(&self, theta: f64) -> Vec<f64> {
        self.outcome_resid
            .iter()
            .zip(&self.treat_resid)
            .zip(&self.weight)
            .map(|((a, e), w)| (a - theta * e) * w)
            .collect()
    }

    pub fn moment_sum(&self, theta: f64) -> f64 {
        self.moment_values(theta).iter().sum()
    }

    /// Root of the empirical moment equation.
    pub fn solve(&self) -> Result<f64> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptySample("second stage"));
        }
        let den = self.denominator();
        if !(den.abs() >= DEGENERACY_THRESHOLD * n as f64) {
            return Err(Error::DegenerateJacobian {
                denominator: den.abs(),
                n,
            });
        }
        Ok(self.numerator() / den)
    }
}

/// Solves the empirical moment equation on one fold.
pub fn solve_theta(
    x: ArrayView2<f64>,
    t: ArrayView1<f64>,
    y: ArrayView1<f64>,
    nuisance: &NuisanceEstimate,
    spec: &MomentSpec,
) -> Result<f64> {
    SecondStageSample::from_fold(x, t, y, nuisance, spec)?.solve()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub j_hat: f64,
    pub v_hat: f64,
    pub se_hat: f64,
    /// Standard error of `j_hat` as a sample mean.
    pub j_std_error: f64,
}

/// Plug-in sandwich variance: `J = mean(d m / d theta)`, `V = var(m)` at
/// `theta_hat`, `se = sqrt(V / J^2 / n2)` with `n2` second-stage observations.
pub fn estimate_variance(sample: &SecondStageSample, theta_hat: f64) -> Result<VarianceEstimate> {
    let n2 = sample.len();
    if n2 == 0 {
        return Err(Error::EmptySample("second stage"));
    }
    let nf = n2 as f64;
    let dtheta: Vec<f64> = sample
        .treat_resid
        .iter()
        .zip(&sample.weight)
        .map(|(e, w)| -e * w)
        .collect();
    let j_hat = dtheta.iter().sum::<f64>() / nf;
    if !(j_hat.abs() >= DEGENERACY_THRESHOLD) {
        return Err(Error::DegenerateJacobian {
            denominator: j_hat.abs() * nf,
            n: n2,
        });
    }
    let j_var = dtheta.iter().map(|d| (d - j_hat).powi(2)).sum::<f64>() / nf;
    let m = sample.moment_values(theta_hat);
    let m_bar = m.iter().sum::<f64>() / nf;
    let v_hat = m.iter().map(|v| (v - m_bar).powi(2)).sum::<f64>() / nf;
    Ok(VarianceEstimate {
        j_hat,
        v_hat,
        se_hat: (v_hat / (j_hat * j_hat) / nf).sqrt(),
        j_std_error: (j_var / nf).sqrt(),
    })
}

/// Number of rows each stage used in one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub nuisance: usize,
    pub moment: usize,
    pub second_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub scheme: Scheme,
    pub theta_hat: f64,
    pub se_hat: f64,
    pub ci_95: (f64, f64),
    pub j_hat: f64,
    pub v_hat: f64,
    /// `j_hat / se(j_hat)`; near zero signals a weakly identified moment.
    pub j_z_score: f64,
    /// Empirical moment sum at `theta_hat` (zero up to rounding).
    pub moment_sum_at_root: f64,
    pub n_second_stage: usize,
    pub n_used: Vec<StageCounts>,
    pub nuisance_diag: Vec<NuisanceDiagnostics>,
    pub lasso_nonconverged: usize,
}

impl EstimateReport {
    pub fn covers(&self, theta: f64) -> bool {
        self.ci_95.0 <= theta && theta <= self.ci_95.1
    }

    fn mean_of(&self, f: impl Fn(&NuisanceDiagnostics) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.nuisance_diag.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_q_l2_err(&self) -> Option<f64> {
        self.mean_of(|d| d.q_l2_err)
    }

    pub fn mean_gamma_l2_err(&self) -> Option<f64> {
        self.mean_of(|d| d.gamma_l2_err)
    }

    pub fn mean_mu2_err(&self) -> Option<f64> {
        self.mean_of(|d| d.mu2_err)
    }

    pub fn mean_mu3_err(&self) -> Option<f64> {
        self.mean_of(|d| d.mu3_err)
    }
}

/// `theta_hat +/- z_{(1 + level) / 2} se_hat` with a normal quantile.
pub fn confidence_interval(report: &EstimateReport, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "level must be in (0, 1), got {level}"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    Ok((
        report.theta_hat - z * report.se_hat,
        report.theta_hat + z * report.se_hat,
    ))
}

fn l2_dist(a: &Array1<f64>, b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Runs the configured scheme with an arbitrary first stage.
pub fn estimate_with_first_stage(
    data: &Dataset,
    truth: Option<&PlrInstance>,
    cfg: &EstimatorConfig,
    first_stage: &dyn FirstStage,
    rng: &mut SimRng,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let spec = cfg.moment_spec();
    let known = match (spec.order, spec.mode) {
        (MomentOrder::SecondOrder { .. }, MomentMode::Known) => {
            let inst = truth.ok_or(Error::MissingTruth("known residual moments"))?;
            let m = exact_noise_moments(&inst.eta_dist, 3);
            Some((m[1], m[2]))
        }
        _ => None,
    };
    let true_mu = truth.map(|inst| {
        let m = exact_noise_moments(&inst.eta_dist, 3);
        (m[1], m[2])
    });

    let plan = plan_folds(data.n, cfg, rng)?;
    let mut pooled = SecondStageSample::default();
    let mut n_used = Vec::new();
    let mut diags = Vec::new();
    let mut nonconverged = 0;
    for fold in &plan {
        let train = data.subset(&fold.nuisance_idx);
        let fit = first_stage.fit(&train, data.n)?;
        nonconverged += usize::from(!fit.q_converged) + usize::from(!fit.gamma_converged);
        for ev in &fold.evaluations {
            let (mu2_hat, mu3_hat) = match spec.order {
                MomentOrder::FirstOrder => (None, None),
                MomentOrder::SecondOrder { .. } => match known {
                    Some((m2, m3)) => (Some(m2), Some(m3)),
                    None => {
                        let held = data.subset(&ev.moment_idx);
                        let (m2, m3) = estimate_residual_moments(
                            held.t.view(),
                            held.x.view(),
                            fit.gamma_hat.view(),
                        )?;
                        (Some(m2), Some(m3))
                    }
                },
            };
            let diagnostics = NuisanceDiagnostics {
                q_l2_err: truth.map(|inst| l2_dist(&fit.q_hat, &inst.q0)),
                gamma_l2_err: truth.map(|inst| l2_dist(&fit.gamma_hat, &inst.gamma0)),
                mu2_err: mu2_hat.zip(true_mu).map(|(m, (t2, _))| m - t2),
                mu3_err: mu3_hat.zip(true_mu).map(|(m, (_, t3))| m - t3),
                q_converged: fit.q_converged,
                gamma_converged: fit.gamma_converged,
                q_iterations: fit.q_iterations,
                gamma_iterations: fit.gamma_iterations,
            };
            let nuisance = NuisanceEstimate {
                q_hat: fit.q_hat.clone(),
                gamma_hat: fit.gamma_hat.clone(),
                mu2_hat,
                mu3_hat,
                mode: spec.mode,
                diagnostics: diagnostics.clone(),
            };
            let second = data.subset(&ev.second_stage_idx);
            pooled.append(SecondStageSample::from_fold(
                second.x.view(),
                second.t.view(),
                second.y.view(),
                &nuisance,
                &spec,
            )?);
            n_used.push(StageCounts {
                nuisance: fold.nuisance_idx.len(),
                moment: ev.moment_idx.len(),
                second_stage: ev.second_stage_idx.len(),
            });
            diags.push(diagnostics);
        }
    }

    let theta_hat = pooled.solve()?;
    let var = estimate_variance(&pooled, theta_hat)?;
    Ok(EstimateReport {
        method: cfg.method,
        scheme: cfg.scheme,
        theta_hat,
        se_hat: var.se_hat,
        ci_95: (theta_hat - Z_95 * var.se_hat, theta_hat + Z_95 * var.se_hat),
        j_hat: var.j_hat,
        v_hat: var.v_hat,
        j_z_score: if var.j_std_error > 0.0 {
            var.j_hat / var.j_std_error
        } else {
            f64::INFINITY.copysign(var.j_hat)
        },
        moment_sum_at_root: pooled.moment_sum(theta_hat),
        n_second_stage: pooled.len(),
        n_used,
        nuisance_diag: diags,
        lasso_nonconverged: nonconverged,
    })
}

/// Lasso first stage with the scheme in `cfg`.
pub fn estimate(
    data: &Dataset,
    truth: Option<&PlrInstance>,
    cfg: &EstimatorConfig,
    rng: &mut SimRng,
) -> Result<EstimateReport> {
    estimate_with_first_stage(data, truth, cfg, &LassoFirstStage::from_config(cfg), rng)
}

/// First stage on one half, second stage (and residual moments) on the other.
pub fn sample_split_estimate(
    data: &Dataset,
    truth: Option<&PlrInstance>,
    cfg: &EstimatorConfig,
    rng: &mut SimRng,
) -> Result<EstimateReport> {
    estimate(data, truth, &cfg.with_scheme(Scheme::SampleSplit), rng)
}

/// `K`-fold cross-fitting with pooled moment equation.
pub fn cross_fit_estimate(
    data: &Dataset,
    truth: Option<&PlrInstance>,
    cfg: &EstimatorConfig,
    rng: &mut SimRng,
) -> Result<EstimateReport> {
    estimate(data, truth, &cfg.with_scheme(Scheme::CrossFit), rng)
}
