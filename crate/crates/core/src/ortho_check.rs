//! Numerical verification of orthogonality properties.
//!
//! A moment is S-orthogonal when `E[D^alpha m(Z, theta0, h0(X)) | X] = 0` for
//! every multi-index `alpha` in `S`. Checks hold `X` fixed at a point, draw the
//! noise `(eta, eps)` and test the Monte Carlo mean of the analytic
//! differential against zero with a z-score.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dgp::{
    exact_noise_moments, generate_instance, CoefficientLaw, NoiseDistribution, PlrInstance,
};
use crate::error::{Error, Result};
use crate::moments::{
    dalpha_moment, moment, multi_indices, residual_moment_pair, MomentMode, MomentOrder,
    MomentSpec, MultiIndex, NuisancePoint,
};
use crate::rng::SimRng;

/// Pass threshold on `|z|`.
pub const Z_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrthogonalitySet {
    pub indices: Vec<MultiIndex>,
    pub k: u32,
}

impl OrthogonalitySet {
    pub fn contains(&self, alpha: &MultiIndex) -> bool {
        self.indices.contains(alpha)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A multi-index with the constant value of its differential as a function of theta.
pub type ExcludedIndex = (MultiIndex, fn(f64) -> f64);

/// Cross differentials that the estimated-moment second-order moment is not
/// orthogonal in, with their constant values as functions of theta.
pub fn excluded_indices(spec: &MomentSpec) -> Vec<ExcludedIndex> {
    match (spec.order, spec.mode) {
        (MomentOrder::SecondOrder { .. }, MomentMode::Estimated) => {
            vec![([1, 0, 0, 1], |_| 1.0), ([0, 1, 0, 1], |theta| -theta)]
        }
        _ => Vec::new(),
    }
}

/// The orthogonality set each moment is built to satisfy:
///
/// * first order: all indices of order at most 1 in `(q, g)`
/// * second order, known residual moments: order at most 2 in `(q, g, mu_{r-1})`
/// * second order, estimated residual moments: order at most 2 in all four
///   coordinates except the two `mu_r` cross terms with `q` and `g`
pub fn orthogonality_set(spec: &MomentSpec) -> OrthogonalitySet {
    let excluded: Vec<MultiIndex> = excluded_indices(spec).into_iter().map(|(a, _)| a).collect();
    let (coords, k) = match (spec.order, spec.mode) {
        (MomentOrder::FirstOrder, _) => (2, 1),
        (MomentOrder::SecondOrder { .. }, MomentMode::Known) => (3, 2),
        (MomentOrder::SecondOrder { .. }, MomentMode::Estimated) => (4, 2),
    };
    let indices = multi_indices(coords, k)
        .into_iter()
        .filter(|a| !excluded.contains(a))
        .collect();
    OrthogonalitySet { indices, k }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The differential is a known nonzero constant; `matches` records
    /// whether the analytic value equals its closed form.
    DeterministicNonzero {
        value: f64,
        closed_form: f64,
        matches: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub alpha: MultiIndex,
    pub estimate: f64,
    pub std_error: f64,
    pub z_score: f64,
    pub verdict: Verdict,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        match self.verdict {
            Verdict::Pass => true,
            Verdict::Fail => false,
            Verdict::DeterministicNonzero { matches, .. } => matches,
        }
    }
}

fn z_score(mean: f64, se: f64) -> f64 {
    if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(mean)
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// True nuisance values `(q0(x), g0(x), mu_{r-1}, mu_r)` at a covariate point.
pub fn true_nuisance_point(
    spec: &MomentSpec,
    instance: &PlrInstance,
    x_point: &[f64],
) -> NuisancePoint {
    let (mu_prev, mu_r) = match spec.order {
        MomentOrder::FirstOrder => (0.0, 0.0),
        MomentOrder::SecondOrder { r } => {
            let m = exact_noise_moments(&instance.eta_dist, 3);
            residual_moment_pair(r, m[1], m[2])
        }
    };
    NuisancePoint {
        q: instance.q0_at(x_point),
        g: instance.g0(x_point),
        mu_prev,
        mu_r,
    }
}

/// Monte Carlo test of `E[D^alpha m | X = x_point] = 0` at the truth.
pub fn conditional_orthogonality_check(
    spec: &MomentSpec,
    instance: &PlrInstance,
    x_point: &[f64],
    alpha: MultiIndex,
    mc_size: usize,
    rng: &mut SimRng,
) -> Result<CheckResult> {
    spec.validate()?;
    if x_point.len() != instance.p {
        return Err(Error::InvalidDimensions(format!(
            "x_point has length {}, instance has p = {}",
            x_point.len(),
            instance.p
        )));
    }
    if mc_size < 2 {
        return Err(Error::InvalidParameter("mc_size must be >= 2".into()));
    }
    let theta0 = instance.theta0;
    let np = true_nuisance_point(spec, instance, x_point);
    let f0 = instance.f0(x_point);
    let draw = |rng: &mut SimRng| {
        let t = np.g + instance.eta_dist.sample(rng);
        let y = theta0 * t + f0 + instance.eps_dist.sample(rng);
        (t, y)
    };

    if let Some((_, closed)) = excluded_indices(spec)
        .into_iter()
        .find(|(a, _)| *a == alpha)
    {
        let (t, y) = draw(rng);
        let value = dalpha_moment(spec, alpha, t, y, theta0, &np)?;
        let closed_form = closed(theta0);
        return Ok(CheckResult {
            alpha,
            estimate: value,
            std_error: 0.0,
            z_score: z_score(value, 0.0),
            verdict: Verdict::DeterministicNonzero {
                value,
                closed_form,
                matches: value == closed_form,
            },
        });
    }

    let mut values = Vec::with_capacity(mc_size);
    for _ in 0..mc_size {
        let (t, y) = draw(rng);
        values.push(dalpha_moment(spec, alpha, t, y, theta0, &np)?);
    }
    let (estimate, std_error) = mean_and_se(&values);
    let z = z_score(estimate, std_error);
    Ok(CheckResult {
        alpha,
        estimate,
        std_error,
        z_score: z,
        verdict: if z.abs() <= Z_THRESHOLD {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
    })
}

/// Population `E[d m / d theta]` at the truth for the order-`r` moment:
/// `-(E[eta^{r+1}] - mu_r E[eta] - r mu_{r-1} E[eta^2])`.
pub fn population_jacobian(r: u8, eta: &NoiseDistribution) -> f64 {
    let m = exact_noise_moments(eta, r as usize + 1);
    let (mu_prev, mu_r) = residual_moment_pair(r, m[1], m[2]);
    // adding 0.0 turns a negative zero into +0.0
    0.0 - (m[r as usize] - mu_r * m[0] - r as f64 * mu_prev * m[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyRow {
    pub variant: String,
    pub r: u8,
    pub j_hat: f64,
    pub std_error: f64,
    /// `j_hat / std_error`
    pub z_score: f64,
    pub population_j: f64,
    /// `(j_hat - population_j) / std_error`
    pub z_vs_population: f64,
    /// `|z_score| <= 4`: the sample cannot tell the Jacobian from zero.
    pub degenerate: bool,
}

/// Monte Carlo estimate of the theta-Jacobian of the order-`r` moment at the
/// truth, for each treatment-noise law.
pub fn jacobian_degeneracy_scan(
    r: u8,
    eta_variants: &[(String, NoiseDistribution)],
    n: usize,
    rng: &mut SimRng,
) -> Result<Vec<DegeneracyRow>> {
    let spec = MomentSpec::second_order(r, MomentMode::Known)?;
    if n < 2 {
        return Err(Error::InvalidParameter("scan needs n >= 2".into()));
    }
    eta_variants
        .iter()
        .enumerate()
        .map(|(i, (name, eta))| {
            eta.validate()?;
            let m = exact_noise_moments(eta, 3);
            let (mu_prev, mu_r) = residual_moment_pair(r, m[1], m[2]);
            let np = NuisancePoint {
                q: 0.0,
                g: 0.0,
                mu_prev,
                mu_r,
            };
            let mut stream = rng.split(i as u64);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    let e = eta.sample(&mut stream);
                    crate::moments::dtheta_moment(&spec, e, 0.0, 0.0, &np)
                })
                .collect();
            let (j_hat, se) = mean_and_se(&values);
            let population_j = population_jacobian(r, eta);
            let z = z_score(j_hat, se);
            Ok(DegeneracyRow {
                variant: name.clone(),
                r,
                j_hat,
                std_error: se,
                z_score: z,
                population_j,
                z_vs_population: z_score(j_hat - population_j, se),
                degenerate: z.abs() <= Z_THRESHOLD,
            })
        })
        .collect()
}

/// Evaluation point for the moment and its differentials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub t: f64,
    pub y: f64,
    pub theta: f64,
    pub nuisance: NuisancePoint,
}

// (offset in steps, weight) for central differences of order 0..=3
fn stencil(order: u8) -> &'static [(f64, f64)] {
    match order {
        0 => &[(0.0, 1.0)],
        1 => &[(1.0, 0.5), (-1.0, -0.5)],
        2 => &[(1.0, 1.0), (0.0, -2.0), (-1.0, 1.0)],
        _ => &[(2.0, 0.5), (1.0, -1.0), (-1.0, 1.0), (-2.0, -0.5)],
    }
}

fn tensor_difference(spec: &MomentSpec, alpha: MultiIndex, point: &EvalPoint, h: f64) -> f64 {
    let base = point.nuisance.as_array();
    let order: i32 = alpha.iter().map(|&a| a as i32).sum();
    let mut total = 0.0;
    let stencils: Vec<&[(f64, f64)]> = alpha.iter().map(|&a| stencil(a)).collect();
    for &(o0, w0) in stencils[0] {
        for &(o1, w1) in stencils[1] {
            for &(o2, w2) in stencils[2] {
                for &(o3, w3) in stencils[3] {
                    let shifted = [
                        base[0] + o0 * h,
                        base[1] + o1 * h,
                        base[2] + o2 * h,
                        base[3] + o3 * h,
                    ];
                    let np = NuisancePoint::from_array(shifted);
                    total += w0 * w1 * w2 * w3 * moment(spec, point.t, point.y, point.theta, &np);
                }
            }
        }
    }
    total / h.powi(order)
}

/// Step for [`finite_diff_differential`]. The moments are polynomials of
/// degree at most 4 in the nuisances, which the extrapolated stencil
/// differentiates exactly, so only rounding error matters.
pub const DEFAULT_FD_STEP: f64 = 1e-2;

/// Central-difference estimate of `D^alpha m` with one Richardson step.
pub fn finite_diff_differential(
    spec: &MomentSpec,
    alpha: MultiIndex,
    point: &EvalPoint,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step must be > 0, got {h}"
        )));
    }
    if alpha.iter().map(|&a| a as u32).sum::<u32>() > crate::moments::MAX_ALPHA_ORDER {
        return Err(Error::UnsupportedAlpha {
            alpha,
            reason: "total order above 3",
        });
    }
    let coarse = tensor_difference(spec, alpha, point, h);
    let fine = tensor_difference(spec, alpha, point, h / 2.0);
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Draws an evaluation point with every coordinate standard normal.
pub fn random_eval_point(rng: &mut SimRng) -> EvalPoint {
    let mut z = || -> f64 { StandardNormal.sample(rng) };
    EvalPoint {
        t: z(),
        y: z(),
        theta: z(),
        nuisance: NuisancePoint {
            q: z(),
            g: z(),
            mu_prev: z(),
            mu_r: z(),
        },
    }
}

/// Settings for the full orthogonality suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub specs: Vec<MomentSpec>,
    pub n_points: usize,
    pub mc_size: usize,
    pub seed: u64,
    pub p: usize,
    pub s: usize,
    pub eta: NoiseDistribution,
    /// Count the first-order `(0, 2, 0, 0)` row as required, which makes the
    /// suite fail; used to exercise the failure path.
    #[serde(default)]
    pub require_first_order_curvature: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            specs: vec![
                MomentSpec::first_order(),
                MomentSpec {
                    order: MomentOrder::SecondOrder { r: 2 },
                    mode: MomentMode::Known,
                },
                MomentSpec {
                    order: MomentOrder::SecondOrder { r: 2 },
                    mode: MomentMode::Estimated,
                },
                MomentSpec {
                    order: MomentOrder::SecondOrder { r: 3 },
                    mode: MomentMode::Known,
                },
                MomentSpec {
                    order: MomentOrder::SecondOrder { r: 3 },
                    mode: MomentMode::Estimated,
                },
            ],
            n_points: 10,
            mc_size: 100_000,
            seed: 0,
            p: 10,
            s: 5,
            eta: crate::dgp::default_discrete_eta(),
            require_first_order_curvature: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub spec: String,
    pub point: usize,
    /// Whether `alpha` belongs to the spec's orthogonality set; rows outside
    /// the set are informational and never fail the suite.
    pub in_set: bool,
    pub result: CheckResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub failures: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn spec_label(spec: &MomentSpec) -> String {
    match (spec.order, spec.mode) {
        (MomentOrder::FirstOrder, _) => "first_order".into(),
        (MomentOrder::SecondOrder { r }, MomentMode::Known) => format!("second_order_r{r}_known"),
        (MomentOrder::SecondOrder { r }, MomentMode::Estimated) => {
            format!("second_order_r{r}_estimated")
        }
    }
}

/// Runs every index of each spec's orthogonality set (plus its excluded
/// cross terms) at `n_points` random covariate points. The first-order moment
/// additionally gets the informational `(0, 2, 0, 0)` row.
pub fn run_orthogonality_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let root = SimRng::new(cfg.seed);
    let instance = generate_instance(
        cfg.p,
        cfg.s,
        3.0,
        CoefficientLaw::default(),
        cfg.eta.clone(),
        NoiseDistribution::uniform(1.0)?,
        &mut root.split(0),
    )?;
    let mut point_rng = root.split(1);
    let points: Vec<Vec<f64>> = (0..cfg.n_points)
        .map(|_| {
            (0..cfg.p)
                .map(|_| StandardNormal.sample(&mut point_rng))
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for (si, spec) in cfg.specs.iter().enumerate() {
        let set = orthogonality_set(spec);
        let mut alphas: Vec<(MultiIndex, bool)> = set.indices.iter().map(|&a| (a, true)).collect();
        alphas.extend(excluded_indices(spec).into_iter().map(|(a, _)| (a, true)));
        if spec.order == MomentOrder::FirstOrder {
            alphas.push(([0, 2, 0, 0], cfg.require_first_order_curvature));
        }
        for (pi, x) in points.iter().enumerate() {
            for (ai, &(alpha, in_set)) in alphas.iter().enumerate() {
                let mut rng = root.split_path(&[2, si as u64, pi as u64, ai as u64]);
                let result = conditional_orthogonality_check(
                    spec,
                    &instance,
                    x,
                    alpha,
                    cfg.mc_size,
                    &mut rng,
                )?;
                rows.push(SuiteRow {
                    spec: spec_label(spec),
                    point: pi,
                    in_set,
                    result,
                });
            }
        }
    }
    let failures = rows
        .iter()
        .filter(|r| r.in_set && !r.result.passed())
        .count();
    Ok(SuiteReport { rows, failures })
}

fn alpha_text(a: &MultiIndex) -> String {
    format!("({},{},{},{})", a[0], a[1], a[2], a[3])
}

/// Writes the suite table as JSON or CSV
/// (`spec,point,alpha,in_set,estimate,std_error,z_score,verdict,passed`).
pub fn write_suite_report(
    report: &SuiteReport,
    path: &Path,
    format: crate::harness::OutputFormat,
) -> Result<()> {
    match format {
        crate::harness::OutputFormat::Json => {
            let text = serde_json::to_string_pretty(report)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        crate::harness::OutputFormat::Csv => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record([
                "spec",
                "point",
                "alpha",
                "in_set",
                "estimate",
                "std_error",
                "z_score",
                "verdict",
                "passed",
            ])?;
            for row in &report.rows {
                let verdict = match row.result.verdict {
                    Verdict::Pass => "pass",
                    Verdict::Fail => "fail",
                    Verdict::DeterministicNonzero { .. } => "deterministic_nonzero",
                };
                w.write_record([
                    row.spec.clone(),
                    row.point.to_string(),
                    alpha_text(&row.result.alpha),
                    row.in_set.to_string(),
                    row.result.estimate.to_string(),
                    row.result.std_error.to_string(),
                    row.result.z_score.to_string(),
                    verdict.to_string(),
                    row.result.passed().to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

/// Writes degeneracy-scan rows as a JSON array or as CSV with one column per field.
pub fn write_degeneracy_rows(
    rows: &[DegeneracyRow],
    path: &Path,
    format: crate::harness::OutputFormat,
) -> Result<()> {
    match format {
        crate::harness::OutputFormat::Json => {
            let text = serde_json::to_string_pretty(rows)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        crate::harness::OutputFormat::Csv => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = csv::Writer::from_writer(file);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}
