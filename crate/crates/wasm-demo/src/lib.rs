//! Browser bindings for the orthoml demo page.
//!
//! Each exported function takes plain numbers, runs on the calling thread and
//! returns a JSON string. The `*_json` functions hold the logic and are
//! usable (and tested) natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use orthoml::dgp::{
    default_discrete_eta, default_eps, exact_noise_moments, excess_kurtosis_gap, generate_dataset,
    generate_instance, CoefficientLaw, NoiseDistribution,
};
use orthoml::estimator::{estimate, EstimatorConfig};
use orthoml::ortho_check::{jacobian_degeneracy_scan, population_jacobian, DegeneracyRow};
use orthoml::{Error, Result, SimRng};

/// Treatment-noise laws offered on the page. `scale` is the standard
/// deviation for `gaussian` and `uniform`, and unused for `discrete`.
pub fn noise_law(kind: &str, scale: f64) -> Result<NoiseDistribution> {
    match kind {
        "discrete" => Ok(default_discrete_eta()),
        "gaussian" => NoiseDistribution::gaussian(scale),
        "uniform" => NoiseDistribution::uniform(scale * 3f64.sqrt()),
        other => Err(Error::InvalidParameter(format!(
            "unknown noise law {other:?}"
        ))),
    }
}

#[derive(Debug, Serialize)]
struct MomentSummary {
    kind: String,
    moments: Vec<f64>,
    kurtosis_gap: f64,
    jacobian_r2: f64,
    jacobian_r3: f64,
    sample_moments: Vec<f64>,
    n_samples: usize,
}

pub fn noise_moments_json(kind: &str, scale: f64, n_samples: usize, seed: u64) -> Result<String> {
    let law = noise_law(kind, scale)?;
    let mut rng = SimRng::new(seed);
    let draws: Vec<f64> = (0..n_samples).map(|_| law.sample(&mut rng)).collect();
    let sample_moments = (1..=4)
        .map(|k| draws.iter().map(|e| e.powi(k)).sum::<f64>() / n_samples.max(1) as f64)
        .collect();
    Ok(serde_json::to_string(&MomentSummary {
        kind: kind.to_string(),
        moments: exact_noise_moments(&law, 4),
        kurtosis_gap: excess_kurtosis_gap(&law),
        jacobian_r2: population_jacobian(2, &law),
        jacobian_r3: population_jacobian(3, &law),
        sample_moments,
        n_samples,
    })?)
}

#[derive(Debug, Serialize)]
struct MethodDraws {
    method: String,
    thetas: Vec<f64>,
    mean: f64,
    sd: f64,
    coverage_95: f64,
}

#[derive(Debug, Serialize)]
struct Comparison {
    n: usize,
    p: usize,
    s: usize,
    reps: usize,
    theta0: f64,
    methods: Vec<MethodDraws>,
}

/// Draws one instance and `reps` datasets, and estimates theta with the
/// first-order and the second-order (r = 3) moments on each.
pub fn compare_estimators_json(
    n: usize,
    p: usize,
    s: usize,
    reps: usize,
    seed: u64,
) -> Result<String> {
    if reps == 0 {
        return Err(Error::InvalidParameter("reps must be >= 1".into()));
    }
    let root = SimRng::new(seed);
    let instance = generate_instance(
        p,
        s,
        3.0,
        CoefficientLaw::default(),
        default_discrete_eta(),
        default_eps(1.0)?,
        &mut root.split(0),
    )?;
    let configs = [EstimatorConfig::dml(), EstimatorConfig::second_order(3)];
    let mut draws: Vec<(Vec<f64>, usize)> = vec![(Vec::new(), 0); configs.len()];
    for rep in 0..reps as u64 {
        let data = generate_dataset(&instance, n, &mut root.split_path(&[1, rep, 0]))?;
        for (m, cfg) in configs.iter().enumerate() {
            let r = estimate(
                &data,
                Some(&instance),
                cfg,
                &mut root.split_path(&[1, rep, 1 + m as u64]),
            )?;
            draws[m].0.push(r.theta_hat);
            draws[m].1 += usize::from(r.covers(3.0));
        }
    }
    let methods = configs
        .iter()
        .zip(draws)
        .map(|(cfg, (thetas, covered))| {
            let k = thetas.len() as f64;
            let mean = thetas.iter().sum::<f64>() / k;
            let sd = (thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / k).sqrt();
            MethodDraws {
                method: cfg.method.label(),
                thetas,
                mean,
                sd,
                coverage_95: covered as f64 / k,
            }
        })
        .collect();
    Ok(serde_json::to_string(&Comparison {
        n,
        p,
        s,
        reps,
        theta0: 3.0,
        methods,
    })?)
}

/// Jacobian of the r = 2 and r = 3 moments at the truth for every noise law.
pub fn degeneracy_scan_json(scale: f64, n: usize, seed: u64) -> Result<String> {
    let variants = ["discrete", "gaussian", "uniform"]
        .iter()
        .map(|k| Ok((k.to_string(), noise_law(k, scale)?)))
        .collect::<Result<Vec<_>>>()?;
    let root = SimRng::new(seed);
    let mut rows: Vec<DegeneracyRow> =
        jacobian_degeneracy_scan(3, &variants, n, &mut root.split(3))?;
    rows.extend(jacobian_degeneracy_scan(
        2,
        &variants,
        n,
        &mut root.split(2),
    )?);
    Ok(serde_json::to_string(&rows)?)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = noiseMoments)]
pub fn noise_moments(
    kind: &str,
    scale: f64,
    n_samples: usize,
    seed: u64,
) -> std::result::Result<String, JsError> {
    noise_moments_json(kind, scale, n_samples, seed).map_err(js)
}

#[wasm_bindgen(js_name = compareEstimators)]
pub fn compare_estimators(
    n: usize,
    p: usize,
    s: usize,
    reps: usize,
    seed: u64,
) -> std::result::Result<String, JsError> {
    compare_estimators_json(n, p, s, reps, seed).map_err(js)
}

#[wasm_bindgen(js_name = degeneracyScan)]
pub fn degeneracy_scan(scale: f64, n: usize, seed: u64) -> std::result::Result<String, JsError> {
    degeneracy_scan_json(scale, n, seed).map_err(js)
}
