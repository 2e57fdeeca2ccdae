//! L1-penalized least squares by cyclic coordinate descent.
//!
//! Minimizes `(1/2n) ||y - X b||^2 + lambda ||b||_1` with no intercept.
//! Sweeps alternate between a full pass over all coordinates and passes
//! restricted to the current nonzero set; convergence is declared only after a
//! full pass whose largest coefficient change is below `tol`.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    pub lambda: f64,
    /// Maximum number of coordinate sweeps (full or active-set).
    pub max_iters: usize,
    /// Convergence threshold on the largest absolute coefficient change in a sweep.
    pub tol: f64,
    /// Rescale columns to unit mean square before fitting; coefficients are
    /// reported on the original scale. The penalty then applies to the
    /// standardized coefficients.
    pub standardize: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            max_iters: 10_000,
            tol: 1e-7,
            standardize: false,
        }
    }
}

impl LassoConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta_hat: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at `beta_hat`.
    pub objective: f64,
    /// Objective after each sweep; the first entry is the value at `b = 0`.
    pub objective_trace: Vec<f64>,
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// `(1/2n) ||y - X b||^2 + lambda ||b||_1`.
pub fn lasso_objective(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    lambda: f64,
) -> f64 {
    let n = x.nrows() as f64;
    let resid = &y - &x.dot(&beta);
    resid.dot(&resid) / (2.0 * n) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Largest violation of the Lasso subgradient optimality conditions.
pub fn kkt_residual(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    lambda: f64,
) -> f64 {
    let n = x.nrows() as f64;
    let resid = &y - &x.dot(&beta);
    let grad = x.t().dot(&resid) / n;
    grad.iter()
        .zip(beta.iter())
        .map(|(&g, &b)| {
            if b != 0.0 {
                (g - lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// `2 C M sqrt(3 log(p) / n)`.
pub fn lambda_theory(c: f64, m: f64, p: f64, n: f64) -> f64 {
    2.0 * c * m * (3.0 * p.ln() / n).sqrt()
}

/// `sqrt(log(p) / n)`.
pub fn lambda_experiment(p: f64, n: f64) -> f64 {
    (p.ln() / n).sqrt()
}

pub fn lasso_fit(x: ArrayView2<f64>, y: ArrayView1<f64>, cfg: &LassoConfig) -> Result<LassoFit> {
    cfg.validate()?;
    let (n, p) = x.dim();
    if n == 0 || p == 0 {
        return Err(Error::InvalidDimensions(format!("design is {n} x {p}")));
    }
    if y.len() != n {
        return Err(Error::InvalidDimensions(format!(
            "design has {n} rows but response has length {}",
            y.len()
        )));
    }
    let nf = n as f64;

    // column-major copy so each coordinate update streams one contiguous column
    let mut cols = vec![0.0; n * p];
    for (i, row) in x.rows().into_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            cols[j * n + i] = *v;
        }
    }
    let mut scale = vec![1.0; p];
    if cfg.standardize {
        for j in 0..p {
            let c = &mut cols[j * n..(j + 1) * n];
            let ms = c.iter().map(|v| v * v).sum::<f64>() / nf;
            if ms > 0.0 {
                let s = ms.sqrt();
                c.iter_mut().for_each(|v| *v /= s);
                scale[j] = s;
            }
        }
    }
    let col_ms: Vec<f64> = (0..p)
        .map(|j| cols[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>() / nf)
        .collect();

    let mut beta = vec![0.0; p];
    let mut resid: Vec<f64> = y.to_vec();
    let lambda = cfg.lambda;
    let objective = |resid: &[f64], beta: &[f64]| {
        resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * nf)
            + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let mut trace = vec![objective(&resid, &beta)];

    let update = |j: usize, beta: &mut [f64], resid: &mut [f64]| -> f64 {
        let ms = col_ms[j];
        if ms == 0.0 {
            return 0.0;
        }
        let col = &cols[j * n..(j + 1) * n];
        let old = beta[j];
        let rho = col
            .iter()
            .zip(resid.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / nf
            + ms * old;
        let new = soft_threshold(rho, lambda) / ms;
        let delta = new - old;
        if delta != 0.0 {
            for (r, a) in resid.iter_mut().zip(col) {
                *r -= delta * a;
            }
            beta[j] = new;
        }
        delta.abs()
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let mut max_change = 0.0_f64;
        for j in 0..p {
            max_change = max_change.max(update(j, &mut beta, &mut resid));
        }
        iterations += 1;
        trace.push(objective(&resid, &beta));
        if max_change < cfg.tol {
            converged = true;
            break;
        }
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        while iterations < cfg.max_iters {
            let mut active_change = 0.0_f64;
            for &j in &active {
                active_change = active_change.max(update(j, &mut beta, &mut resid));
            }
            iterations += 1;
            trace.push(objective(&resid, &beta));
            if active_change < cfg.tol {
                break;
            }
        }
    }

    let beta_hat: Array1<f64> = beta.iter().zip(&scale).map(|(b, s)| b / s).collect();
    let objective = if cfg.standardize {
        lasso_objective(x, y, beta_hat.view(), lambda)
    } else {
        *trace.last().expect("trace starts nonempty")
    };
    Ok(LassoFit {
        beta_hat,
        iterations,
        converged,
        objective,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use ndarray::{array, Array2};
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_design(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = SimRng::new(seed);
        Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        for z in [-2.5, -1e-9, 0.0, 4.2] {
            assert_eq!(soft_threshold(z, 0.0), z);
        }
    }

    #[test]
    fn univariate_closed_form() {
        // (1/n)||x||^2 = 1
        let x = array![[1.0], [-1.0], [1.0], [-1.0]];
        let y = array![2.0, -1.5, 0.7, 0.1];
        let lambda = 0.3;
        let fit = lasso_fit(x.view(), y.view(), &LassoConfig::with_lambda(lambda)).unwrap();
        let xy = x.column(0).dot(&y) / 4.0;
        assert!((fit.beta_hat[0] - soft_threshold(xy, lambda)).abs() < 1e-12);
        assert!(fit.converged);
        assert!(kkt_residual(x.view(), y.view(), fit.beta_hat.view(), lambda) < 1e-10);
    }

    #[test]
    fn null_model_above_threshold() {
        let x = gaussian_design(60, 8, 1);
        let y = gaussian_design(60, 1, 2).column(0).to_owned();
        let lmax = x
            .t()
            .dot(&y)
            .iter()
            .map(|v| (v / 60.0).abs())
            .fold(0.0, f64::max);
        let fit = lasso_fit(x.view(), y.view(), &LassoConfig::with_lambda(lmax * 1.0001)).unwrap();
        assert!(fit.beta_hat.iter().all(|&b| b == 0.0));
        assert_eq!(
            kkt_residual(x.view(), y.view(), fit.beta_hat.view(), lmax * 1.0001),
            0.0
        );
    }

    /// Solves a small dense system by Gaussian elimination with partial pivoting.
    fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let k = b.len();
        for c in 0..k {
            let piv = (c..k)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, piv);
            b.swap(c, piv);
            for r in c + 1..k {
                let f = a[r][c] / a[c][c];
                let (upper, lower) = a.split_at_mut(r);
                for (dst, src) in lower[0][c..k].iter_mut().zip(&upper[c][c..k]) {
                    *dst -= f * src;
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; k];
        for r in (0..k).rev() {
            let tail: f64 = (r + 1..k).map(|cc| a[r][cc] * x[cc]).sum();
            x[r] = (b[r] - tail) / a[r][r];
        }
        x
    }

    #[test]
    fn recovers_sparse_signal_noiseless() {
        // With no noise and the support recovered, the Lasso solution is
        // beta_S - lambda (X_S'X_S/n)^{-1} sign(beta_S): the error is pure
        // shrinkage of size about lambda sqrt(s).
        let (n, p) = (2000, 50);
        let support = [3, 11, 19, 27, 40];
        let lambda = lambda_experiment(p as f64, n as f64);
        let mut errors = Vec::new();
        for seed in 0..10 {
            let x = gaussian_design(n, p, 100 + seed);
            let mut beta0 = Array1::zeros(p);
            for (k, &j) in support.iter().enumerate() {
                beta0[j] = 1.0 + k as f64;
            }
            let y = x.dot(&beta0);
            let fit = lasso_fit(x.view(), y.view(), &LassoConfig::with_lambda(lambda)).unwrap();
            assert!(fit.converged);

            let gram: Vec<Vec<f64>> = support
                .iter()
                .map(|&i| {
                    support
                        .iter()
                        .map(|&j| x.column(i).dot(&x.column(j)) / n as f64)
                        .collect()
                })
                .collect();
            let shrink = solve_dense(gram, vec![lambda; support.len()]);
            let oracle_err = shrink.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = (&fit.beta_hat - &beta0).mapv(|v| v * v).sum().sqrt();
            assert!(
                (err - oracle_err).abs() < 1e-5,
                "seed {seed}: {err} vs oracle {oracle_err}"
            );
            for j in 0..p {
                assert_eq!(fit.beta_hat[j] != 0.0, support.contains(&j));
            }
            errors.push(err);
        }
        errors.sort_by(f64::total_cmp);
        let median = 0.5 * (errors[4] + errors[5]);
        let floor = lambda * (support.len() as f64).sqrt();
        assert!(
            (median / floor - 1.0).abs() < 0.05,
            "median l2 error {median}, floor {floor}"
        );
    }

    #[test]
    fn converged_fit_certifies_kkt_and_monotone_objective() {
        let (n, p) = (300, 40);
        let x = gaussian_design(n, p, 4);
        let mut beta0 = Array1::zeros(p);
        beta0[0] = 2.0;
        beta0[5] = -1.0;
        let noise = gaussian_design(n, 1, 5).column(0).to_owned();
        let y = x.dot(&beta0) + noise;
        let cfg = LassoConfig::with_lambda(0.05);
        let fit = lasso_fit(x.view(), y.view(), &cfg).unwrap();
        assert!(fit.converged);
        assert!(kkt_residual(x.view(), y.view(), fit.beta_hat.view(), cfg.lambda) < 10.0 * cfg.tol);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        let direct = lasso_objective(x.view(), y.view(), fit.beta_hat.view(), cfg.lambda);
        assert!((direct - fit.objective).abs() < 1e-9 * direct.max(1.0));
    }

    #[test]
    fn reports_non_convergence() {
        let x = gaussian_design(100, 30, 6);
        let y = gaussian_design(100, 1, 7).column(0).to_owned();
        let cfg = LassoConfig {
            lambda: 0.01,
            max_iters: 1,
            ..LassoConfig::default()
        };
        let fit = lasso_fit(x.view(), y.view(), &cfg).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let x = gaussian_design(10, 3, 8);
        let y = Array1::zeros(9);
        assert!(matches!(
            lasso_fit(x.view(), y.view(), &LassoConfig::with_lambda(0.1)),
            Err(Error::InvalidDimensions(_))
        ));
        assert!(lasso_fit(
            x.view(),
            Array1::zeros(10).view(),
            &LassoConfig::with_lambda(-1.0)
        )
        .is_err());
    }

    #[test]
    fn standardize_matches_rescaled_problem() {
        let (n, p) = (200, 6);
        let mut x = gaussian_design(n, p, 9);
        for j in 0..p {
            x.column_mut(j).mapv_inplace(|v| v * (j as f64 + 1.0));
        }
        let y = x.column(1).to_owned() * 0.5 + x.column(4).to_owned() * -0.2;
        let cfg = LassoConfig {
            lambda: 0.02,
            standardize: true,
            ..LassoConfig::default()
        };
        let fit = lasso_fit(x.view(), y.view(), &cfg).unwrap();
        let mut xs = x.clone();
        let mut scales = vec![0.0; p];
        for (j, scale) in scales.iter_mut().enumerate() {
            let s = (xs.column(j).mapv(|v| v * v).sum() / n as f64).sqrt();
            xs.column_mut(j).mapv_inplace(|v| v / s);
            *scale = s;
        }
        let plain = lasso_fit(xs.view(), y.view(), &LassoConfig::with_lambda(0.02)).unwrap();
        for (j, scale) in scales.iter().enumerate() {
            assert!((fit.beta_hat[j] * scale - plain.beta_hat[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_formulas() {
        let got = lambda_theory(1.0, 1.0, 3.0_f64.exp(), 3.0);
        assert!((got - 2.0 * 3.0_f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            lambda_experiment(1000.0, 5000.0),
            ((1000f64).ln() / 5000.0).sqrt()
        );
        for (p, n) in [(10.0, 7.0), (200.0, 1000.0), (1000.0, 5000.0)] {
            let lhs = lambda_theory(0.7, 2.5, p, n);
            let rhs = 2.0 * 0.7 * 2.5 * 3f64.sqrt() * lambda_experiment(p, n);
            assert!((lhs - rhs).abs() < 1e-12 * lhs);
        }
    }
}
