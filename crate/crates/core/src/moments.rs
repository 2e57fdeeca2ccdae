//! Moment functions for the partially linear model.
//!
//! Both moments factor as `m = A * W` with the outcome residual
//! `A = y - q - theta (t - g)` and the treatment residual `e = t - g`:
//!
//! * first order: `W = e`
//! * second order of order `r`: `W = e^r - mu_r - r e mu_{r-1}`
//!
//! The nuisance coordinates are ordered `(q, g, mu_{r-1}, mu_r)`; a multi-index
//! `alpha` counts derivatives in that order. `A` is affine in `(q, g)` and `W`
//! does not involve `q`, so every differential follows from
//! `D^a m = A D^a W - a_q D^{a - e_q} W + theta a_g D^{a - e_g} W`.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type MultiIndex = [u8; 4];

/// Highest total differential order served by [`dalpha_moment`].
pub const MAX_ALPHA_ORDER: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum MomentOrder {
    FirstOrder,
    SecondOrder { r: u8 },
}

/// Where the residual moments `mu_{r-1}, mu_r` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    /// Exact population moments of the treatment noise (simulation only).
    Known,
    /// Moments estimated from residuals on an independent subsample.
    #[default]
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentSpec {
    pub order: MomentOrder,
    pub mode: MomentMode,
}

impl MomentSpec {
    pub fn first_order() -> Self {
        Self {
            order: MomentOrder::FirstOrder,
            mode: MomentMode::Estimated,
        }
    }

    pub fn second_order(r: u8, mode: MomentMode) -> Result<Self> {
        let spec = Self {
            order: MomentOrder::SecondOrder { r },
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.order {
            MomentOrder::SecondOrder { r } if r != 2 && r != 3 => Err(Error::InvalidParameter(
                format!("second-order moment needs r in {{2, 3}}, got {r}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn r(&self) -> Option<u8> {
        match self.order {
            MomentOrder::FirstOrder => None,
            MomentOrder::SecondOrder { r } => Some(r),
        }
    }

    /// Checks the non-Gaussianity condition that makes the second-order moment
    /// identify theta, given the noise moments `E[eta^1..eta^4]`.
    ///
    /// `r = 2` needs `E[eta^3] != 0`; `r = 3` needs `E[eta^4] != 3 E[eta^2]^2`.
    pub fn check_identifiable(&self, eta_moments: &[f64]) -> Result<()> {
        let gap = match self.order {
            MomentOrder::FirstOrder => eta_moments[1],
            MomentOrder::SecondOrder { r: 2 } => eta_moments[2],
            MomentOrder::SecondOrder { .. } => {
                eta_moments[3] - 3.0 * eta_moments[1] * eta_moments[1]
            }
        };
        if gap.abs() < 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "treatment noise moments {eta_moments:?} give a degenerate jacobian for {:?}",
                self.order
            )));
        }
        Ok(())
    }
}

/// Scalar nuisance values `(q(X), g(X), mu_{r-1}(X), mu_r(X))` at one observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NuisancePoint {
    pub q: f64,
    pub g: f64,
    pub mu_prev: f64,
    pub mu_r: f64,
}

impl NuisancePoint {
    pub fn as_array(&self) -> [f64; 4] {
        [self.q, self.g, self.mu_prev, self.mu_r]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            q: v[0],
            g: v[1],
            mu_prev: v[2],
            mu_r: v[3],
        }
    }
}

/// Moment parameters `(mu_{r-1}, mu_r)` for order `r` from `mu2` and `mu3`.
/// For `r = 2` the lower moment is `E[eta | X] = 0`.
pub fn residual_moment_pair(r: u8, mu2: f64, mu3: f64) -> (f64, f64) {
    match r {
        2 => (0.0, mu2),
        _ => (mu2, mu3),
    }
}

/// `(y - q - theta (t - g)) (t - g)`.
#[inline]
pub fn moment_first_order(t: f64, y: f64, theta: f64, q: f64, g: f64) -> f64 {
    let e = t - g;
    (y - q - theta * e) * e
}

/// Second factor of the order-`r` moment: `e^r - mu_r - r e mu_{r-1}`.
#[inline]
pub fn second_order_weight(e: f64, r: u8, mu_prev: f64, mu_r: f64) -> f64 {
    e.powi(r as i32) - mu_r - r as f64 * e * mu_prev
}

/// `(y - q - theta (t - g)) ((t - g)^r - mu_r - r (t - g) mu_{r-1})`.
#[inline]
pub fn moment_second_order(t: f64, y: f64, theta: f64, np: &NuisancePoint, r: u8) -> f64 {
    let e = t - np.g;
    (y - np.q - theta * e) * second_order_weight(e, r, np.mu_prev, np.mu_r)
}

/// Treatment-residual weight `W` of `spec` at `e = t - g`.
#[inline]
pub fn moment_weight(spec: &MomentSpec, e: f64, np: &NuisancePoint) -> f64 {
    match spec.order {
        MomentOrder::FirstOrder => e,
        MomentOrder::SecondOrder { r } => second_order_weight(e, r, np.mu_prev, np.mu_r),
    }
}

pub fn moment(spec: &MomentSpec, t: f64, y: f64, theta: f64, np: &NuisancePoint) -> f64 {
    match spec.order {
        MomentOrder::FirstOrder => moment_first_order(t, y, theta, np.q, np.g),
        MomentOrder::SecondOrder { r } => moment_second_order(t, y, theta, np, r),
    }
}

/// `d m / d theta = -(t - g) W`; the moments are linear in theta so this does
/// not depend on `theta` or `y`.
pub fn dtheta_moment(spec: &MomentSpec, t: f64, _y: f64, _theta: f64, np: &NuisancePoint) -> f64 {
    let e = t - np.g;
    -e * moment_weight(spec, e, np)
}

fn falling_factorial(r: u32, k: u32) -> f64 {
    (0..k).map(|i| (r - i) as f64).product()
}

/// `D^(0, k, i, j) W` with `k` derivatives in `g`, `i` in `mu_{r-1}`, `j` in `mu_r`.
fn weight_differential(
    spec: &MomentSpec,
    e: f64,
    np: &NuisancePoint,
    k: u32,
    i: u32,
    j: u32,
) -> f64 {
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    match spec.order {
        MomentOrder::FirstOrder => match (k, i, j) {
            (0, 0, 0) => e,
            (1, 0, 0) => -1.0,
            _ => 0.0,
        },
        MomentOrder::SecondOrder { r } => {
            let r = r as u32;
            let rf = r as f64;
            match (i, j) {
                (0, 1) if k == 0 => -1.0,
                (0, 0) => {
                    // (-1)^k d^k/de^k (e^r - r e mu_prev)
                    let power_part = if k <= r {
                        falling_factorial(r, k) * e.powi((r - k) as i32)
                    } else {
                        0.0
                    };
                    let linear_part = match k {
                        0 => -rf * e * np.mu_prev - np.mu_r,
                        1 => -rf * np.mu_prev,
                        _ => 0.0,
                    };
                    sign * (power_part + linear_part)
                }
                (1, 0) => match k {
                    0 => -rf * e,
                    1 => rf,
                    _ => 0.0,
                },
                _ => 0.0,
            }
        }
    }
}

/// Mixed partial derivative of the moment in its nuisance arguments.
pub fn dalpha_moment(
    spec: &MomentSpec,
    alpha: MultiIndex,
    t: f64,
    y: f64,
    theta: f64,
    np: &NuisancePoint,
) -> Result<f64> {
    let order: u32 = alpha.iter().map(|&a| a as u32).sum();
    if order > MAX_ALPHA_ORDER {
        return Err(Error::UnsupportedAlpha {
            alpha,
            reason: "total order above 3",
        });
    }
    let [aq, ag, ai, aj] = alpha.map(u32::from);
    let e = t - np.g;
    let a = y - np.q - theta * e;
    let w = |k: u32| weight_differential(spec, e, np, k, ai, aj);
    // W has no q dependence, so any q derivative that does not land on A vanishes
    let mut value = if aq == 0 { a * w(ag) } else { 0.0 };
    if aq == 1 {
        value -= w(ag);
    }
    if ag >= 1 && aq == 0 {
        value += theta * ag as f64 * w(ag - 1);
    }
    Ok(value)
}

/// Residual moments from an independent subsample:
/// `mu2 = mean(eta^2)`, `mu3 = mean(eta^3 - 3 mu2 eta)` with `eta = t - <x, gamma_hat>`.
pub fn estimate_residual_moments(
    t_prime: ArrayView1<f64>,
    x_prime: ArrayView2<f64>,
    gamma_hat: ArrayView1<f64>,
) -> Result<(f64, f64)> {
    let n = t_prime.len();
    if n == 0 {
        return Err(Error::EmptySample("residual-moment subsample"));
    }
    if x_prime.nrows() != n || x_prime.ncols() != gamma_hat.len() {
        return Err(Error::InvalidDimensions(format!(
            "x' is {:?}, t' has {n} entries, gamma_hat has {}",
            x_prime.dim(),
            gamma_hat.len()
        )));
    }
    let eta_hat = &t_prime - &x_prime.dot(&gamma_hat);
    Ok(residual_moments_from_residuals(
        eta_hat.as_slice().expect("owned array"),
    ))
}

pub fn residual_moments_from_residuals(eta_hat: &[f64]) -> (f64, f64) {
    let nf = eta_hat.len() as f64;
    let mu2 = eta_hat.iter().map(|v| v * v).sum::<f64>() / nf;
    let mu3 = eta_hat
        .iter()
        .map(|v| v * v * v - 3.0 * mu2 * v)
        .sum::<f64>()
        / nf;
    (mu2, mu3)
}

/// All multi-indices over the first `coords` nuisance coordinates with total
/// order at most `max_order`, in graded lexicographic order.
pub fn multi_indices(coords: usize, max_order: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for total in 0..=max_order {
        let mut stack = vec![(0usize, [0u8; 4], total)];
        let mut level = Vec::new();
        while let Some((pos, idx, left)) = stack.pop() {
            if pos == coords - 1 {
                let mut done = idx;
                done[pos] = left as u8;
                level.push(done);
                continue;
            }
            for a in 0..=left {
                let mut next = idx;
                next[pos] = a as u8;
                stack.push((pos + 1, next, left - a));
            }
        }
        level.sort_unstable_by(|a, b| b.cmp(a));
        out.extend(level);
    }
    out
}
