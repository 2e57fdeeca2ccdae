//! Partially linear data-generating process.
//!
//! Observations follow
//!
//! ```text
//! T = <X, gamma0> + eta
//! Y = theta0 * T + <X, beta0> + eps
//! ```
//!
//! with `X` i.i.d. standard normal, `beta0` and `gamma0` sharing one random
//! support of size `s`, and `(eta, eps, X)` mutually independent. The outcome
//! regression nuisance is `q0 = theta0 * gamma0 + beta0` (so `E[Y | X] = <X, q0>`).

use ndarray::{Array1, Array2};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

const PROB_SUM_TOL: f64 = 1e-12;

/// Law of the treatment noise `eta` or outcome noise `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseDistribution {
    Discrete {
        support: Vec<f64>,
        probs: Vec<f64>,
    },
    /// `Uniform(-half_width, half_width)`.
    Uniform {
        half_width: f64,
    },
    Gaussian {
        std_dev: f64,
    },
}

impl NoiseDistribution {
    pub fn discrete(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let d = NoiseDistribution::Discrete { support, probs };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(half_width: f64) -> Result<Self> {
        let d = NoiseDistribution::Uniform { half_width };
        d.validate()?;
        Ok(d)
    }

    pub fn gaussian(std_dev: f64) -> Result<Self> {
        let d = NoiseDistribution::Gaussian { std_dev };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseDistribution::Discrete { support, probs } => {
                if support.is_empty() || support.len() != probs.len() {
                    return Err(Error::InvalidParameter(format!(
                        "discrete law needs matching nonempty support/probs, got {} and {}",
                        support.len(),
                        probs.len()
                    )));
                }
                if support.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter("non-finite support point".into()));
                }
                if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(Error::InvalidParameter("negative probability".into()));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "probabilities sum to {total}, not 1"
                    )));
                }
            }
            NoiseDistribution::Uniform { half_width } => {
                if !(*half_width > 0.0 && half_width.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "uniform half-width must be positive, got {half_width}"
                    )));
                }
            }
            NoiseDistribution::Gaussian { std_dev } => {
                if !(*std_dev > 0.0 && std_dev.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "gaussian std dev must be positive, got {std_dev}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            NoiseDistribution::Discrete { support, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in support.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                // u landed in the rounding gap above the cumulative sum
                *support.last().expect("validated nonempty")
            }
            NoiseDistribution::Uniform { half_width } => {
                rng.random_range(-*half_width..*half_width)
            }
            NoiseDistribution::Gaussian { std_dev } => {
                let z: f64 = StandardNormal.sample(rng);
                std_dev * z
            }
        }
    }

    pub fn std_dev(&self) -> f64 {
        let m = exact_noise_moments(self, 2);
        (m[1] - m[0] * m[0]).max(0.0).sqrt()
    }
}

/// The four-point price-discount law `{0.5, 0, -1.5, -3.5}` with
/// probabilities `(.65, .2, .1, .05)`. Mean 0, variance 1, skewed and
/// heavy-tailed.
pub fn default_discrete_eta() -> NoiseDistribution {
    NoiseDistribution::Discrete {
        support: vec![0.5, 0.0, -1.5, -3.5],
        probs: vec![0.65, 0.2, 0.1, 0.05],
    }
}

/// `Uniform(-sigma_eps, sigma_eps)` outcome noise.
pub fn default_eps(sigma_eps: f64) -> Result<NoiseDistribution> {
    NoiseDistribution::uniform(sigma_eps)
}

/// Exact decimal value of the shortest round-trip representation of `v`.
///
/// `0.65_f64` is not exactly 13/20 in binary, but its shortest decimal form
/// is, and that is the value the law was written down with.
pub fn decimal_rational(v: f64) -> BigRational {
    let text = format!("{v}");
    let (neg, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    let digits: String = format!("{int_part}{frac_part}");
    let numer: BigInt = digits
        .parse()
        .expect("f64 Display yields plain decimal digits");
    let denom = num_traits::pow(BigInt::from(10), frac_part.len());
    let r = BigRational::new(numer, denom);
    if neg {
        -r
    } else {
        r
    }
}

/// Raw moments `E[X^1..X^r_max]` of a discrete law in exact rational arithmetic.
pub fn exact_discrete_moments(support: &[f64], probs: &[f64], r_max: usize) -> Vec<BigRational> {
    let xs: Vec<BigRational> = support.iter().map(|&v| decimal_rational(v)).collect();
    let ps: Vec<BigRational> = probs.iter().map(|&v| decimal_rational(v)).collect();
    let mut powers: Vec<BigRational> = vec![BigRational::one(); xs.len()];
    (1..=r_max)
        .map(|_| {
            let mut acc = BigRational::zero();
            for ((pw, x), p) in powers.iter_mut().zip(&xs).zip(&ps) {
                *pw = &*pw * x;
                acc += &*pw * p;
            }
            acc
        })
        .collect()
}

/// Raw moments `E[X^1], ..., E[X^r_max]`.
///
/// Discrete laws are enumerated in exact rational arithmetic and rounded once;
/// uniform and Gaussian laws use their closed forms.
pub fn exact_noise_moments(dist: &NoiseDistribution, r_max: usize) -> Vec<f64> {
    match dist {
        NoiseDistribution::Discrete { support, probs } => {
            exact_discrete_moments(support, probs, r_max)
                .iter()
                .map(|m| m.to_f64().unwrap_or(f64::NAN))
                .collect()
        }
        NoiseDistribution::Uniform { half_width } => (1..=r_max)
            .map(|k| {
                if k % 2 == 1 {
                    0.0
                } else {
                    half_width.powi(k as i32) / (k as f64 + 1.0)
                }
            })
            .collect(),
        NoiseDistribution::Gaussian { std_dev } => (1..=r_max)
            .map(|k| {
                if k % 2 == 1 {
                    0.0
                } else {
                    let double_fact: f64 = (1..k).step_by(2).map(|j| j as f64).product();
                    double_fact * std_dev.powi(k as i32)
                }
            })
            .collect(),
    }
}

/// `E[eta^4] - 3 E[eta^2]^2`, zero for every Gaussian law.
pub fn excess_kurtosis_gap(dist: &NoiseDistribution) -> f64 {
    let m = exact_noise_moments(dist, 4);
    m[3] - 3.0 * m[1] * m[1]
}

/// Law of the nonzero nuisance coefficients, `Uniform(low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientLaw {
    pub low: f64,
    pub high: f64,
}

impl Default for CoefficientLaw {
    fn default() -> Self {
        Self {
            low: 0.0,
            high: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlrInstance {
    pub theta0: f64,
    pub beta0: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub q0: Vec<f64>,
    /// Sorted coordinates where `beta0` and `gamma0` are nonzero.
    pub support: Vec<usize>,
    pub eta_dist: NoiseDistribution,
    pub eps_dist: NoiseDistribution,
    pub p: usize,
    pub s: usize,
}

impl PlrInstance {
    /// Builds an instance from explicit coefficients. The support is read off
    /// the nonzero pattern, which must agree between `beta0` and `gamma0`
    /// unless one of them is identically zero.
    pub fn from_coefficients(
        theta0: f64,
        beta0: Vec<f64>,
        gamma0: Vec<f64>,
        eta_dist: NoiseDistribution,
        eps_dist: NoiseDistribution,
    ) -> Result<Self> {
        if beta0.len() != gamma0.len() || beta0.is_empty() {
            return Err(Error::InvalidDimensions(format!(
                "beta0 has length {}, gamma0 has length {}",
                beta0.len(),
                gamma0.len()
            )));
        }
        eta_dist.validate()?;
        eps_dist.validate()?;
        let nz = |v: &[f64]| -> Vec<usize> { (0..v.len()).filter(|&j| v[j] != 0.0).collect() };
        let (sb, sg) = (nz(&beta0), nz(&gamma0));
        let support = match (sb.is_empty(), sg.is_empty()) {
            (true, _) => sg,
            (_, true) => sb,
            _ if sb == sg => sb,
            _ => {
                return Err(Error::InvalidParameter(
                    "beta0 and gamma0 must share one support".into(),
                ))
            }
        };
        let q0 = beta0
            .iter()
            .zip(&gamma0)
            .map(|(b, g)| theta0 * g + b)
            .collect();
        Ok(Self {
            theta0,
            p: beta0.len(),
            s: support.len(),
            beta0,
            gamma0,
            q0,
            support,
            eta_dist,
            eps_dist,
        })
    }

    pub fn g0(&self, x: &[f64]) -> f64 {
        dot(x, &self.gamma0)
    }

    pub fn q0_at(&self, x: &[f64]) -> f64 {
        dot(x, &self.q0)
    }

    pub fn f0(&self, x: &[f64]) -> f64 {
        dot(x, &self.beta0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws a random instance: support uniform without replacement from `0..p`,
/// each nonzero coefficient of `beta0` and `gamma0` i.i.d. from `coeff_law`.
///
/// `s = 0` is accepted and yields an unconfounded instance.
pub fn generate_instance(
    p: usize,
    s: usize,
    theta0: f64,
    coeff_law: CoefficientLaw,
    eta_dist: NoiseDistribution,
    eps_dist: NoiseDistribution,
    rng: &mut SimRng,
) -> Result<PlrInstance> {
    if p == 0 || s > p {
        return Err(Error::InvalidDimensions(format!(
            "need 0 <= s <= p and p >= 1, got s = {s}, p = {p}"
        )));
    }
    if !(coeff_law.low < coeff_law.high) {
        return Err(Error::InvalidParameter(format!(
            "coefficient law needs low < high, got {:?}",
            coeff_law
        )));
    }
    eta_dist.validate()?;
    eps_dist.validate()?;
    let mut support = index::sample(rng, p, s).into_vec();
    support.sort_unstable();
    let mut beta0 = vec![0.0; p];
    let mut gamma0 = vec![0.0; p];
    for &j in &support {
        beta0[j] = rng.random_range(coeff_law.low..coeff_law.high);
        gamma0[j] = rng.random_range(coeff_law.low..coeff_law.high);
    }
    let q0 = beta0
        .iter()
        .zip(&gamma0)
        .map(|(b, g)| theta0 * g + b)
        .collect();
    Ok(PlrInstance {
        theta0,
        beta0,
        gamma0,
        q0,
        support,
        eta_dist,
        eps_dist,
        p,
        s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(with = "matrix_rows")]
    pub x: Array2<f64>,
    pub t: Array1<f64>,
    pub y: Array1<f64>,
    pub n: usize,
}

impl Dataset {
    pub fn new(x: Array2<f64>, t: Array1<f64>, y: Array1<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || t.len() != n || y.len() != n {
            return Err(Error::InvalidDimensions(format!(
                "x has {} rows, t has {}, y has {}",
                n,
                t.len(),
                y.len()
            )));
        }
        if x.iter()
            .chain(t.iter())
            .chain(y.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "dataset contains NaN or Inf".into(),
            ));
        }
        Ok(Self { x, t, y, n })
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Copies the rows listed in `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(ndarray::Axis(0), idx),
            t: self.t.select(ndarray::Axis(0), idx),
            y: self.y.select(ndarray::Axis(0), idx),
            n: idx.len(),
        }
    }
}

/// Noise draws behind a generated dataset, kept for invariant checks.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub eta: Array1<f64>,
    pub eps: Array1<f64>,
}

pub fn generate_dataset(instance: &PlrInstance, n: usize, rng: &mut SimRng) -> Result<Dataset> {
    generate_dataset_with_noise(instance, n, rng).map(|(d, _)| d)
}

/// Like [`generate_dataset`], also returning the `eta` and `eps` draws.
///
/// Draw order per row: `p` covariates, then `eta`, then `eps`.
pub fn generate_dataset_with_noise(
    instance: &PlrInstance,
    n: usize,
    rng: &mut SimRng,
) -> Result<(Dataset, NoiseDraws)> {
    if n == 0 {
        return Err(Error::InvalidDimensions("n must be at least 1".into()));
    }
    let p = instance.p;
    let mut x = Array2::<f64>::zeros((n, p));
    let mut t = Array1::<f64>::zeros(n);
    let mut y = Array1::<f64>::zeros(n);
    let mut eta = Array1::<f64>::zeros(n);
    let mut eps = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut row = x.row_mut(i);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let row = row.as_slice().expect("standard layout row");
        let e = instance.eta_dist.sample(rng);
        let u = instance.eps_dist.sample(rng);
        let ti = instance.g0(row) + e;
        t[i] = ti;
        y[i] = instance.theta0 * ti + instance.f0(row) + u;
        eta[i] = e;
        eps[i] = u;
    }
    Ok((Dataset { x, t, y, n }, NoiseDraws { eta, eps }))
}

mod matrix_rows {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((n, p), flat).map_err(D::Error::custom)
    }
}
