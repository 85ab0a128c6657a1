//! Response distributions parameterized the gamlss way: every distribution
//! parameter gets its own additive predictor through a link function, and the
//! fitting engine only ever talks to a distribution through log-density,
//! cdf, and first/second derivatives with respect to the predictors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::RngCore;
use thiserror::Error;

mod dgp;
mod gamma;
mod gaussian;
mod zap;

pub use dgp::DiscreteGeneralizedPareto;
pub use gamma::Gamma;
pub use gaussian::Gaussian;
pub use zap::ZeroAdjustedPoisson;

/// Weights below this are clipped up so IWLS working weights stay strictly positive.
pub const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FamilyError {
    #[error("unknown family {0:?} (known: NO, GA, ZAP, DGP)")]
    Unknown(String),
    #[error("parameter {name} = {value} is outside the parameter space of {family}")]
    InvalidParameter {
        family: &'static str,
        name: &'static str,
        value: f64,
    },
    #[error("response value {value} is outside the support of {family}")]
    OutsideSupport { family: &'static str, value: f64 },
    #[error("expected {expected} parameter columns, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Map between a distribution parameter and its additive predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// eta = theta
    Identity,
    /// eta = log(theta)
    Log,
    /// eta = log(theta^2)
    LogSquare,
    /// eta = log(theta / (1 - theta))
    Logit,
}

impl Link {
    pub fn apply(self, theta: f64) -> f64 {
        match self {
            Link::Identity => theta,
            Link::Log => theta.ln(),
            Link::LogSquare => 2.0 * theta.ln(),
            Link::Logit => (theta / (1.0 - theta)).ln(),
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::LogSquare => (0.5 * eta).exp(),
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Real,
    Positive,
    /// Non-negative integers.
    Counts,
}

/// A response distribution with one predictor per parameter.
///
/// The scalar methods assume their inputs were validated (`check_theta`,
/// `check_y`); out-of-range values propagate as non-finite results, which the
/// engine treats as a rejected update rather than a hard error.
pub trait Family: Send + Sync {
    fn name(&self) -> &'static str;
    fn param_names(&self) -> &'static [&'static str];
    fn links(&self) -> &'static [Link];
    fn support(&self) -> Support;

    fn n_params(&self) -> usize {
        self.links().len()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), FamilyError>;
    fn check_y(&self, y: f64) -> Result<(), FamilyError>;

    /// Log density (or log probability mass) at `y`.
    fn logpdf(&self, y: f64, theta: &[f64]) -> f64;

    /// P(Y <= y).
    fn cdf(&self, y: f64, theta: &[f64]) -> f64;

    /// d loglik / d eta_k at one observation; `eta` and `theta` describe the
    /// same point on both scales.
    fn score_eta(&self, y: f64, eta: &[f64], theta: &[f64], k: usize) -> f64;

    /// Working weight for eta_k before the positivity floor: expected Fisher
    /// information where it has a closed form, otherwise clipped observed
    /// information.
    fn weight_eta(&self, y: f64, eta: &[f64], theta: &[f64], k: usize) -> f64;

    /// Moment-style parameter estimates from a response slice, used to seed
    /// intercepts.
    fn initial_theta(&self, y: &[f64]) -> Vec<f64>;

    /// Draw one response value.
    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> f64;
}

/// Look up a family by its short name.
pub fn by_name(name: &str) -> Result<Box<dyn Family>, FamilyError> {
    match name.to_ascii_uppercase().as_str() {
        "NO" => Ok(Box::new(Gaussian)),
        "GA" => Ok(Box::new(Gamma)),
        "ZAP" => Ok(Box::new(ZeroAdjustedPoisson)),
        "DGP" => Ok(Box::new(DiscreteGeneralizedPareto)),
        _ => Err(FamilyError::Unknown(name.to_string())),
    }
}

/// Predictors and the implied distribution parameters for a block of
/// observations, rows = observations, columns = parameters.
#[derive(Debug, Clone)]
pub struct ParamEval {
    pub eta: Array2<f64>,
    pub theta: Array2<f64>,
}

impl ParamEval {
    pub fn from_eta(family: &dyn Family, eta: Array2<f64>) -> Self {
        let links = family.links();
        let mut theta = eta.clone();
        for (j, link) in links.iter().enumerate() {
            theta.column_mut(j).mapv_inplace(|e| link.inverse(e));
        }
        ParamEval { eta, theta }
    }

    pub fn nrows(&self) -> usize {
        self.eta.nrows()
    }
}

fn check_param_count(family: &dyn Family, got: usize) -> Result<(), FamilyError> {
    if got != family.n_params() {
        return Err(FamilyError::ParamCount {
            expected: family.n_params(),
            got,
        });
    }
    Ok(())
}

/// Validated per-observation log density.
pub fn logpdf(
    family: &dyn Family,
    y: ArrayView1<f64>,
    theta: ArrayView2<f64>,
) -> Result<Array1<f64>, FamilyError> {
    check_param_count(family, theta.ncols())?;
    let mut out = Array1::zeros(y.len());
    let mut buf = vec![0.0; theta.ncols()];
    for i in 0..y.len() {
        family.check_y(y[i])?;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = theta[[i, j]];
        }
        family.check_theta(&buf)?;
        out[i] = family.logpdf(y[i], &buf);
    }
    Ok(out)
}

/// Validated per-observation cdf.
pub fn cdf(
    family: &dyn Family,
    y: ArrayView1<f64>,
    theta: ArrayView2<f64>,
) -> Result<Array1<f64>, FamilyError> {
    check_param_count(family, theta.ncols())?;
    let mut out = Array1::zeros(y.len());
    let mut buf = vec![0.0; theta.ncols()];
    for i in 0..y.len() {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = theta[[i, j]];
        }
        family.check_theta(&buf)?;
        out[i] = family.cdf(y[i], &buf);
    }
    Ok(out)
}

/// Score vector u_k = d loglik / d eta_k over a block.
pub fn score_eta(family: &dyn Family, y: ArrayView1<f64>, eval: &ParamEval, k: usize) -> Array1<f64> {
    let n = y.len();
    let mut out = Array1::zeros(n);
    let kk = family.n_params();
    let mut eta = vec![0.0; kk];
    let mut theta = vec![0.0; kk];
    for i in 0..n {
        for j in 0..kk {
            eta[j] = eval.eta[[i, j]];
            theta[j] = eval.theta[[i, j]];
        }
        out[i] = family.score_eta(y[i], &eta, &theta, k);
    }
    out
}

/// Working weights for eta_k over a block, floored at [`WEIGHT_FLOOR`].
pub fn weights_eta(
    family: &dyn Family,
    y: ArrayView1<f64>,
    eval: &ParamEval,
    k: usize,
) -> Array1<f64> {
    let n = y.len();
    let mut out = Array1::zeros(n);
    let kk = family.n_params();
    let mut eta = vec![0.0; kk];
    let mut theta = vec![0.0; kk];
    for i in 0..n {
        for j in 0..kk {
            eta[j] = eval.eta[[i, j]];
            theta[j] = eval.theta[[i, j]];
        }
        let w = family.weight_eta(y[i], &eta, &theta, k);
        out[i] = if w.is_finite() && w > WEIGHT_FLOOR { w } else { WEIGHT_FLOOR };
    }
    out
}

/// Randomized quantile residuals: continuous families map F(y) through the
/// standard normal quantile, discrete families draw uniformly between
/// F(y-1) and F(y) first, so a correct model yields standard normal residuals.
pub fn quantile_residuals(
    family: &dyn Family,
    y: ArrayView1<f64>,
    theta: ArrayView2<f64>,
    seed: u64,
) -> Result<Array1<f64>, FamilyError> {
    use rand::{Rng, SeedableRng};
    check_param_count(family, theta.ncols())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let discrete = family.support() == Support::Counts;
    let mut out = Array1::zeros(y.len());
    let mut buf = vec![0.0; theta.ncols()];
    for i in 0..y.len() {
        family.check_y(y[i])?;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = theta[[i, j]];
        }
        family.check_theta(&buf)?;
        let u = if discrete {
            let hi = family.cdf(y[i], &buf);
            let lo = if y[i] >= 1.0 { family.cdf(y[i] - 1.0, &buf) } else { 0.0 };
            lo + (hi - lo) * rng.random::<f64>()
        } else {
            family.cdf(y[i], &buf)
        };
        out[i] = normal_quantile(u.clamp(1e-12, 1.0 - 1e-12));
    }
    Ok(out)
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::ContinuousCDF;
    statrs::distribution::Normal::standard().inverse_cdf(p)
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Trigamma function via the shift recurrence plus the asymptotic series.
/// statrs ships digamma but not its derivative.
pub(crate) fn trigamma(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NAN;
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        * (1.0
            + inv
                * (0.5
                    + inv * (1.0 / 6.0
                        + inv2
                            * (-1.0 / 30.0
                                + inv2
                                    * (1.0 / 42.0
                                        + inv2 * (-1.0 / 30.0 + inv2 * (5.0 / 66.0)))))))
}
