//! Zero-adjusted Poisson: P(Y = 0) = sigma, and conditional on Y >= 1 the
//! response follows a zero-truncated Poisson with rate mu. Links are
//! log(mu^2) = eta_1 and logit(sigma) = eta_2.

use rand::{Rng, RngCore};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use super::{Family, FamilyError, Link, Support};

pub struct ZeroAdjustedPoisson;

/// 1 / (e^mu - 1), the hazard-style correction from zero truncation.
fn q(mu: f64) -> f64 {
    1.0 / mu.exp_m1()
}

/// log(1 - e^-mu), computed without cancellation for small mu.
fn ln_one_minus_exp_neg(mu: f64) -> f64 {
    (-(-mu).exp_m1()).ln()
}

impl Family for ZeroAdjustedPoisson {
    fn name(&self) -> &'static str {
        "ZAP"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["mu", "sigma"]
    }

    fn links(&self) -> &'static [Link] {
        &[Link::LogSquare, Link::Logit]
    }

    fn support(&self) -> Support {
        Support::Counts
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), FamilyError> {
        if !(theta[0].is_finite() && theta[0] > 0.0) {
            return Err(FamilyError::InvalidParameter {
                family: "ZAP",
                name: "mu",
                value: theta[0],
            });
        }
        if !(theta[1] > 0.0 && theta[1] < 1.0) {
            return Err(FamilyError::InvalidParameter {
                family: "ZAP",
                name: "sigma",
                value: theta[1],
            });
        }
        Ok(())
    }

    fn check_y(&self, y: f64) -> Result<(), FamilyError> {
        if !(y.is_finite() && y >= 0.0 && y.fract() == 0.0) {
            return Err(FamilyError::OutsideSupport { family: "ZAP", value: y });
        }
        Ok(())
    }

    fn logpdf(&self, y: f64, theta: &[f64]) -> f64 {
        let (mu, sigma) = (theta[0], theta[1]);
        if y == 0.0 {
            sigma.ln()
        } else {
            (1.0 - sigma).ln() + y * mu.ln() - mu - ln_gamma(y + 1.0) - ln_one_minus_exp_neg(mu)
        }
    }

    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        let (mu, sigma) = (theta[0], theta[1]);
        let m = y.floor();
        // P(Poisson <= m) through the regularized upper incomplete gamma.
        let pois_cdf = gamma_ur(m + 1.0, mu);
        let e = (-mu).exp();
        (sigma + (1.0 - sigma) * (pois_cdf - e) / (1.0 - e)).min(1.0)
    }

    fn score_eta(&self, y: f64, _eta: &[f64], theta: &[f64], k: usize) -> f64 {
        let (mu, sigma) = (theta[0], theta[1]);
        match k {
            0 => {
                if y == 0.0 {
                    0.0
                } else {
                    // d mu / d eta = mu / 2 under the log(mu^2) link.
                    0.5 * mu * (y / mu - 1.0 - q(mu))
                }
            }
            1 => {
                if y == 0.0 {
                    1.0 - sigma
                } else {
                    -sigma
                }
            }
            _ => unreachable!("ZAP has two parameters"),
        }
    }

    fn weight_eta(&self, y: f64, _eta: &[f64], theta: &[f64], k: usize) -> f64 {
        let (mu, sigma) = (theta[0], theta[1]);
        match k {
            0 => {
                if y == 0.0 {
                    // Zeros say nothing about mu; the caller floors this.
                    0.0
                } else {
                    // Observed information; independent of y for y >= 1.
                    let qv = q(mu);
                    0.25 * mu * (1.0 + qv) - 0.25 * mu * mu * (qv + qv * qv)
                }
            }
            1 => sigma * (1.0 - sigma),
            _ => unreachable!("ZAP has two parameters"),
        }
    }

    fn initial_theta(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len().max(1) as f64;
        let zeros = y.iter().filter(|v| **v == 0.0).count() as f64;
        let sigma = (zeros / n).clamp(0.01, 0.99);
        let pos: Vec<f64> = y.iter().copied().filter(|v| *v > 0.0).collect();
        let mu = if pos.is_empty() {
            1.0
        } else {
            (pos.iter().sum::<f64>() / pos.len() as f64).clamp(0.1, 1e3)
        };
        vec![mu, sigma]
    }

    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> f64 {
        let (mu, sigma) = (theta[0], theta[1]);
        if rng.random::<f64>() < sigma {
            return 0.0;
        }
        // Zero-truncated Poisson by inversion over the renormalized pmf.
        let t: f64 = rng.random();
        let norm = -(-mu).exp_m1();
        let mut k = 1.0_f64;
        let mut pmf = mu * (-mu).exp() / norm;
        let mut acc = pmf;
        while acc < t && k < 1e6 {
            pmf *= mu / (k + 1.0);
            k += 1.0;
            acc += pmf;
        }
        k
    }
}
