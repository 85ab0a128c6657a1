//! Normal location-scale family: identity link for the mean, log-variance
//! link for the scale, so eta_2 = log(sigma^2).

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::{normal_cdf, Family, FamilyError, Link, Support};

pub struct Gaussian;

const LN_SQRT_2PI: f64 = 0.9189385332046727;

impl Family for Gaussian {
    fn name(&self) -> &'static str {
        "NO"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["mu", "sigma"]
    }

    fn links(&self) -> &'static [Link] {
        &[Link::Identity, Link::LogSquare]
    }

    fn support(&self) -> Support {
        Support::Real
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), FamilyError> {
        if !(theta[1].is_finite() && theta[1] > 0.0) {
            return Err(FamilyError::InvalidParameter {
                family: "NO",
                name: "sigma",
                value: theta[1],
            });
        }
        if !theta[0].is_finite() {
            return Err(FamilyError::InvalidParameter {
                family: "NO",
                name: "mu",
                value: theta[0],
            });
        }
        Ok(())
    }

    fn check_y(&self, y: f64) -> Result<(), FamilyError> {
        if !y.is_finite() {
            return Err(FamilyError::OutsideSupport { family: "NO", value: y });
        }
        Ok(())
    }

    fn logpdf(&self, y: f64, theta: &[f64]) -> f64 {
        let z = (y - theta[0]) / theta[1];
        -LN_SQRT_2PI - theta[1].ln() - 0.5 * z * z
    }

    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        normal_cdf((y - theta[0]) / theta[1])
    }

    fn score_eta(&self, y: f64, _eta: &[f64], theta: &[f64], k: usize) -> f64 {
        let (mu, sigma) = (theta[0], theta[1]);
        let s2 = sigma * sigma;
        match k {
            0 => (y - mu) / s2,
            1 => 0.5 * ((y - mu) * (y - mu) / s2 - 1.0),
            _ => unreachable!("NO has two parameters"),
        }
    }

    fn weight_eta(&self, _y: f64, _eta: &[f64], theta: &[f64], k: usize) -> f64 {
        match k {
            // Expected information; for the mean it coincides with the
            // observed second derivative.
            0 => 1.0 / (theta[1] * theta[1]),
            1 => 0.5,
            _ => unreachable!("NO has two parameters"),
        }
    }

    fn initial_theta(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        vec![mean, var.sqrt().max(1e-3)]
    }

    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> f64 {
        Normal::new(theta[0], theta[1]).unwrap().sample(rng)
    }
}
