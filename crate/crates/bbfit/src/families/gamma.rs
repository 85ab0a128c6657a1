//! Gamma family in mean/dispersion form: shape 1/sigma^2, scale mu*sigma^2,
//! so E(Y) = mu and Var(Y) = mu^2 sigma^2. Both predictors use log-square
//! style links: log(mu) = eta_1, log(sigma^2) = eta_2.

use rand::RngCore;
use rand_distr::Distribution;
use statrs::function::gamma::{digamma, gamma_lr, ln_gamma};

use super::{trigamma, Family, FamilyError, Link, Support};

pub struct Gamma;

impl Gamma {
    /// (shape a, scale s) from the mean/dispersion parameters.
    fn shape_scale(theta: &[f64]) -> (f64, f64) {
        let (mu, sigma) = (theta[0], theta[1]);
        let a = 1.0 / (sigma * sigma);
        (a, mu * sigma * sigma)
    }
}

impl Family for Gamma {
    fn name(&self) -> &'static str {
        "GA"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["mu", "sigma"]
    }

    fn links(&self) -> &'static [Link] {
        &[Link::Log, Link::LogSquare]
    }

    fn support(&self) -> Support {
        Support::Positive
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), FamilyError> {
        if !(theta[0].is_finite() && theta[0] > 0.0) {
            return Err(FamilyError::InvalidParameter {
                family: "GA",
                name: "mu",
                value: theta[0],
            });
        }
        if !(theta[1].is_finite() && theta[1] > 0.0) {
            return Err(FamilyError::InvalidParameter {
                family: "GA",
                name: "sigma",
                value: theta[1],
            });
        }
        Ok(())
    }

    fn check_y(&self, y: f64) -> Result<(), FamilyError> {
        if !(y.is_finite() && y > 0.0) {
            return Err(FamilyError::OutsideSupport { family: "GA", value: y });
        }
        Ok(())
    }

    fn logpdf(&self, y: f64, theta: &[f64]) -> f64 {
        let (a, s) = Self::shape_scale(theta);
        (a - 1.0) * y.ln() - y / s - ln_gamma(a) - a * s.ln()
    }

    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let (a, s) = Self::shape_scale(theta);
        gamma_lr(a, y / s)
    }

    fn score_eta(&self, y: f64, _eta: &[f64], theta: &[f64], k: usize) -> f64 {
        let (a, s) = Self::shape_scale(theta);
        match k {
            0 => y / s - a,
            1 => -a * (y.ln() - digamma(a) - s.ln()) + y / s - a,
            _ => unreachable!("GA has two parameters"),
        }
    }

    fn weight_eta(&self, _y: f64, _eta: &[f64], theta: &[f64], k: usize) -> f64 {
        let (a, _) = Self::shape_scale(theta);
        match k {
            0 => a,
            // a^2 psi'(a) - a; positive because a psi'(a) > 1 for a > 0.
            1 => a * (a * trigamma(a) - 1.0),
            _ => unreachable!("GA has two parameters"),
        }
    }

    fn initial_theta(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len().max(1) as f64;
        let mean = (y.iter().sum::<f64>() / n).max(1e-6);
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let disp = (var / (mean * mean)).clamp(1e-3, 1e3);
        vec![mean, disp.sqrt()]
    }

    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> f64 {
        let (a, s) = Self::shape_scale(theta);
        rand_distr::Gamma::new(a, s).unwrap().sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_mean_unit_dispersion_is_exponential() {
        // a = 1, s = 1: log density at y is -y.
        assert_relative_eq!(Gamma.logpdf(1.0, &[1.0, 1.0]), -1.0, max_relative = 1e-14);
        assert_relative_eq!(Gamma.logpdf(2.5, &[1.0, 1.0]), -2.5, max_relative = 1e-14);
        assert_relative_eq!(
            Gamma.cdf(1.0, &[1.0, 1.0]),
            1.0 - (-1.0_f64).exp(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn mean_score_vanishes_at_the_mean() {
        let theta = [2.0_f64, 0.7];
        assert_relative_eq!(
            Gamma.score_eta(2.0, &[theta[0].ln(), 2.0 * theta[1].ln()], &theta, 0),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn weights_positive_over_parameter_grid() {
        for sigma in [0.1, 0.5, 1.0, 2.0, 5.0] {
            let theta = [1.0, sigma];
            assert!(Gamma.weight_eta(1.0, &[0.0, 0.0], &theta, 0) > 0.0);
            assert!(
                Gamma.weight_eta(1.0, &[0.0, 0.0], &theta, 1) > 0.0,
                "sigma = {sigma}"
            );
        }
    }
}
