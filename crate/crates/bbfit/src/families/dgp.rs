//! Discrete generalized Pareto: the counting distribution obtained by
//! discretizing a generalized Pareto survival curve, P(Y = y) = S(y) - S(y+1)
//! with S(x) = (1 + xi*x/sigma)^(-1/xi), xi > 0. Heavy upper tail with index
//! 1/xi; both parameters use log links.

use rand::{Rng, RngCore};

use super::{Family, FamilyError, Link, Support};

pub struct DiscreteGeneralizedPareto;

/// log survival of the underlying continuous generalized Pareto at x >= 0.
fn ln_surv(x: f64, xi: f64, sigma: f64) -> f64 {
    -(xi * x / sigma).ln_1p() / xi
}

/// log of S(y+1)/S(y) computed directly; differencing two log survivals
/// instead would cancel badly far out in the tail.
fn ln_surv_step(y: f64, xi: f64, sigma: f64) -> f64 {
    -(xi / (sigma + xi * y)).ln_1p() / xi
}

/// First and second derivatives of log S(x) with respect to eta_k
/// (k = 0 for log xi, k = 1 for log sigma).
fn ln_surv_d(x: f64, xi: f64, sigma: f64, k: usize) -> (f64, f64) {
    let z = x / sigma;
    let u = 1.0 + xi * z;
    let zu = z / u;
    match k {
        0 => {
            let l = (xi * z).ln_1p();
            let d1 = l / xi - zu;
            let d2 = -d1 + xi * zu * zu;
            (d1, d2)
        }
        1 => (zu, -zu + xi * zu * zu),
        _ => unreachable!("DGP has two parameters"),
    }
}

impl Family for DiscreteGeneralizedPareto {
    fn name(&self) -> &'static str {
        "DGP"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["xi", "sigma"]
    }

    fn links(&self) -> &'static [Link] {
        &[Link::Log, Link::Log]
    }

    fn support(&self) -> Support {
        Support::Counts
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), FamilyError> {
        if !(theta[0].is_finite() && theta[0] > 0.0) {
            return Err(FamilyError::InvalidParameter {
                family: "DGP",
                name: "xi",
                value: theta[0],
            });
        }
        if !(theta[1].is_finite() && theta[1] > 0.0) {
            return Err(FamilyError::InvalidParameter {
                family: "DGP",
                name: "sigma",
                value: theta[1],
            });
        }
        Ok(())
    }

    fn check_y(&self, y: f64) -> Result<(), FamilyError> {
        if !(y.is_finite() && y >= 0.0 && y.fract() == 0.0) {
            return Err(FamilyError::OutsideSupport { family: "DGP", value: y });
        }
        Ok(())
    }

    fn logpdf(&self, y: f64, theta: &[f64]) -> f64 {
        let (xi, sigma) = (theta[0], theta[1]);
        let ly = ln_surv(y, xi, sigma);
        // log(S(y) - S(y+1)) without cancellation when both survivals are tiny.
        ly + (-ln_surv_step(y, xi, sigma).exp_m1()).ln()
    }

    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        let m = y.floor();
        -ln_surv(m + 1.0, theta[0], theta[1]).exp_m1()
    }

    fn score_eta(&self, y: f64, _eta: &[f64], theta: &[f64], k: usize) -> f64 {
        let (xi, sigma) = (theta[0], theta[1]);
        let r = ln_surv_step(y, xi, sigma).exp();
        let (d1a, _) = ln_surv_d(y, xi, sigma, k);
        let (d1b, _) = ln_surv_d(y + 1.0, xi, sigma, k);
        (d1a - r * d1b) / (1.0 - r)
    }

    fn weight_eta(&self, y: f64, eta: &[f64], theta: &[f64], k: usize) -> f64 {
        let (xi, sigma) = (theta[0], theta[1]);
        let r = ln_surv_step(y, xi, sigma).exp();
        let (d1a, d2a) = ln_surv_d(y, xi, sigma, k);
        let (d1b, d2b) = ln_surv_d(y + 1.0, xi, sigma, k);
        let u = self.score_eta(y, eta, theta, k);
        let second =
            ((d2a + d1a * d1a) - r * (d2b + d1b * d1b)) / (1.0 - r) - u * u;
        // Observed information; may go non-positive at individual points,
        // in which case the caller's floor takes over.
        -second
    }

    fn initial_theta(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len().max(1) as f64;
        let zeros = y.iter().filter(|v| **v == 0.0).count() as f64;
        let p0 = (zeros / n).clamp(0.01, 0.995);
        // With xi = 1, P(Y = 0) = 1/(1 + sigma).
        vec![1.0, (1.0 / p0 - 1.0).max(1e-3)]
    }

    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> f64 {
        let (xi, sigma) = (theta[0], theta[1]);
        let v: f64 = 1.0 - rng.random::<f64>();
        let x = sigma * (v.powf(-xi) - 1.0) / xi;
        x.floor()
    }
}
