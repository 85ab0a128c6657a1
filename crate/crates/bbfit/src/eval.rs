//! Scoring: squared-error metrics for predictors and effects, the continuous
//! ranked probability score, selection error rates, and calibration
//! diagnostics (probability integral transform and worm-plot data).

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::families::{normal_quantile, Family, FamilyError, Support};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("score did not converge: {0}")]
    NoConvergence(String),
}

/// Mean squared difference between two vectors.
pub fn mse(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Mean squared difference after removing each curve's mean; levels are
/// absorbed by the intercept so effect comparisons ignore them.
pub fn mse_centered(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (x - ma) - (y - mb);
            d * d
        })
        .sum::<f64>()
        / n)
}

/// max - min of a fitted effect curve.
pub fn effect_range(f: ArrayView1<f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in f {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        0.0
    } else {
        hi - lo
    }
}

/// Fraction of the given effect ranges exceeding the threshold. Feed it the
/// ranges of noise terms for a false-positive rate, or of true terms for a
/// true-positive rate.
pub fn rate_above(ranges: &[f64], threshold: f64) -> f64 {
    if ranges.is_empty() {
        return 0.0;
    }
    ranges.iter().filter(|r| **r > threshold).count() as f64 / ranges.len() as f64
}

const QUAD_TAIL: f64 = 1e-9;
const COUNT_SWITCH: f64 = 1e-5;
const COUNT_TAIL: f64 = 1e-11;
const COUNT_INT_TOL: f64 = 1e-12;
const COUNT_CAP: u64 = 10_000_000;

fn simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson(f, a, fa, m, fm, flm, left, tol / 2.0, depth - 1)
            + simpson(f, m, fm, b, fb, frm, right, tol / 2.0, depth - 1)
    }
}

fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, fa, b, fb, fm, whole, tol, 60)
}

/// Expand from the observation until the cdf tails are below the clip level.
fn bracket(family: &dyn Family, theta: &[f64], y: f64, positive: bool) -> (f64, f64) {
    let mut step = 1.0;
    let mut lo = y;
    for _ in 0..200 {
        let candidate = if positive {
            (lo - step).max(0.0)
        } else {
            lo - step
        };
        lo = candidate;
        if family.cdf(lo, theta) <= QUAD_TAIL || (positive && lo == 0.0) {
            break;
        }
        step *= 2.0;
    }
    step = 1.0;
    let mut hi = y;
    for _ in 0..200 {
        hi += step;
        if family.cdf(hi, theta) >= 1.0 - QUAD_TAIL {
            break;
        }
        step *= 2.0;
    }
    (lo, hi)
}

/// Continuous ranked probability score for a single observation:
/// integral of (F(t) - step(t - y))^2.
pub fn crps(family: &dyn Family, theta: &[f64], y: f64) -> Result<f64, EvalError> {
    family.check_theta(theta)?;
    family.check_y(y)?;
    match family.support() {
        Support::Counts => crps_count(family, theta, y),
        support => {
            let positive = matches!(support, Support::Positive);
            let (lo, hi) = bracket(family, theta, y, positive);
            let below = |t: f64| {
                let f = family.cdf(t, theta);
                f * f
            };
            let above = |t: f64| {
                let f = 1.0 - family.cdf(t, theta);
                f * f
            };
            Ok(integrate(&below, lo, y, 1e-10) + integrate(&above, y, hi, 1e-10))
        }
    }
}

/// Count-support score: sum over the support, truncated once past the
/// observation when either the tail mass or the remaining contribution
/// bound drops below fixed cutoffs.
fn crps_count(family: &dyn Family, theta: &[f64], y: f64) -> Result<f64, EvalError> {
    let mut total = 0.0;
    let mut t = 0u64;
    loop {
        let tf = t as f64;
        let f = family.cdf(tf, theta);
        let step = if tf >= y { 1.0 } else { 0.0 };
        let d = f - step;
        total += d * d;
        let tail = 1.0 - f;
        if tf > y && tail <= COUNT_SWITCH {
            return Ok(total + count_tail_integral(family, theta, tf + 0.5));
        }
        t += 1;
        if t > COUNT_CAP {
            return Err(EvalError::NoConvergence(format!(
                "count score for y={y} still has tail {tail:.3e} after {COUNT_CAP} terms"
            )));
        }
    }
}

/// Remainder of the squared-survival series past `from`, estimated as the
/// midpoint integral of (1 - F)^2. Heavy polynomial tails would need ~1e9
/// summed terms to reach truncation error 1e-9; the integral form gets there
/// with error about (1 - F(from))^2 / 2 instead.
fn count_tail_integral(family: &dyn Family, theta: &[f64], from: f64) -> f64 {
    let surv2 = |t: f64| {
        let s = 1.0 - family.cdf(t, theta);
        s * s
    };
    let mut hi = from;
    let mut step = 1.0;
    for _ in 0..1100 {
        let candidate = hi + step;
        if !candidate.is_finite() {
            break;
        }
        hi = candidate;
        let s = 1.0 - family.cdf(hi, theta);
        if s <= COUNT_TAIL && s * s * hi <= COUNT_INT_TOL {
            break;
        }
        step *= 2.0;
    }
    integrate(&surv2, from, hi, COUNT_INT_TOL)
}

/// Mean score over a set of observations with per-row parameters.
pub fn crps_mean(
    family: &dyn Family,
    theta: ArrayView2<f64>,
    y: ArrayView1<f64>,
) -> Result<f64, EvalError> {
    if theta.nrows() != y.len() {
        return Err(EvalError::LengthMismatch(theta.nrows(), y.len()));
    }
    let mut total = 0.0;
    let mut buf = [0.0f64; 4];
    let kk = theta.ncols();
    for i in 0..y.len() {
        for m in 0..kk {
            buf[m] = theta[[i, m]];
        }
        total += crps(family, &buf[..kk], y[i])?;
    }
    Ok(total / y.len() as f64)
}

/// Probability integral transform values. Continuous families use F(y)
/// directly; discrete support draws uniformly from [F(y-1), F(y)] so the
/// result is uniform under the true model.
pub fn pit_values(
    family: &dyn Family,
    theta: ArrayView2<f64>,
    y: ArrayView1<f64>,
    seed: u64,
) -> Result<Array1<f64>, EvalError> {
    if theta.nrows() != y.len() {
        return Err(EvalError::LengthMismatch(theta.nrows(), y.len()));
    }
    let discrete = matches!(family.support(), Support::Counts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kk = theta.ncols();
    let mut buf = [0.0f64; 4];
    let mut out = Array1::zeros(y.len());
    for i in 0..y.len() {
        for m in 0..kk {
            buf[m] = theta[[i, m]];
        }
        family.check_theta(&buf[..kk])?;
        family.check_y(y[i])?;
        let hi = family.cdf(y[i], &buf[..kk]);
        let u = if discrete {
            let lo = if y[i] >= 1.0 {
                family.cdf(y[i] - 1.0, &buf[..kk])
            } else {
                0.0
            };
            lo + rng.random::<f64>() * (hi - lo)
        } else {
            hi
        };
        out[i] = u.clamp(1e-12, 1.0 - 1e-12);
    }
    Ok(out)
}

/// Histogram counts of PIT values over equal-width bins on [0, 1].
pub fn pit_histogram(pit: ArrayView1<f64>, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins.max(1)];
    let b = bins.max(1) as f64;
    for &u in pit {
        let idx = ((u * b) as usize).min(counts.len() - 1);
        counts[idx] += 1;
    }
    counts
}

/// Worm-plot data: sorted normalized residuals against their expected
/// normal order statistics, reported as (expected, observed - expected).
pub fn worm_data(pit: ArrayView1<f64>) -> Vec<(f64, f64)> {
    let mut residuals: Vec<f64> = pit.iter().map(|&u| normal_quantile(u)).collect();
    residuals.sort_by(|a, b| a.partial_cmp(b).expect("residuals are finite"));
    let n = residuals.len();
    residuals
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let q = normal_quantile((i as f64 + 0.5) / n as f64);
            (q, r - q)
        })
        .collect()
}

/// Bundled scores for one fitted model on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-parameter predictor mean squared error (only when truth known).
    pub mse_predictor: Vec<f64>,
    /// Per-term effect mean squared error, labelled.
    pub mse_effect: Vec<(String, f64)>,
    pub crps: f64,
    /// Per-parameter share of noise terms with effect range above threshold.
    pub fp_rate: Vec<f64>,
    /// Per-parameter share of true terms with effect range above threshold.
    pub tp_rate: Vec<f64>,
    pub pit_bins: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{by_name, normal_cdf};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    /// Closed form for the Gaussian score.
    fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
        let z = (y - mu) / sigma;
        sigma
            * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * (-0.5 * z * z).exp()
                / (2.0 * std::f64::consts::PI).sqrt()
                - 1.0 / std::f64::consts::PI.sqrt())
    }

    #[test]
    fn mse_basics() {
        let a = array![1.0, 2.0, 3.0];
        assert_eq!(mse(a.view(), a.view()).unwrap(), 0.0);
        let b = array![2.0, 3.0, 4.0];
        assert_eq!(mse(a.view(), b.view()).unwrap(), 1.0);
        assert!(mse(a.view(), array![1.0].view()).is_err());
        // Against a naive two-pass oracle.
        let x = array![0.3, -1.2, 2.2, 0.05, -0.7];
        let y = array![0.1, -1.0, 2.0, 0.00, -0.9];
        let mut acc = 0.0;
        for i in 0..x.len() {
            acc += (x[i] - y[i]) * (x[i] - y[i]);
        }
        assert!((mse(x.view(), y.view()).unwrap() - acc / 5.0).abs() < 1e-12);
    }

    #[test]
    fn centered_mse_ignores_levels() {
        let a = array![1.0, 2.0, 3.0, 4.0];
        let shifted = array![11.0, 12.0, 13.0, 14.0];
        assert!(mse_centered(a.view(), shifted.view()).unwrap() < 1e-28);
        // Against zero, the centered error is the variance.
        let z = Array1::zeros(4);
        let m = 2.5;
        let var = a.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
        assert!((mse_centered(a.view(), z.view()).unwrap() - var).abs() < 1e-12);
    }

    #[test]
    fn gaussian_crps_matches_closed_form() {
        let family = by_name("NO").unwrap();
        assert!(
            (gaussian_crps(0.0, 1.0, 0.0) - 0.23369497725510528).abs() < 1e-10,
            "frozen closed-form value at the origin"
        );
        for (mu, sigma, y) in [
            (0.0, 1.0, 0.0),
            (0.0, 1.0, 1.7),
            (-2.0, 0.5, -1.0),
            (3.0, 4.0, -6.0),
            (0.0, 0.05, 0.02),
        ] {
            let got = crps(family.as_ref(), &[mu, sigma], y).unwrap();
            let want = gaussian_crps(mu, sigma, y);
            assert!(
                (got - want).abs() < 1e-7,
                "crps({mu},{sigma},{y}) = {got}, closed form {want}"
            );
        }
    }

    #[test]
    fn sharp_forecast_scores_near_zero() {
        let family = by_name("NO").unwrap();
        let got = crps(family.as_ref(), &[1.0, 1e-6], 1.0).unwrap();
        assert!(got >= 0.0 && got < 1e-5, "got {got}");
    }

    #[test]
    fn count_crps_matches_brute_force() {
        let family = by_name("ZAP").unwrap();
        for (mu, sigma, y) in [(1.5, 0.3, 0.0), (2.0, 0.1, 3.0), (0.8, 0.6, 1.0)] {
            let got = crps(family.as_ref(), &[mu, sigma], y).unwrap();
            let mut brute = 0.0;
            for t in 0..5000 {
                let tf = t as f64;
                let f = family.cdf(tf, &[mu, sigma]);
                let step = if tf >= y { 1.0 } else { 0.0 };
                brute += (f - step) * (f - step);
            }
            assert!(
                (got - brute).abs() < 1e-9,
                "crps({mu},{sigma},{y}) = {got}, brute force {brute}"
            );
        }
    }

    #[test]
    fn heavy_tail_count_crps_matches_polygamma_closed_form() {
        // Tail index 1: 1 - F(t) = sigma / (sigma + t + 1), so the score is
        // F(0)^2 + F(1)^2 + sigma^2 * psi'(y + 1 + sigma) at y = 2. Plain
        // summation of this tail would need about 1e9 terms for 1e-9 accuracy.
        let family = by_name("DGP").unwrap();
        let got = crps(family.as_ref(), &[1.0, 0.5], 2.0).unwrap();
        let exact = 4.0 / 9.0 + 0.64 + 0.25 * crate::families::trigamma(3.5);
        assert_abs_diff_eq!(got, exact, epsilon = 1e-8);
    }

    #[test]
    fn rates_and_ranges() {
        assert_eq!(effect_range(array![0.0, 0.0].view()), 0.0);
        assert_eq!(effect_range(array![-0.1, 0.1].view()), 0.2);
        assert_eq!(rate_above(&[0.0, 0.2], 0.1), 0.5);
        assert_eq!(rate_above(&[], 0.1), 0.0);
        // Nonincreasing in the threshold.
        let ranges = [0.001, 0.05, 0.09, 0.11, 0.2, 0.31];
        let mut last = f64::INFINITY;
        let mut thr = 1e-4;
        while thr <= 0.3 {
            let r = rate_above(&ranges, thr);
            assert!(r <= last);
            last = r;
            thr *= 1.5;
        }
    }

    #[test]
    fn continuous_pit_is_plain_cdf() {
        let family = by_name("NO").unwrap();
        let y = array![0.0, 1.0, -0.5];
        let theta = Array2::from_shape_vec((3, 2), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let pit = pit_values(family.as_ref(), theta.view(), y.view(), 1).unwrap();
        for (i, &u) in pit.iter().enumerate() {
            let want = family.cdf(y[i], &[0.0, 1.0]);
            assert!((u - want).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_pit_is_uniform_under_the_truth() {
        let family = by_name("ZAP").unwrap();
        let n = 40_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta_row = [1.8, 0.3];
        let mut y = Array1::zeros(n);
        let mut theta = Array2::zeros((n, 2));
        for i in 0..n {
            y[i] = family.sample(&theta_row, &mut rng);
            theta[[i, 0]] = theta_row[0];
            theta[[i, 1]] = theta_row[1];
        }
        let pit = pit_values(family.as_ref(), theta.view(), y.view(), 17).unwrap();
        let mean = pit.sum() / n as f64;
        let var = pit.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.005, "var {var}");
        let bins = pit_histogram(pit.view(), 10);
        let expect = n as f64 / 10.0;
        let slack = 3.0 * (n as f64 * 0.1 * 0.9).sqrt();
        for (b, count) in bins.iter().enumerate() {
            assert!(
                (*count as f64 - expect).abs() < slack,
                "bin {b} count {count} outside {expect} +- {slack}"
            );
        }
    }

    #[test]
    fn worm_data_is_flat_for_perfect_calibration() {
        // Exactly uniform PIT values give residuals equal to their expected
        // order statistics.
        let n = 1000;
        let pit = Array1::from_shape_fn(n, |i| (i as f64 + 0.5) / n as f64);
        let worm = worm_data(pit.view());
        assert_eq!(worm.len(), n);
        for (q, d) in &worm {
            assert!(q.is_finite());
            assert!(d.abs() < 1e-9, "deviation {d} at {q}");
        }
    }
}
