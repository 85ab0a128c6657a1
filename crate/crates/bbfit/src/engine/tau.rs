//! Search routines for the per-term smoothing parameter, both operating on
//! s = ln(tau). Criterion values that are NaN are treated as +infinity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Golden-section scan of `f` over [lo, hi] with a fixed evaluation budget.
/// Returns the best evaluated point and its value; if every evaluation was
/// non-finite the returned value is +infinity.
pub(crate) fn golden_min<F: FnMut(f64) -> f64>(
    lo: f64,
    hi: f64,
    evals: usize,
    mut f: F,
) -> (f64, f64) {
    let clean = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = clean(f(x1));
    let mut f2 = clean(f(x2));
    let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    let mut used = 2;
    while used < evals {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = clean(f(x1));
            if f1 < best.1 {
                best = (x1, f1);
            }
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = clean(f(x2));
            if f2 < best.1 {
                best = (x2, f2);
            }
        }
        used += 1;
    }
    best
}

/// One slice-sampling transition for a log-density `lnf`, starting at `s0`
/// with ln-density `f0` there. Stepping out uses unit width with a bounded
/// number of expansions; shrinkage gives up after `MAX_SHRINK` rejections.
/// Returns None when no acceptable point was found (caller keeps `s0`).
pub(crate) fn slice_step<F: FnMut(f64) -> f64>(
    s0: f64,
    f0: f64,
    mut lnf: F,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Option<f64> {
    const WIDTH: f64 = 1.0;
    const MAX_EXPAND: usize = 10;
    const MAX_SHRINK: usize = 100;
    if !f0.is_finite() {
        return None;
    }
    let level = f0 + rng.random::<f64>().ln();
    let mut left = (s0 - WIDTH * rng.random::<f64>()).max(lo);
    let mut right = (left + WIDTH).min(hi);
    for _ in 0..MAX_EXPAND {
        if left <= lo || lnf(left) <= level {
            break;
        }
        left = (left - WIDTH).max(lo);
    }
    for _ in 0..MAX_EXPAND {
        if right >= hi || lnf(right) <= level {
            break;
        }
        right = (right + WIDTH).min(hi);
    }
    for _ in 0..MAX_SHRINK {
        let s1 = left + rng.random::<f64>() * (right - left);
        if lnf(s1) >= level {
            return Some(s1);
        }
        if s1 < s0 {
            left = s1;
        } else {
            right = s1;
        }
    }
    None
}
