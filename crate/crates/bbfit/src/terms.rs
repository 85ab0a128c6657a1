//! Model term building blocks: B-spline bases on equidistant knots,
//! difference penalties, tensor-product interactions, and the sum-to-zero
//! centering used to keep smooth terms identifiable next to an intercept.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TermError {
    #[error("need at least 2 interior knots, got {0}")]
    TooFewKnots(usize),
    #[error("knot range is degenerate: [{0}, {1}]")]
    DegenerateRange(f64, f64),
    #[error("difference order {order} must be positive and below basis size {size}")]
    BadPenaltyOrder { order: usize, size: usize },
    #[error("covariate value at row {0} is not finite")]
    NonFiniteCovariate(usize),
    #[error("tensor marginals have {0} and {1} rows; they must match")]
    TensorRowMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    Linear,
    PSpline,
    Tensor2d,
}

/// Declarative description of one additive model term.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub kind: TermKind,
    /// Covariate column names: empty for intercepts, one name for linear and
    /// univariate spline terms, two for tensor interactions.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Interior knot count per margin (endpoints included).
    #[serde(default = "TermSpec::default_knots")]
    pub n_knots: usize,
    #[serde(default = "TermSpec::default_degree")]
    pub degree: usize,
    #[serde(default = "TermSpec::default_penalty_order")]
    pub penalty_order: usize,
}

impl TermSpec {
    fn default_knots() -> usize {
        20
    }
    fn default_degree() -> usize {
        3
    }
    fn default_penalty_order() -> usize {
        2
    }

    pub fn intercept() -> Self {
        TermSpec {
            kind: TermKind::Intercept,
            covariates: vec![],
            n_knots: 0,
            degree: 0,
            penalty_order: 0,
        }
    }

    pub fn pspline(name: &str) -> Self {
        TermSpec {
            kind: TermKind::PSpline,
            covariates: vec![name.to_string()],
            n_knots: Self::default_knots(),
            degree: Self::default_degree(),
            penalty_order: Self::default_penalty_order(),
        }
    }

    pub fn linear(name: &str) -> Self {
        TermSpec {
            kind: TermKind::Linear,
            covariates: vec![name.to_string()],
            n_knots: 0,
            degree: 0,
            penalty_order: 0,
        }
    }

    pub fn tensor2d(a: &str, b: &str, n_knots: usize) -> Self {
        TermSpec {
            kind: TermKind::Tensor2d,
            covariates: vec![a.to_string(), b.to_string()],
            n_knots,
            degree: Self::default_degree(),
            penalty_order: Self::default_penalty_order(),
        }
    }

    /// A short display label like `s(x1)` or `te(lon,lat)`.
    pub fn label(&self) -> String {
        match self.kind {
            TermKind::Intercept => "intercept".to_string(),
            TermKind::Linear => format!("lin({})", self.covariates[0]),
            TermKind::PSpline => format!("s({})", self.covariates[0]),
            TermKind::Tensor2d => format!("te({},{})", self.covariates[0], self.covariates[1]),
        }
    }
}

/// Equidistant knot vector over [min, max]: `n_knots` interior knots with the
/// endpoints included, extended by `degree` extra knots on each side at the
/// same spacing. Length is n_knots + 2*degree, supporting
/// n_knots + degree - 1 basis functions.
pub fn build_knots(min: f64, max: f64, n_knots: usize, degree: usize) -> Result<Vec<f64>, TermError> {
    if n_knots < 2 {
        return Err(TermError::TooFewKnots(n_knots));
    }
    if !(min.is_finite() && max.is_finite() && max > min) {
        return Err(TermError::DegenerateRange(min, max));
    }
    let h = (max - min) / (n_knots - 1) as f64;
    let total = n_knots + 2 * degree;
    let mut knots = Vec::with_capacity(total);
    for i in 0..total {
        knots.push(min + (i as f64 - degree as f64) * h);
    }
    Ok(knots)
}

/// Number of B-spline basis functions for a knot vector and degree.
pub fn basis_size(knots: &[f64], degree: usize) -> usize {
    knots.len() - degree - 1
}

/// Evaluate all B-spline basis functions at `x` into `row` (length
/// `basis_size`). Values outside the interior span are clamped to the
/// boundary, so rows always sum to one.
pub fn bspline_row(x: f64, knots: &[f64], degree: usize, row: &mut [f64]) {
    let m = knots.len();
    let d = degree;
    let lo = knots[d];
    let hi = knots[m - 1 - d];
    let x = x.clamp(lo, hi);
    // Equidistant knots: locate the interval arithmetically.
    let h = knots[1] - knots[0];
    let mut i = d + (((x - lo) / h).floor() as isize).max(0) as usize;
    if i > m - d - 2 {
        i = m - d - 2;
    }
    // Guard against floating point landing just outside [t_i, t_{i+1}).
    while i > d && x < knots[i] {
        i -= 1;
    }
    while i < m - d - 2 && x >= knots[i + 1] {
        i += 1;
    }

    row.iter_mut().for_each(|v| *v = 0.0);
    let mut n = [0.0_f64; 8];
    let mut left = [0.0_f64; 8];
    let mut right = [0.0_f64; 8];
    assert!(d < 8, "degree {d} above supported maximum 7");
    n[0] = 1.0;
    for j in 1..=d {
        left[j] = x - knots[i + 1 - j];
        right[j] = knots[i + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    for (r, v) in n.iter().enumerate().take(d + 1) {
        row[i - d + r] = *v;
    }
}

/// Dense design matrix of the basis over a covariate column.
pub fn bspline_design(
    x: ArrayView1<f64>,
    knots: &[f64],
    degree: usize,
) -> Result<Array2<f64>, TermError> {
    let p = basis_size(knots, degree);
    let mut out = Array2::zeros((x.len(), p));
    for (i, &xi) in x.iter().enumerate() {
        if !xi.is_finite() {
            return Err(TermError::NonFiniteCovariate(i));
        }
        bspline_row(xi, knots, degree, out.row_mut(i).into_slice().unwrap());
    }
    Ok(out)
}

/// Difference penalty K = D'D where D takes `order`-th differences of the
/// coefficient vector. Its null space is spanned by polynomials in the
/// coefficient index of degree below `order`.
pub fn difference_penalty(p: usize, order: usize) -> Result<Array2<f64>, TermError> {
    if order == 0 || order >= p {
        return Err(TermError::BadPenaltyOrder { order, size: p });
    }
    // Rows of D are the alternating binomial stencil, e.g. [1, -2, 1].
    let mut stencil = vec![1.0_f64];
    for _ in 0..order {
        let mut next = vec![0.0; stencil.len() + 1];
        for (i, &c) in stencil.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c;
        }
        stencil = next;
    }
    let rows = p - order;
    let mut k = Array2::zeros((p, p));
    for r in 0..rows {
        for (a, &ca) in stencil.iter().enumerate() {
            for (b, &cb) in stencil.iter().enumerate() {
                k[[r + a, r + b]] += ca * cb;
            }
        }
    }
    Ok(k)
}

/// Row-wise Kronecker product of two marginal designs: row i of the result is
/// kron(a_i, b_i), matching the coefficient layout q = q1 * p2 + q2.
pub fn tensor_design(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>, TermError> {
    if a.nrows() != b.nrows() {
        return Err(TermError::TensorRowMismatch(a.nrows(), b.nrows()));
    }
    let (p1, p2) = (a.ncols(), b.ncols());
    let mut out = Array2::zeros((a.nrows(), p1 * p2));
    for i in 0..a.nrows() {
        for q1 in 0..p1 {
            let av = a[[i, q1]];
            if av == 0.0 {
                continue;
            }
            for q2 in 0..p2 {
                out[[i, q1 * p2 + q2]] = av * b[[i, q2]];
            }
        }
    }
    Ok(out)
}

/// Kronecker product of two square matrices, used for the two tensor penalty
/// components K1 (x) I and I (x) K2.
pub fn kron(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (ra, ca) = (a.nrows(), a.ncols());
    let (rb, cb) = (b.nrows(), b.ncols());
    let mut out = Array2::zeros((ra * rb, ca * cb));
    for i in 0..ra {
        for j in 0..ca {
            let av = a[[i, j]];
            if av == 0.0 {
                continue;
            }
            for k in 0..rb {
                for l in 0..cb {
                    out[[i * rb + k, j * cb + l]] = av * b[[k, l]];
                }
            }
        }
    }
    out
}

/// Identity matrix helper.
pub fn eye(p: usize) -> Array2<f64> {
    Array2::from_diag(&Array1::ones(p))
}

/// Column means of a design block.
pub fn column_means(design: ArrayView2<f64>) -> Vec<f64> {
    let n = design.nrows().max(1) as f64;
    design
        .columns()
        .into_iter()
        .map(|c| c.sum() / n)
        .collect()
}

/// Subtract fixed column means from a design, enforcing the sum-to-zero
/// constraint against the reference scan that produced the means. Means whose
/// magnitude is already at rounding level are treated as zero, which makes
/// centering idempotent.
pub fn apply_centering(design: &mut Array2<f64>, means: &[f64]) {
    let scale = design.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for (j, &mj) in means.iter().enumerate() {
        if mj.abs() <= 1e-15 * scale.max(1.0) {
            continue;
        }
        design.column_mut(j).mapv_inplace(|v| v - mj);
    }
}
