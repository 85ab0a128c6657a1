//! The batchwise fitting loop. Each iteration works on a pair of batches:
//! updates are computed on the current batch with a step-length damped
//! penalized least squares step per term, while smoothing parameters and the
//! accept decision are judged out of sample on the following batch.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{ColumnStore, StoreError};
use crate::families::{self, Family, FamilyError, Link, WEIGHT_FLOOR};
use crate::linalg::SpdFactor;
use crate::model::{ModelError, PreparedModel};
use crate::terms::{TermError, TermKind};

mod tau;
use tau::{golden_min, slice_step};

/// Smoothing parameters are confined to this range.
pub const TAU_MIN: f64 = 1e-10;
pub const TAU_MAX: f64 = 1e10;
/// Every term starts from this smoothing parameter.
pub const DEFAULT_INITIAL_TAU: f64 = 1e-3;
/// The search interval around the current value spans a factor of 10 down
/// and up, scanned with this evaluation budget.
const TAU_WINDOW: f64 = 10.0;
const TAU_EVALS: usize = 20;
/// Coefficients beyond this magnitude trigger the divergence guard.
const BETA_LIMIT: f64 = 1e6;
/// The run aborts when more than half of all iterations failed numerically,
/// checked once at least this many iterations have run.
const MIN_ITERS_FOR_ABORT: usize = 20;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Term(#[from] TermError),
    #[error("need at least 2 batches, got {0}")]
    NeedTwoBatches(usize),
    #[error("invalid option: {0}")]
    BadOption(String),
    #[error("aborted at iteration {iteration}: {nonfinite} of {iteration} iterations failed numerically")]
    Diverged { iteration: usize, nonfinite: usize },
}

/// How term updates are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Update every term each iteration, applying each accepted update
    /// immediately within the sweep.
    Plain,
    /// Greedy selection: all terms compete at their current smoothing
    /// parameter against the common state, only the best one is updated.
    Boost,
    /// Undamped updates with sampled smoothing parameters; the final
    /// coefficients average the kept part of the path.
    Resample,
}

/// What the smoothing parameter search and model comparison minimize,
/// always evaluated on the out-of-sample batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Aic,
    Bic,
    Loglik,
}

impl Criterion {
    fn value(self, ll: f64, edf: f64, n: usize) -> f64 {
        match self {
            Criterion::Aic => -2.0 * ll + 2.0 * edf,
            Criterion::Bic => -2.0 * ll + (n as f64).ln() * edf,
            Criterion::Loglik => -ll,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub policy: Policy,
    /// Step length applied to every accepted update (resampling forces 1).
    pub nu: f64,
    pub criterion: Criterion,
    /// Minimum relative out-of-sample log-likelihood improvement an update
    /// must deliver. Default: 1e-4 under boosting, unbounded otherwise.
    pub eps_improve: Option<f64>,
    /// Sample the smoothing parameter instead of searching it.
    /// Default: true under resampling, false otherwise.
    pub slice: Option<bool>,
    /// Keep every smoothing parameter at its initial value.
    pub fix_tau: bool,
    pub initial_tau: f64,
    /// Resampling: iterations discarded before averaging (default half).
    pub burn_in: Option<usize>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            policy: Policy::Plain,
            nu: 0.1,
            criterion: Criterion::Aic,
            eps_improve: None,
            slice: None,
            fix_tau: false,
            initial_tau: DEFAULT_INITIAL_TAU,
            burn_in: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitStats {
    pub iterations: usize,
    pub updates_accepted: usize,
    pub updates_rejected: usize,
    pub nonfinite_iterations: usize,
    /// Peak bytes held in batch design matrices and per-term scratch.
    pub design_bytes_peak: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub labels: Vec<Vec<String>>,
    pub final_betas: Vec<Vec<Array1<f64>>>,
    pub final_taus: Vec<Vec<f64>>,
    /// Coefficient state after each iteration, indexed [iter][param][term].
    pub beta_path: Vec<Vec<Vec<Array1<f64>>>>,
    pub tau_path: Vec<Vec<Vec<f64>>>,
    /// Per iteration, the (param, term) pairs whose coefficients changed.
    pub selected: Vec<Vec<(usize, usize)>>,
    /// Out-of-sample log-likelihood after each iteration's updates.
    pub loglik_path: Vec<f64>,
    pub stats: FitStats,
}

impl FitResult {
    /// Fraction of iterations in which each term was updated.
    pub fn selection_frequency(&self) -> Vec<Vec<f64>> {
        let t = self.selected.len().max(1) as f64;
        let mut freq: Vec<Vec<f64>> = self
            .final_betas
            .iter()
            .map(|terms| vec![0.0; terms.len()])
            .collect();
        for iter in &self.selected {
            for &(k, j) in iter {
                freq[k][j] += 1.0 / t;
            }
        }
        freq
    }
}

struct BatchData {
    y: Array1<f64>,
    designs: Vec<Array2<f64>>,
    bytes: usize,
}

fn load_batch(
    model: &PreparedModel,
    store: &ColumnStore,
    cols: &[usize],
    ids: &[u32],
) -> Result<BatchData, EngineError> {
    let block = store.read_batch(ids, cols)?;
    let y = block.column(0).to_owned();
    let x = block.slice(s![.., 1..]);
    let designs = model.eval_designs(&x)?;
    let bytes = designs.iter().map(|d| d.len() * 8).sum::<usize>() + y.len() * 8;
    Ok(BatchData { y, designs, bytes })
}

fn compute_eta(
    model: &PreparedModel,
    batch: &BatchData,
    betas: &[Vec<Array1<f64>>],
) -> Array2<f64> {
    let n = batch.y.len();
    let mut eta = Array2::zeros((n, model.n_params()));
    for (k, terms) in model.params.iter().enumerate() {
        for (j, term) in terms.iter().enumerate() {
            let contrib = batch.designs[term.design_id].dot(&betas[k][j]);
            let mut col = eta.column_mut(k);
            col += &contrib;
        }
    }
    eta
}

fn theta_matrix(links: &[Link], eta: &Array2<f64>) -> Array2<f64> {
    let mut theta = eta.clone();
    for (k, link) in links.iter().enumerate() {
        for v in theta.column_mut(k).iter_mut() {
            *v = link.inverse(*v);
        }
    }
    theta
}

fn loglik_theta(family: &dyn Family, y: &Array1<f64>, theta: &Array2<f64>) -> f64 {
    let k = theta.ncols();
    let mut buf = [0.0f64; 4];
    let mut total = 0.0;
    for i in 0..y.len() {
        for m in 0..k {
            buf[m] = theta[[i, m]];
        }
        total += family.logpdf(y[i], &buf[..k]);
    }
    if total.is_finite() {
        total
    } else {
        f64::NAN
    }
}

/// Score and working weights for one parameter at the current state.
/// Returns None when any score is non-finite.
fn score_weights(
    family: &dyn Family,
    y: &Array1<f64>,
    eta: &Array2<f64>,
    theta: &Array2<f64>,
    k: usize,
) -> Option<(Array1<f64>, Array1<f64>)> {
    let n = y.len();
    let kk = theta.ncols();
    let mut u = Array1::zeros(n);
    let mut w = Array1::zeros(n);
    let mut eta_buf = [0.0f64; 4];
    let mut theta_buf = [0.0f64; 4];
    for i in 0..n {
        for m in 0..kk {
            eta_buf[m] = eta[[i, m]];
            theta_buf[m] = theta[[i, m]];
        }
        let ui = family.score_eta(y[i], &eta_buf[..kk], &theta_buf[..kk], k);
        let wi = family.weight_eta(y[i], &eta_buf[..kk], &theta_buf[..kk], k);
        if !ui.is_finite() {
            return None;
        }
        u[i] = ui;
        w[i] = if wi.is_finite() {
            wi.max(WEIGHT_FLOOR)
        } else {
            WEIGHT_FLOOR
        };
    }
    Some((u, w))
}

pub(crate) fn penalized_factor(
    g: &Array2<f64>,
    penalty: &Array2<f64>,
    tau: f64,
    kappa: f64,
) -> Option<SpdFactor> {
    let mut a = penalty.mapv(|v| v * tau);
    a += g;
    if kappa > 0.0 {
        // Rank-one shift kappa * ones puts the constant direction, shared by
        // the centered design and the penalty null space, out of the kernel.
        a += kappa;
    }
    SpdFactor::new(a.view()).ok()
}

/// Relative out-of-sample improvement acceptance rule; NaN never passes.
pub(crate) fn accepts(ll_new: f64, ll_old: f64, eps: f64) -> bool {
    if !ll_new.is_finite() || !ll_old.is_finite() {
        return false;
    }
    let rel = (ll_new - ll_old) / ll_old.abs().max(1e-12);
    rel > eps
}

#[derive(Debug, Clone)]
struct Proposal {
    tau: f64,
    /// Raw penalized least squares solution.
    b: Array1<f64>,
    /// Step-length blended coefficients.
    beta: Array1<f64>,
    ll: f64,
    edf: f64,
    crit: f64,
}

/// Everything needed to propose updates for one term in one iteration.
struct TermUpdate<'a> {
    family: &'a dyn Family,
    links: &'a [Link],
    criterion: Criterion,
    nu: f64,
    k: usize,
    beta_old: Array1<f64>,
    design_next: &'a Array2<f64>,
    penalty: &'a Array2<f64>,
    unpenalized: bool,
    y_next: &'a Array1<f64>,
    theta_next: &'a Array2<f64>,
    eta_next_k: Array1<f64>,
    g: Array2<f64>,
    c: Array1<f64>,
    kappa: f64,
    temp_bytes: usize,
}

impl<'a> TermUpdate<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        family: &'a dyn Family,
        criterion: Criterion,
        nu: f64,
        k: usize,
        beta_old: Array1<f64>,
        design_cur: &Array2<f64>,
        design_next: &'a Array2<f64>,
        penalty: &'a Array2<f64>,
        gauge: bool,
        u: &Array1<f64>,
        w: &Array1<f64>,
        y_next: &'a Array1<f64>,
        eta_next: &Array2<f64>,
        theta_next: &'a Array2<f64>,
    ) -> Self {
        let p = design_cur.ncols();
        let mut wd = design_cur.to_owned();
        for (mut row, &wi) in wd.axis_iter_mut(Axis(0)).zip(w.iter()) {
            row *= wi;
        }
        let g = design_cur.t().dot(&wd);
        // Working residual for this term: score step plus own contribution.
        let mut r = design_cur.dot(&beta_old);
        for i in 0..r.len() {
            r[i] += u[i] / w[i];
        }
        let c = wd.t().dot(&r);
        let kappa = if gauge {
            (g.diag().sum() / p as f64).max(1e-12)
        } else {
            0.0
        };
        let unpenalized = penalty.iter().all(|v| *v == 0.0);
        let temp_bytes = wd.len() * 8 + theta_next.len() * 8 + 2 * y_next.len() * 8;
        TermUpdate {
            family,
            links: family.links(),
            criterion,
            nu,
            k,
            beta_old,
            design_next,
            penalty,
            unpenalized,
            y_next,
            theta_next,
            eta_next_k: eta_next.column(k).to_owned(),
            g,
            c,
            kappa,
            temp_bytes,
        }
    }

    /// Out-of-sample log-likelihood with this term's coefficients replaced.
    fn candidate_ll(&self, beta: &Array1<f64>) -> f64 {
        let delta = beta - &self.beta_old;
        let d_eta = self.design_next.dot(&delta);
        let kk = self.theta_next.ncols();
        let mut buf = [0.0f64; 4];
        let mut total = 0.0;
        for i in 0..self.y_next.len() {
            for m in 0..kk {
                buf[m] = self.theta_next[[i, m]];
            }
            buf[self.k] = self.links[self.k].inverse(self.eta_next_k[i] + d_eta[i]);
            total += self.family.logpdf(self.y_next[i], &buf[..kk]);
        }
        if total.is_finite() {
            total
        } else {
            f64::NAN
        }
    }

    fn eval_tau(&self, tau: f64) -> Option<Proposal> {
        let factor = penalized_factor(&self.g, self.penalty, tau, self.kappa)?;
        let b = factor.solve(self.c.view());
        if b.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let edf = factor.trace_solve(self.g.view());
        let beta = &self.beta_old + &((&b - &self.beta_old) * self.nu);
        let ll = self.candidate_ll(&beta);
        let crit = if ll.is_finite() {
            self.criterion.value(ll, edf, self.y_next.len())
        } else {
            f64::NAN
        };
        Some(Proposal {
            tau,
            b,
            beta,
            ll,
            edf,
            crit,
        })
    }

    /// Pick the smoothing parameter for this update. Scans (or samples)
    /// around the current value; falls back to the current value whenever
    /// the search produces nothing usable.
    fn search_tau(
        &self,
        tau_old: f64,
        fix: bool,
        use_slice: bool,
        rng: &mut ChaCha8Rng,
    ) -> Option<Proposal> {
        if fix || self.unpenalized {
            return self.eval_tau(tau_old);
        }
        let (s_lo, s_hi) = (TAU_MIN.ln(), TAU_MAX.ln());
        if use_slice {
            let base = self.eval_tau(tau_old)?;
            let s0 = tau_old.clamp(TAU_MIN, TAU_MAX).ln();
            let lnf = |s: f64| match self.eval_tau(s.exp()) {
                Some(p) if p.crit.is_finite() => -p.crit / 2.0,
                _ => f64::NEG_INFINITY,
            };
            match slice_step(s0, -base.crit / 2.0, lnf, s_lo, s_hi, rng) {
                Some(s1) => self.eval_tau(s1.exp()).or(Some(base)),
                None => Some(base),
            }
        } else {
            let lo = (tau_old / TAU_WINDOW).clamp(TAU_MIN, TAU_MAX).ln();
            let hi = (tau_old * TAU_WINDOW).clamp(TAU_MIN, TAU_MAX).ln();
            let (s_best, crit_best) = golden_min(lo, hi, TAU_EVALS, |s| {
                self.eval_tau(s.exp()).map_or(f64::INFINITY, |p| p.crit)
            });
            if crit_best.is_finite() {
                self.eval_tau(s_best.exp())
            } else {
                self.eval_tau(tau_old)
            }
        }
    }

    /// Divergence guard: huge blended coefficients get one retry at half the
    /// step length, then the update is dropped.
    fn guard(&self, prop: Proposal) -> Option<Proposal> {
        if prop.beta.iter().all(|v| v.abs() <= BETA_LIMIT) {
            return Some(prop);
        }
        let beta = &self.beta_old + &((&prop.b - &self.beta_old) * (self.nu / 2.0));
        if beta.iter().any(|v| v.abs() > BETA_LIMIT) {
            return None;
        }
        let ll = self.candidate_ll(&beta);
        let crit = if ll.is_finite() {
            self.criterion.value(ll, prop.edf, self.y_next.len())
        } else {
            f64::NAN
        };
        Some(Proposal {
            beta,
            ll,
            crit,
            ..prop
        })
    }
}

struct IterationState {
    betas: Vec<Vec<Array1<f64>>>,
    taus: Vec<Vec<f64>>,
    eta_cur: Array2<f64>,
    theta_cur: Array2<f64>,
    eta_next: Array2<f64>,
    theta_next: Array2<f64>,
    ll_next: f64,
}

impl IterationState {
    /// Apply an accepted update to the coefficients and both batch states.
    fn apply(
        &mut self,
        links: &[Link],
        k: usize,
        j: usize,
        prop: &Proposal,
        design_cur: &Array2<f64>,
        design_next: &Array2<f64>,
    ) {
        let delta = &prop.beta - &self.betas[k][j];
        let d_cur = design_cur.dot(&delta);
        let d_next = design_next.dot(&delta);
        {
            let mut col = self.eta_cur.column_mut(k);
            col += &d_cur;
        }
        {
            let mut col = self.eta_next.column_mut(k);
            col += &d_next;
        }
        for i in 0..self.theta_cur.nrows() {
            self.theta_cur[[i, k]] = links[k].inverse(self.eta_cur[[i, k]]);
        }
        for i in 0..self.theta_next.nrows() {
            self.theta_next[[i, k]] = links[k].inverse(self.eta_next[[i, k]]);
        }
        self.betas[k][j] = prop.beta.clone();
        self.taus[k][j] = prop.tau;
        self.ll_next = prop.ll;
    }
}

pub fn fit(
    model: &PreparedModel,
    store: &ColumnStore,
    batches: &[Vec<u32>],
    opts: &FitOptions,
) -> Result<FitResult, EngineError> {
    if batches.len() < 2 {
        return Err(EngineError::NeedTwoBatches(batches.len()));
    }
    if !(opts.nu > 0.0 && opts.nu <= 1.0) {
        return Err(EngineError::BadOption(format!(
            "step length must be in (0, 1], got {}",
            opts.nu
        )));
    }
    if !(opts.initial_tau > 0.0 && opts.initial_tau.is_finite()) {
        return Err(EngineError::BadOption(format!(
            "initial smoothing parameter must be positive, got {}",
            opts.initial_tau
        )));
    }
    let family = families::by_name(&model.family)?;
    let family = family.as_ref();
    let links = family.links();
    let resample = matches!(opts.policy, Policy::Resample);
    let nu = if resample { 1.0 } else { opts.nu };
    let eps = opts.eps_improve.unwrap_or(match opts.policy {
        Policy::Boost => 1e-4,
        _ => f64::NEG_INFINITY,
    });
    let use_slice = opts.slice.unwrap_or(resample);
    let t_iters = batches.len() - 1;
    let burn_in = opts.burn_in.unwrap_or(t_iters / 2).min(t_iters - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cols = model.gather_columns(store)?;

    // Zero coefficients everywhere, except intercepts which start from a
    // moment match on the first batch, mapped through the link.
    let mut betas: Vec<Vec<Array1<f64>>> = model
        .params
        .iter()
        .map(|terms| terms.iter().map(|t| Array1::zeros(t.p)).collect())
        .collect();
    let mut taus: Vec<Vec<f64>> =
        model.params.iter().map(|t| vec![opts.initial_tau; t.len()]).collect();
    let first = load_batch(model, store, &cols, &batches[0])?;
    let theta0 = family.initial_theta(first.y.as_slice().expect("contiguous"));
    // The moment match is itself a data-driven coefficient update, so the
    // selection record must show it (selected_jk tracks every beta change);
    // it is attributed to iteration 0.
    let mut init_selected: Vec<(usize, usize)> = Vec::new();
    for (k, terms) in model.params.iter().enumerate() {
        if let Some(j) = terms.iter().position(|t| t.spec.kind == TermKind::Intercept) {
            betas[k][j][0] = links[k].apply(theta0[k]);
            if betas[k][j][0] != 0.0 {
                init_selected.push((k, j));
            }
        }
    }

    let mut result = FitResult {
        labels: model
            .params
            .iter()
            .map(|terms| terms.iter().map(|t| t.label.clone()).collect())
            .collect(),
        final_betas: Vec::new(),
        final_taus: Vec::new(),
        beta_path: Vec::with_capacity(t_iters),
        tau_path: Vec::with_capacity(t_iters),
        selected: Vec::with_capacity(t_iters),
        loglik_path: Vec::with_capacity(t_iters),
        stats: FitStats::default(),
    };

    let mut carry = Some(first);
    for t in 0..t_iters {
        let cur = carry.take().expect("carried batch");
        let next = load_batch(model, store, &cols, &batches[t + 1])?;
        let eta_cur = compute_eta(model, &cur, &betas);
        let eta_next = compute_eta(model, &next, &betas);
        let theta_cur = theta_matrix(links, &eta_cur);
        let theta_next = theta_matrix(links, &eta_next);
        let ll_next = loglik_theta(family, &next.y, &theta_next);
        let mut state = IterationState {
            betas,
            taus,
            eta_cur,
            theta_cur,
            eta_next,
            theta_next,
            ll_next,
        };
        let mut iter_nonfinite = false;
        let mut iter_selected: Vec<(usize, usize)> = std::mem::take(&mut init_selected);
        let mut temp_peak = 0usize;

        match opts.policy {
            Policy::Plain | Policy::Resample => {
                for k in 0..model.n_params() {
                    for j in 0..model.params[k].len() {
                        let term = &model.params[k][j];
                        let uw = score_weights(family, &cur.y, &state.eta_cur, &state.theta_cur, k);
                        let Some((u, w)) = uw else {
                            iter_nonfinite = true;
                            result.stats.updates_rejected += 1;
                            continue;
                        };
                        let outcome = {
                            let ctx = TermUpdate::new(
                                family,
                                opts.criterion,
                                nu,
                                k,
                                state.betas[k][j].clone(),
                                &cur.designs[term.design_id],
                                &next.designs[term.design_id],
                                &term.penalty,
                                term.gauge,
                                &u,
                                &w,
                                &next.y,
                                &state.eta_next,
                                &state.theta_next,
                            );
                            temp_peak = temp_peak.max(ctx.temp_bytes);
                            ctx.search_tau(state.taus[k][j], opts.fix_tau, use_slice, &mut rng)
                                .and_then(|p| ctx.guard(p))
                        };
                        match outcome {
                            Some(prop) if accepts(prop.ll, state.ll_next, eps) => {
                                let changed = prop.beta != state.betas[k][j];
                                state.apply(
                                    links,
                                    k,
                                    j,
                                    &prop,
                                    &cur.designs[term.design_id],
                                    &next.designs[term.design_id],
                                );
                                result.stats.updates_accepted += 1;
                                if changed {
                                    iter_selected.push((k, j));
                                }
                            }
                            Some(prop) => {
                                result.stats.updates_rejected += 1;
                                if !prop.ll.is_finite() {
                                    iter_nonfinite = true;
                                }
                            }
                            None => {
                                result.stats.updates_rejected += 1;
                                iter_nonfinite = true;
                            }
                        }
                    }
                }
            }
            Policy::Boost => {
                // All candidates are judged against the same base state at
                // their current smoothing parameter; only the winner gets a
                // smoothing parameter search and an actual update.
                let mut uws: Vec<Option<(Array1<f64>, Array1<f64>)>> = Vec::new();
                for k in 0..model.n_params() {
                    let uw = score_weights(family, &cur.y, &state.eta_cur, &state.theta_cur, k);
                    if uw.is_none() {
                        iter_nonfinite = true;
                    }
                    uws.push(uw);
                }
                let mut any_candidate = false;
                let mut best: Option<(usize, usize, f64)> = None;
                for k in 0..model.n_params() {
                    let Some((u, w)) = &uws[k] else { continue };
                    for j in 0..model.params[k].len() {
                        let term = &model.params[k][j];
                        let ctx = TermUpdate::new(
                            family,
                            opts.criterion,
                            nu,
                            k,
                            state.betas[k][j].clone(),
                            &cur.designs[term.design_id],
                            &next.designs[term.design_id],
                            &term.penalty,
                            term.gauge,
                            u,
                            w,
                            &next.y,
                            &state.eta_next,
                            &state.theta_next,
                        );
                        temp_peak = temp_peak.max(ctx.temp_bytes);
                        if let Some(p) = ctx.eval_tau(state.taus[k][j]) {
                            if p.crit.is_finite() {
                                any_candidate = true;
                                let c_old =
                                    opts.criterion.value(state.ll_next, p.edf, next.y.len());
                                let gain = (c_old - p.crit) / c_old.abs().max(1e-12);
                                if best.map_or(true, |(_, _, g)| gain > g) {
                                    best = Some((k, j, gain));
                                }
                            }
                        }
                    }
                }
                if !any_candidate {
                    iter_nonfinite = true;
                    result.stats.updates_rejected += 1;
                } else if let Some((k, j, _)) = best {
                    let term = &model.params[k][j];
                    let (u, w) = uws[k].as_ref().expect("winner has scores");
                    let outcome = {
                        let ctx = TermUpdate::new(
                            family,
                            opts.criterion,
                            nu,
                            k,
                            state.betas[k][j].clone(),
                            &cur.designs[term.design_id],
                            &next.designs[term.design_id],
                            &term.penalty,
                            term.gauge,
                            u,
                            w,
                            &next.y,
                            &state.eta_next,
                            &state.theta_next,
                        );
                        ctx.search_tau(state.taus[k][j], opts.fix_tau, use_slice, &mut rng)
                            .and_then(|p| ctx.guard(p))
                    };
                    match outcome {
                        Some(prop) if accepts(prop.ll, state.ll_next, eps) => {
                            let changed = prop.beta != state.betas[k][j];
                            state.apply(
                                links,
                                k,
                                j,
                                &prop,
                                &cur.designs[term.design_id],
                                &next.designs[term.design_id],
                            );
                            result.stats.updates_accepted += 1;
                            if changed {
                                iter_selected.push((k, j));
                            }
                        }
                        Some(prop) => {
                            result.stats.updates_rejected += 1;
                            if !prop.ll.is_finite() {
                                iter_nonfinite = true;
                            }
                        }
                        None => {
                            result.stats.updates_rejected += 1;
                            iter_nonfinite = true;
                        }
                    }
                }
            }
        }

        let bytes = cur.bytes + next.bytes + temp_peak;
        result.stats.design_bytes_peak = result.stats.design_bytes_peak.max(bytes);
        result.beta_path.push(state.betas.clone());
        result.tau_path.push(state.taus.clone());
        result.selected.push(iter_selected);
        result.loglik_path.push(state.ll_next);
        if iter_nonfinite {
            result.stats.nonfinite_iterations += 1;
        }
        let done = t + 1;
        if done >= MIN_ITERS_FOR_ABORT && result.stats.nonfinite_iterations * 2 > done {
            return Err(EngineError::Diverged {
                iteration: done,
                nonfinite: result.stats.nonfinite_iterations,
            });
        }
        betas = state.betas;
        taus = state.taus;
        carry = Some(next);
    }

    result.stats.iterations = t_iters;
    result.final_taus = taus.clone();
    if resample {
        // Average the coefficient path after burn-in.
        let kept = &result.beta_path[burn_in..];
        let scale = 1.0 / kept.len() as f64;
        let mut avg: Vec<Vec<Array1<f64>>> = model
            .params
            .iter()
            .map(|terms| terms.iter().map(|t| Array1::zeros(t.p)).collect())
            .collect();
        for snapshot in kept {
            for k in 0..avg.len() {
                for j in 0..avg[k].len() {
                    avg[k][j] += &(&snapshot[k][j] * scale);
                }
            }
        }
        result.final_betas = avg;
    } else {
        result.final_betas = betas;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{make_batches, Sampling};
    use crate::model::ModelSpec;
    use crate::terms::TermSpec;
    use approx::assert_abs_diff_eq;

    fn xorshift_stream(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed.max(1);
        move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    fn gaussian_line_store(n: usize) -> ColumnStore {
        let mut unif = xorshift_stream(7);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let xi = unif() * 2.0 - 1.0;
            let noise = unif() + unif() + unif() + unif() - 2.0;
            x.push(xi);
            y.push(2.0 + 1.5 * xi + 0.3 * noise);
        }
        ColumnStore::from_columns(vec!["y".into(), "x".into()], vec![y, x]).unwrap()
    }

    fn full_batches(n: usize, t: usize) -> Vec<Vec<u32>> {
        vec![(0..n as u32).collect(); t]
    }

    #[test]
    fn identity_link_linear_model_matches_least_squares() {
        let n = 200;
        let store = gaussian_line_store(n);
        let spec = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::intercept(), TermSpec::linear("x")],
                vec![TermSpec::intercept()],
            ],
        };
        let model = PreparedModel::prepare(&spec, &store).unwrap();
        let opts = FitOptions {
            nu: 1.0,
            criterion: Criterion::Loglik,
            ..FitOptions::default()
        };
        let fit = fit(&model, &store, &full_batches(n, 4), &opts).unwrap();

        // The linear design is mean-centered, so it is orthogonal to the
        // intercept and a single sweep already solves the joint problem.
        let y = store.read_column(0).unwrap();
        let x = store.read_column(1).unwrap();
        let xm = x.iter().sum::<f64>() / n as f64;
        let ym = y.iter().sum::<f64>() / n as f64;
        let sxy: f64 = x.iter().zip(&y).map(|(xi, yi)| (xi - xm) * (yi - ym)).sum();
        let sxx: f64 = x.iter().map(|xi| (xi - xm) * (xi - xm)).sum();
        assert_abs_diff_eq!(fit.final_betas[0][0][0], ym, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.final_betas[0][1][0], sxy / sxx, epsilon = 1e-10);
    }

    #[test]
    fn infinite_smoothing_flattens_a_spline() {
        let n = 300;
        let mut unif = xorshift_stream(11);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let xi = unif();
            x.push(xi);
            y.push((3.0 * xi).sin() + 0.1 * (unif() - 0.5));
        }
        let store = ColumnStore::from_columns(vec!["y".into(), "x".into()], vec![y, x]).unwrap();
        let mut spline = TermSpec::pspline("x");
        spline.penalty_order = 1;
        let spec = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::intercept(), spline],
                vec![TermSpec::intercept()],
            ],
        };
        let model = PreparedModel::prepare(&spec, &store).unwrap();
        let opts = FitOptions {
            nu: 1.0,
            criterion: Criterion::Loglik,
            fix_tau: true,
            initial_tau: 1e12,
            ..FitOptions::default()
        };
        let fit = fit(&model, &store, &full_batches(n, 6), &opts).unwrap();
        // A first-order penalty forces constant coefficients and the gauge
        // pins their sum to zero, so the whole term vanishes.
        for b in fit.final_betas[0][1].iter() {
            assert!(b.abs() < 1e-5, "coefficient {b} should be flattened away");
        }
    }

    #[test]
    fn huge_second_order_smoothing_leaves_a_straight_line() {
        let n = 400;
        let mut unif = xorshift_stream(23);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let xi = unif();
            x.push(xi);
            y.push(1.0 + 2.0 * xi + (7.0 * xi).sin() * 0.3);
        }
        let store = ColumnStore::from_columns(vec!["y".into(), "x".into()], vec![y, x]).unwrap();
        let spec = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::intercept(), TermSpec::pspline("x")],
                vec![TermSpec::intercept()],
            ],
        };
        let model = PreparedModel::prepare(&spec, &store).unwrap();
        let opts = FitOptions {
            nu: 1.0,
            criterion: Criterion::Loglik,
            fix_tau: true,
            initial_tau: 1e12,
            ..FitOptions::default()
        };
        let fit = fit(&model, &store, &full_batches(n, 6), &opts).unwrap();
        let beta = &fit.final_betas[0][1];
        let scale = beta.iter().fold(0.0f64, |m, b| m.max(b.abs())).max(1e-12);
        for i in 2..beta.len() {
            let dd = beta[i] - 2.0 * beta[i - 1] + beta[i - 2];
            assert!(
                (dd / scale).abs() < 1e-5,
                "second difference {dd} too large for a straight line"
            );
        }
    }

    #[test]
    fn edf_interpolates_between_full_rank_and_null_space() {
        let n = 60;
        let p = 8;
        let mut unif = xorshift_stream(3);
        let design = Array2::from_shape_fn((n, p), |_| unif() * 2.0 - 1.0);
        let w = Array1::<f64>::ones(n);
        let mut wd = design.clone();
        for (mut row, &wi) in wd.axis_iter_mut(Axis(0)).zip(w.iter()) {
            row *= wi;
        }
        let g = design.t().dot(&wd);
        let penalty = crate::terms::difference_penalty(p, 2).unwrap();
        let f0 = penalized_factor(&g, &penalty, 1e-12, 0.0).unwrap();
        assert_abs_diff_eq!(f0.trace_solve(g.view()), p as f64, epsilon = 1e-6);
        let f_inf = penalized_factor(&g, &penalty, 1e12, 0.0).unwrap();
        assert_abs_diff_eq!(f_inf.trace_solve(g.view()), 2.0, epsilon = 1e-4);
        let f_mid = penalized_factor(&g, &penalty, 1.0, 0.0).unwrap();
        let edf_mid = f_mid.trace_solve(g.view());
        assert!(edf_mid > 2.0 && edf_mid < p as f64);
    }

    #[test]
    fn acceptance_rule_rejects_nan_and_small_gains() {
        assert!(!accepts(f64::NAN, -100.0, f64::NEG_INFINITY));
        assert!(!accepts(-99.0, f64::NAN, f64::NEG_INFINITY));
        assert!(accepts(-99.0, -100.0, f64::NEG_INFINITY));
        // Worse but finite still passes an unbounded threshold.
        assert!(accepts(-101.0, -100.0, f64::NEG_INFINITY));
        assert!(accepts(-99.0, -100.0, 1e-4));
        // Improvement of 1e-5 relative does not clear a 1e-4 threshold.
        assert!(!accepts(-99.999, -100.0, 1e-4));
    }

    fn smooth_store(n: usize, seed: u64) -> ColumnStore {
        let mut unif = xorshift_stream(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let xi = unif();
            let noise = unif() + unif() + unif() + unif() + unif() + unif() - 3.0;
            x.push(xi);
            y.push((2.0 * std::f64::consts::PI * xi).sin() + 0.4 * noise);
        }
        ColumnStore::from_columns(vec!["y".into(), "x".into()], vec![y, x]).unwrap()
    }

    fn smooth_model(store: &ColumnStore) -> PreparedModel {
        let spec = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::intercept(), TermSpec::pspline("x")],
                vec![TermSpec::intercept()],
            ],
        };
        PreparedModel::prepare(&spec, store).unwrap()
    }

    #[test]
    fn batchwise_fit_improves_likelihood_and_is_deterministic() {
        let n = 600;
        let store = smooth_store(n, 77);
        let model = smooth_model(&store);
        let batches = make_batches(n as u64, 40, 150, Sampling::Epoch, 5).unwrap();
        let opts = FitOptions {
            nu: 0.3,
            seed: 42,
            ..FitOptions::default()
        };
        let fit1 = fit(&model, &store, &batches, &opts).unwrap();
        let fit2 = fit(&model, &store, &batches, &opts).unwrap();
        assert_eq!(fit1.beta_path, fit2.beta_path);
        assert_eq!(fit1.tau_path, fit2.tau_path);
        assert_eq!(fit1.stats.iterations, 39);
        assert!(fit1.loglik_path[38] > fit1.loglik_path[0]);
        for taus in &fit1.final_taus {
            for &t in taus {
                assert!((TAU_MIN..=TAU_MAX).contains(&t));
            }
        }
        assert!(fit1.stats.design_bytes_peak > 0);
    }

    #[test]
    fn boost_updates_at_most_one_term_per_iteration() {
        let n = 500;
        let store = smooth_store(n, 99);
        let model = smooth_model(&store);
        let batches = make_batches(n as u64, 30, 250, Sampling::WithReplacement, 8).unwrap();
        let opts = FitOptions {
            policy: Policy::Boost,
            nu: 0.3,
            ..FitOptions::default()
        };
        let res = fit(&model, &store, &batches, &opts).unwrap();
        for (t, sel) in res.selected.iter().enumerate() {
            // One winner per iteration, plus the two intercept moment
            // initializations recorded at iteration 0.
            let budget = if t == 0 { 3 } else { 1 };
            assert!(sel.len() <= budget);
        }
        let freq = res.selection_frequency();
        assert!(freq[0][1] > 0.0, "the real smooth should win sometimes");
        let total: f64 = freq.iter().flatten().sum();
        assert!(total <= 1.0 + 2.0 / res.selected.len() as f64 + 1e-12);
        assert!(freq[0][0] > 0.0, "intercept initialization counts as a selection");
    }

    #[test]
    fn resampling_averages_the_post_burn_in_path() {
        let n = 400;
        let store = smooth_store(n, 13);
        let model = smooth_model(&store);
        let batches = make_batches(n as u64, 20, 200, Sampling::WithReplacement, 3).unwrap();
        let opts = FitOptions {
            policy: Policy::Resample,
            seed: 7,
            ..FitOptions::default()
        };
        let res = fit(&model, &store, &batches, &opts).unwrap();
        let burn = res.stats.iterations / 2;
        let kept = &res.beta_path[burn..];
        let mut expect = Array1::zeros(res.final_betas[0][1].len());
        for snap in kept {
            expect += &snap[0][1];
        }
        expect /= kept.len() as f64;
        for (a, b) in res.final_betas[0][1].iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn option_validation() {
        let store = smooth_store(50, 1);
        let model = smooth_model(&store);
        let batches = full_batches(50, 3);
        let bad_nu = FitOptions {
            nu: 0.0,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit(&model, &store, &batches, &bad_nu),
            Err(EngineError::BadOption(_))
        ));
        assert!(matches!(
            fit(&model, &store, &batches[..1], &FitOptions::default()),
            Err(EngineError::NeedTwoBatches(1))
        ));
    }
}
