//! Model specification and preparation. A model maps each distribution
//! parameter to a list of additive terms. Preparation freezes everything that
//! depends on the training data (knot ranges, centering means) so that the
//! same model can later score new data, and deduplicates identical designs
//! across distribution parameters so each batch evaluates a basis only once.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{ColumnStore, StoreError};
use crate::families::{self, FamilyError};
use crate::terms::{
    apply_centering, bspline_design, build_knots, column_means, difference_penalty, eye, kron,
    tensor_design, TermError, TermKind, TermSpec,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Term(#[from] TermError),
    #[error("family {family} has {expected} parameters but the model specifies {got} predictors")]
    WrongParamCount {
        family: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate term {label:?} in predictor {param}")]
    DuplicateTerm { param: usize, label: String },
    #[error("term {label:?} expects {expected} covariates, got {got}")]
    WrongCovariateCount {
        label: String,
        expected: usize,
        got: usize,
    },
    #[error("column {0:?} contains a non-finite value")]
    NonFiniteColumn(String),
}

/// User-facing model description: a family plus one term list per parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: String,
    pub response: String,
    pub predictors: Vec<Vec<TermSpec>>,
}

impl ModelSpec {
    /// Convenience builder: every parameter gets an intercept, a smooth for
    /// each covariate, and a two-dimensional smooth when both `lon` and `lat`
    /// are present (those two are then dropped as univariate smooths).
    pub fn auto_all(
        family: &str,
        response: &str,
        covariates: &[String],
    ) -> Result<ModelSpec, ModelError> {
        let fam = families::by_name(family)?;
        let has_pair = covariates.iter().any(|c| c == "lon")
            && covariates.iter().any(|c| c == "lat");
        let mut terms = vec![TermSpec::intercept()];
        for cov in covariates {
            if has_pair && (cov == "lon" || cov == "lat") {
                if cov == "lon" {
                    terms.push(TermSpec::tensor2d("lon", "lat", 10));
                }
                continue;
            }
            terms.push(TermSpec::pspline(cov));
        }
        Ok(ModelSpec {
            family: fam.name().to_string(),
            response: response.to_string(),
            predictors: vec![terms; fam.n_params()],
        })
    }
}

fn zero_penalty() -> Array2<f64> {
    Array2::zeros((0, 0))
}

/// A deduplicated design recipe: evaluating it on a batch of covariate values
/// produces one block of the design matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignTemplate {
    pub kind: TermKind,
    pub cov_names: Vec<String>,
    /// Positions of the covariates inside the gathered batch block.
    pub cov_pos: Vec<usize>,
    pub degree: usize,
    pub n_knots: usize,
    /// Knot vectors per covariate (empty for intercept and linear terms).
    pub knots: Vec<Vec<f64>>,
    /// Column means subtracted from the design (empty if uncentered).
    pub centering: Vec<f64>,
    pub p: usize,
}

impl DesignTemplate {
    /// Evaluate the design block for a gathered batch (columns in
    /// `PreparedModel::used_names` order).
    pub fn eval(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>, TermError> {
        let n = x.nrows();
        let mut design = match self.kind {
            TermKind::Intercept => Array2::ones((n, 1)),
            TermKind::Linear => {
                let mut d = Array2::zeros((n, 1));
                d.column_mut(0).assign(&x.column(self.cov_pos[0]));
                d
            }
            TermKind::PSpline => {
                bspline_design(x.column(self.cov_pos[0]), &self.knots[0], self.degree)?
            }
            TermKind::Tensor2d => {
                let b1 = bspline_design(x.column(self.cov_pos[0]), &self.knots[0], self.degree)?;
                let b2 = bspline_design(x.column(self.cov_pos[1]), &self.knots[1], self.degree)?;
                tensor_design(b1.view(), b2.view())?
            }
        };
        if !self.centering.is_empty() {
            apply_centering(&mut design, &self.centering);
        }
        Ok(design)
    }
}

/// One term of one predictor, pointing at its shared design template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedTerm {
    pub label: String,
    pub design_id: usize,
    pub p: usize,
    /// True when the centered design and the penalty share the constant null
    /// direction, which the solver must pin down.
    pub gauge: bool,
    pub spec: TermSpec,
    #[serde(skip, default = "zero_penalty")]
    pub penalty: Array2<f64>,
}

/// A model frozen against its training data: resolved columns, knots,
/// centering means, penalties. Serializable; penalties are rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedModel {
    pub family: String,
    pub response: String,
    /// Covariate names in gather order; templates index into this list.
    pub used_names: Vec<String>,
    pub templates: Vec<DesignTemplate>,
    pub params: Vec<Vec<PreparedTerm>>,
}

/// Rows are streamed through preparation and prediction in chunks of this
/// many rows so large stores never materialize a full design matrix.
const CHUNK_ROWS: usize = 8192;

fn term_penalty(spec: &TermSpec, p_per_cov: &[usize]) -> Result<Array2<f64>, TermError> {
    Ok(match spec.kind {
        TermKind::Intercept | TermKind::Linear => Array2::zeros((1, 1)),
        TermKind::PSpline => difference_penalty(p_per_cov[0], spec.penalty_order)?,
        TermKind::Tensor2d => {
            let (p1, p2) = (p_per_cov[0], p_per_cov[1]);
            let k1 = difference_penalty(p1, spec.penalty_order)?;
            let k2 = difference_penalty(p2, spec.penalty_order)?;
            let (i1, i2) = (eye(p1), eye(p2));
            kron(k1.view(), i2.view()) + kron(i1.view(), k2.view())
        }
    })
}

fn expected_covariates(kind: TermKind) -> usize {
    match kind {
        TermKind::Intercept => 0,
        TermKind::Linear | TermKind::PSpline => 1,
        TermKind::Tensor2d => 2,
    }
}

impl PreparedModel {
    pub fn prepare(spec: &ModelSpec, store: &ColumnStore) -> Result<Self, ModelError> {
        let fam = families::by_name(&spec.family)?;
        if spec.predictors.len() != fam.n_params() {
            return Err(ModelError::WrongParamCount {
                family: fam.name().to_string(),
                expected: fam.n_params(),
                got: spec.predictors.len(),
            });
        }
        store.column_index(&spec.response)?;

        // Collect covariate names in first-seen order and validate arity.
        let mut used_names: Vec<String> = Vec::new();
        for (k, terms) in spec.predictors.iter().enumerate() {
            let mut labels = Vec::new();
            for t in terms {
                let expected = expected_covariates(t.kind);
                if t.covariates.len() != expected {
                    return Err(ModelError::WrongCovariateCount {
                        label: t.label(),
                        expected,
                        got: t.covariates.len(),
                    });
                }
                let label = t.label();
                if labels.contains(&label) {
                    return Err(ModelError::DuplicateTerm { param: k, label });
                }
                labels.push(label);
                for c in &t.covariates {
                    store.column_index(c)?;
                    if !used_names.contains(c) {
                        used_names.push(c.clone());
                    }
                }
            }
        }

        // Cache full columns once for range and centering passes.
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(used_names.len());
        for name in &used_names {
            let col = store.read_column(store.column_index(name)?)?;
            if col.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteColumn(name.clone()));
            }
            columns.push(col);
        }
        let pos_of = |name: &str| used_names.iter().position(|n| n == name).unwrap();

        let mut templates: Vec<DesignTemplate> = Vec::new();
        let mut params: Vec<Vec<PreparedTerm>> = Vec::new();
        for terms in &spec.predictors {
            let mut prepared = Vec::with_capacity(terms.len());
            for t in terms {
                let key = (t.kind, t.covariates.clone(), t.n_knots, t.degree);
                let design_id = match templates.iter().position(|tpl| {
                    (tpl.kind, tpl.cov_names.clone(), tpl.n_knots, tpl.degree) == key
                }) {
                    Some(id) => id,
                    None => {
                        templates.push(build_template(t, &used_names, &columns, &pos_of)?);
                        templates.len() - 1
                    }
                };
                let tpl = &templates[design_id];
                let p_per_cov: Vec<usize> = tpl
                    .knots
                    .iter()
                    .map(|k| k.len() - tpl.degree - 1)
                    .collect();
                let penalty = term_penalty(t, &p_per_cov)?;
                prepared.push(PreparedTerm {
                    label: t.label(),
                    design_id,
                    p: tpl.p,
                    gauge: matches!(t.kind, TermKind::PSpline | TermKind::Tensor2d),
                    spec: t.clone(),
                    penalty,
                });
            }
            params.push(prepared);
        }

        Ok(PreparedModel {
            family: fam.name().to_string(),
            response: spec.response.clone(),
            used_names,
            templates,
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Store column indices to gather for a batch: the response first, then
    /// the covariates in `used_names` order. Works on any store that has the
    /// required columns, so a model fitted on one file can score another.
    pub fn gather_columns(&self, store: &ColumnStore) -> Result<Vec<usize>, ModelError> {
        let mut cols = vec![store.column_index(&self.response)?];
        for name in &self.used_names {
            cols.push(store.column_index(name)?);
        }
        Ok(cols)
    }

    /// Evaluate every design template on a gathered covariate block
    /// (columns in `used_names` order, response already split off).
    pub fn eval_designs(&self, x: &ArrayView2<f64>) -> Result<Vec<Array2<f64>>, TermError> {
        self.templates.iter().map(|t| t.eval(x)).collect()
    }

    /// Additive predictors for every row of a store, shape (n, n_params).
    pub fn predict_eta(
        &self,
        store: &ColumnStore,
        betas: &[Vec<Array1<f64>>],
    ) -> Result<Array2<f64>, ModelError> {
        let cols = self.gather_columns(store)?;
        let cov_cols = &cols[1..];
        let n = store.n_rows() as usize;
        let mut eta = Array2::zeros((n, self.n_params()));
        let mut start = 0usize;
        while start < n {
            let end = (start + CHUNK_ROWS).min(n);
            let ids: Vec<u32> = (start as u32..end as u32).collect();
            let x = store.read_batch(&ids, cov_cols)?;
            let designs = self.eval_designs(&x.view())?;
            for (k, terms) in self.params.iter().enumerate() {
                for (j, term) in terms.iter().enumerate() {
                    let contrib = designs[term.design_id].dot(&betas[k][j]);
                    for (i, v) in contrib.iter().enumerate() {
                        eta[[start + i, k]] += v;
                    }
                }
            }
            start = end;
        }
        Ok(eta)
    }

    /// Fitted contribution of a single term over all rows of a store.
    pub fn predict_term(
        &self,
        store: &ColumnStore,
        k: usize,
        j: usize,
        betas: &[Vec<Array1<f64>>],
    ) -> Result<Array1<f64>, ModelError> {
        let cols = self.gather_columns(store)?;
        let cov_cols = &cols[1..];
        let n = store.n_rows() as usize;
        let term = &self.params[k][j];
        let tpl = &self.templates[term.design_id];
        let mut out = Array1::zeros(n);
        let mut start = 0usize;
        while start < n {
            let end = (start + CHUNK_ROWS).min(n);
            let ids: Vec<u32> = (start as u32..end as u32).collect();
            let x = store.read_batch(&ids, cov_cols)?;
            let design = tpl.eval(&x.view())?;
            let contrib = design.dot(&betas[k][j]);
            for (i, v) in contrib.iter().enumerate() {
                out[start + i] = *v;
            }
            start = end;
        }
        Ok(out)
    }

    /// Rebuild the non-serialized penalty matrices after deserialization.
    pub fn rebuild_penalties(&mut self) {
        for terms in &mut self.params {
            for term in terms.iter_mut() {
                let tpl = &self.templates[term.design_id];
                let p_per_cov: Vec<usize> = tpl
                    .knots
                    .iter()
                    .map(|k| k.len() - tpl.degree - 1)
                    .collect();
                term.penalty = term_penalty(&term.spec, &p_per_cov)
                    .expect("penalty rebuilt from a spec validated at preparation");
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let mut model: PreparedModel = serde_json::from_str(json)?;
        model.rebuild_penalties();
        Ok(model)
    }
}

fn build_template(
    spec: &TermSpec,
    used_names: &[String],
    columns: &[Vec<f64>],
    pos_of: &dyn Fn(&str) -> usize,
) -> Result<DesignTemplate, ModelError> {
    let cov_pos: Vec<usize> = spec.covariates.iter().map(|c| pos_of(c)).collect();
    let mut knots = Vec::new();
    let mut p = 1usize;
    match spec.kind {
        TermKind::Intercept => {}
        TermKind::Linear => {}
        TermKind::PSpline | TermKind::Tensor2d => {
            for &cp in &cov_pos {
                let col = &columns[cp];
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &v in col {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let kv = build_knots(lo, hi, spec.n_knots, spec.degree)?;
                p *= kv.len() - spec.degree - 1;
                knots.push(kv);
            }
        }
    }
    let mut template = DesignTemplate {
        kind: spec.kind,
        cov_names: spec.covariates.clone(),
        cov_pos,
        degree: spec.degree,
        n_knots: spec.n_knots,
        knots,
        centering: Vec::new(),
        p,
    };
    // Centering means over the full training data, streamed in row chunks.
    if !matches!(spec.kind, TermKind::Intercept) {
        let n = columns[template.cov_pos[0]].len();
        let mut sums = vec![0.0; template.p];
        let mut start = 0usize;
        while start < n {
            let end = (start + CHUNK_ROWS).min(n);
            let mut x = Array2::zeros((end - start, used_names.len()));
            for &cp in &template.cov_pos {
                for (i, row) in (start..end).enumerate() {
                    x[[i, cp]] = columns[cp][row];
                }
            }
            let design = template.eval(&x.view())?;
            for (s, m) in sums.iter_mut().zip(column_means(design.view())) {
                *s += m * (end - start) as f64;
            }
            start = end;
        }
        template.centering = sums.iter().map(|s| s / n as f64).collect();
    }
    Ok(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_store() -> ColumnStore {
        let n = 400;
        let mut y = Vec::new();
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        let mut state = 88172645463325252u64;
        let mut unif = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..n {
            let a = unif();
            let b = unif();
            x1.push(a);
            x2.push(2.0 * b - 1.0);
            y.push(a + b);
        }
        ColumnStore::from_columns(
            vec!["y".into(), "x1".into(), "x2".into()],
            vec![y, x1, x2],
        )
        .unwrap()
    }

    #[test]
    fn auto_all_builds_expected_labels() {
        let covs: Vec<String> = ["x1", "lon", "lat", "x2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let spec = ModelSpec::auto_all("NO", "y", &covs).unwrap();
        assert_eq!(spec.predictors.len(), 2);
        let labels: Vec<String> = spec.predictors[0].iter().map(|t| t.label()).collect();
        assert_eq!(labels, vec!["intercept", "s(x1)", "te(lon,lat)", "s(x2)"]);
    }

    #[test]
    fn preparation_dedupes_designs_across_parameters() {
        let store = toy_store();
        let spec = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::intercept(), TermSpec::pspline("x1")],
                vec![TermSpec::intercept(), TermSpec::pspline("x1")],
            ],
        };
        let model = PreparedModel::prepare(&spec, &store).unwrap();
        assert_eq!(model.templates.len(), 2, "intercept + one spline");
        assert_eq!(
            model.params[0][1].design_id,
            model.params[1][1].design_id
        );
        assert_eq!(model.params[0][1].p, 22);
        assert!(model.params[0][1].gauge);
        assert!(!model.params[0][0].gauge);
    }

    #[test]
    fn centered_designs_have_zero_column_means_on_training_data() {
        let store = toy_store();
        let spec = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::pspline("x1"), TermSpec::linear("x2")],
                vec![TermSpec::intercept()],
            ],
        };
        let model = PreparedModel::prepare(&spec, &store).unwrap();
        let cols = model.gather_columns(&store).unwrap();
        let n = store.n_rows() as u32;
        let ids: Vec<u32> = (0..n).collect();
        let x = store.read_batch(&ids, &cols[1..]).unwrap();
        let designs = model.eval_designs(&x.view()).unwrap();
        for d in &designs[..2] {
            for m in column_means(d.view()) {
                assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn predict_eta_matches_direct_design_product() {
        let store = toy_store();
        let spec = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::intercept(), TermSpec::pspline("x1")],
                vec![TermSpec::intercept()],
            ],
        };
        let model = PreparedModel::prepare(&spec, &store).unwrap();
        let betas = vec![
            vec![
                Array1::from_elem(1, 0.7),
                Array1::from_shape_fn(22, |i| (i as f64 * 0.37).sin() * 0.1),
            ],
            vec![Array1::from_elem(1, -0.4)],
        ];
        let eta = model.predict_eta(&store, &betas).unwrap();
        let cols = model.gather_columns(&store).unwrap();
        let ids: Vec<u32> = (0..store.n_rows() as u32).collect();
        let x = store.read_batch(&ids, &cols[1..]).unwrap();
        let designs = model.eval_designs(&x.view()).unwrap();
        let direct = 0.7 + &designs[model.params[0][1].design_id].dot(&betas[0][1]);
        for i in 0..store.n_rows() as usize {
            assert_abs_diff_eq!(eta[[i, 0]], direct[i], epsilon = 1e-12);
            assert_abs_diff_eq!(eta[[i, 1]], -0.4, epsilon = 1e-14);
        }
    }

    #[test]
    fn serialized_model_predicts_identically_after_reload() {
        let store = toy_store();
        let covs = vec!["x1".to_string(), "x2".to_string()];
        let spec = ModelSpec::auto_all("GA", "y", &covs).unwrap();
        // GA needs positive response; reuse magnitudes.
        let shifted = ColumnStore::from_columns(
            store.column_names().to_vec(),
            (0..3)
                .map(|c| {
                    store
                        .read_column(c)
                        .unwrap()
                        .iter()
                        .map(|v| v.abs() + 0.5)
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let model = PreparedModel::prepare(&spec, &shifted).unwrap();
        let betas: Vec<Vec<Array1<f64>>> = model
            .params
            .iter()
            .map(|terms| {
                terms
                    .iter()
                    .map(|t| Array1::from_shape_fn(t.p, |i| ((i + 1) as f64 * 0.11).cos() * 0.2))
                    .collect()
            })
            .collect();
        let eta1 = model.predict_eta(&shifted, &betas).unwrap();
        let reloaded = PreparedModel::from_json(&model.to_json()).unwrap();
        let eta2 = reloaded.predict_eta(&shifted, &betas).unwrap();
        assert_eq!(eta1, eta2);
        // Penalties must be rebuilt, not left empty.
        assert_eq!(
            reloaded.params[0][1].penalty.dim(),
            model.params[0][1].penalty.dim()
        );
        assert_eq!(reloaded.params[0][1].penalty, model.params[0][1].penalty);
    }

    #[test]
    fn validation_catches_bad_specs() {
        let store = toy_store();
        let bad_count = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![vec![TermSpec::intercept()]],
        };
        assert!(matches!(
            PreparedModel::prepare(&bad_count, &store),
            Err(ModelError::WrongParamCount { .. })
        ));
        let bad_col = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::pspline("nope")],
                vec![TermSpec::intercept()],
            ],
        };
        assert!(PreparedModel::prepare(&bad_col, &store).is_err());
        let dup = ModelSpec {
            family: "NO".into(),
            response: "y".into(),
            predictors: vec![
                vec![TermSpec::pspline("x1"), TermSpec::pspline("x1")],
                vec![TermSpec::intercept()],
            ],
        };
        assert!(matches!(
            PreparedModel::prepare(&dup, &store),
            Err(ModelError::DuplicateTerm { .. })
        ));
    }
}
