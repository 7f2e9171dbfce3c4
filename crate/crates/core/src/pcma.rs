//! Principal-component mediation analysis.
//!
//! Exposures are standardized and decomposed into principal components of
//! their correlation matrix; retained component scores then stand in for the
//! exposures in product-method mediation fits.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{standardize, Dataset};
use crate::error::{Error, Result};
use crate::mediate::{product_effects, Contrast, GlobalEffects, MediationEffects, MediationInput, DEFAULT_LEVEL};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// p×p, columns are components.
    pub loadings: DMatrix<f64>,
    /// Nonincreasing; sums to p.
    pub eigenvalues: DVector<f64>,
    /// n×p component scores.
    pub scores: DMatrix<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl PcaModel {
    /// Proportion of total variance per component.
    pub fn variance_proportions(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.sum();
        self.eigenvalues.iter().map(|e| e / total).collect()
    }

    pub fn cumulative_proportions(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.variance_proportions()
            .into_iter()
            .map(|v| {
                acc += v;
                acc.min(1.0)
            })
            .collect()
    }

    /// Scores for new raw exposure rows.
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let z = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.means[j]) / self.sds[j]);
        z * &self.loadings
    }
}

/// PCA on the correlation scale.
///
/// Signs are fixed so that the largest-magnitude loading of every component
/// is positive (first such entry on ties).
pub fn pca(x: &DMatrix<f64>) -> Result<PcaModel> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::insufficient("rows for PCA", 2, n));
    }
    let st = standardize(x)?;
    let z = st.values;
    let mut corr = z.tr_mul(&z) / (n as f64 - 1.0);
    corr = (&corr + corr.transpose()) * 0.5;
    let eig = corr.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut loadings = DMatrix::zeros(p, p);
    let mut eigenvalues = DVector::zeros(p);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        let mut best = 0;
        for k in 1..p {
            if v[k].abs() > v[best].abs() {
                best = k;
            }
        }
        if v[best] < 0.0 {
            v.neg_mut();
        }
        loadings.set_column(dst, &v);
        eigenvalues[dst] = eig.eigenvalues[src].max(0.0);
    }
    let scores = &z * &loadings;
    Ok(PcaModel { loadings, eigenvalues, scores, means: st.means, sds: st.sds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum RetentionRule {
    /// Smallest number of components whose cumulative variance share reaches the threshold.
    CumVariance(f64),
    FirstK(usize),
    /// Components with eigenvalue above one.
    Kaiser,
}

impl Default for RetentionRule {
    fn default() -> Self {
        RetentionRule::CumVariance(0.8)
    }
}

impl RetentionRule {
    pub fn validate(&self, p: usize) -> Result<()> {
        match *self {
            RetentionRule::CumVariance(t) if !(t > 0.0 && t <= 1.0) => {
                Err(Error::Config(format!("cumulative variance threshold {t} outside (0, 1]")))
            }
            RetentionRule::FirstK(k) if k < 1 || k > p => Err(Error::Config(format!("first_k {k} outside 1..={p}"))),
            _ => Ok(()),
        }
    }
}

/// Number of components kept under `rule`.
pub fn select_components(model: &PcaModel, rule: RetentionRule) -> Result<usize> {
    let p = model.eigenvalues.len();
    rule.validate(p)?;
    Ok(match rule {
        RetentionRule::CumVariance(theta) => {
            let cum = model.cumulative_proportions();
            cum.iter().position(|&c| c >= theta - 1e-12).map_or(p, |i| i + 1)
        }
        RetentionRule::FirstK(k) => k,
        RetentionRule::Kaiser => model.eigenvalues.iter().filter(|&&e| e > 1.0).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcmaOptions {
    pub rule: RetentionRule,
    /// Per-component shift of the retained scores; `None` is a unit shift on each.
    pub shift: Option<Vec<f64>>,
    pub level: f64,
}

impl Default for PcmaOptions {
    fn default() -> Self {
        PcmaOptions { rule: RetentionRule::default(), shift: None, level: DEFAULT_LEVEL }
    }
}

#[derive(Debug, Clone)]
pub struct PcmaResult {
    pub model: PcaModel,
    pub retained: usize,
    pub effects: Vec<MediationEffects>,
    /// Sum of the per-component effects for the joint shift.
    pub global: GlobalEffects,
}

pub fn component_names(l: usize) -> Vec<String> {
    (1..=l).map(|j| format!("PC{j}")).collect()
}

/// Mediation with each retained component as exposure and the other retained
/// components plus confounders as covariates.
pub fn pcma(data: &Dataset, options: &PcmaOptions) -> Result<PcmaResult> {
    let model = pca(data.exposures()).map_err(|e| match e {
        Error::DegenerateColumn(c) => {
            let idx: usize = c.trim_start_matches("column ").parse().unwrap_or(0);
            Error::DegenerateColumn(data.exposure_names().get(idx).cloned().unwrap_or(c))
        }
        other => other,
    })?;
    let l = select_components(&model, options.rule)?;
    if l == 0 {
        return Err(Error::Config("retention rule kept no components".into()));
    }
    let shift = match &options.shift {
        Some(s) if s.len() == l => s.clone(),
        Some(s) => return Err(Error::Config(format!("shift has length {}, but {l} components are retained", s.len()))),
        None => vec![1.0; l],
    };
    let effects = mediate_scores(data, &model.scores.columns(0, l).into_owned(), &shift, options.level)?;
    let global = GlobalEffects::sum(&effects, options.level);
    Ok(PcmaResult { model, retained: l, effects, global })
}

/// Per-column product-method mediation of a score block, each column
/// adjusted for the remaining columns and the dataset's confounders.
pub fn mediate_scores(
    data: &Dataset,
    scores: &DMatrix<f64>,
    shift: &[f64],
    level: f64,
) -> Result<Vec<MediationEffects>> {
    let l = scores.ncols();
    let names = component_names(l);
    (0..l)
        .into_par_iter()
        .map(|j| {
            let others: Vec<usize> = (0..l).filter(|&k| k != j).collect();
            let mut cov = DMatrix::zeros(data.n(), others.len() + data.s());
            let mut cov_names = Vec::with_capacity(cov.ncols());
            for (c, &k) in others.iter().enumerate() {
                cov.set_column(c, &scores.column(k));
                cov_names.push(names[k].clone());
            }
            cov.columns_mut(others.len(), data.s()).copy_from(data.confounders());
            cov_names.extend(data.confounder_names().iter().cloned());
            let score = scores.column(j);
            let input = MediationInput {
                exposure: score.as_view(),
                exposure_name: &names[j],
                mediator: data.mediator(),
                outcome: data.outcome(),
                covariates: &cov,
                covariate_names: &cov_names,
            };
            let mut e = product_effects(&input, &Contrast::scalar(0.0, shift[j]), level)?;
            e.method = "pcma".into();
            Ok(e)
        })
        .collect()
}

/// Sum of the per-component NIE estimates for an arbitrary joint shift.
pub fn joint_nie(effects: &[MediationEffects], shift: &[f64]) -> f64 {
    effects.iter().zip(shift).map(|(e, d)| d * e.paths.alpha_x * e.paths.beta_m).sum()
}

/// Scree table rows: (component, eigenvalue, proportion, cumulative).
pub fn scree_table(model: &PcaModel) -> Vec<(usize, f64, f64, f64)> {
    let prop = model.variance_proportions();
    let cum = model.cumulative_proportions();
    (0..prop.len()).map(|j| (j + 1, model.eigenvalues[j], prop[j], cum[j])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_matrix(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn model_with_eigen(values: &[f64]) -> PcaModel {
        let p = values.len();
        PcaModel {
            loadings: DMatrix::identity(p, p),
            eigenvalues: DVector::from_column_slice(values),
            scores: DMatrix::zeros(1, p),
            means: vec![0.0; p],
            sds: vec![1.0; p],
        }
    }

    #[test]
    fn duplicated_column() {
        let mut x = normal_matrix(100, 2, 1);
        let c0 = x.column(0).into_owned();
        x.set_column(1, &c0);
        let m = pca(&x).unwrap();
        assert!((m.eigenvalues[0] - 2.0).abs() < 1e-10);
        assert!(m.eigenvalues[1].abs() < 1e-10);
    }

    #[test]
    fn independent_columns_have_unit_eigenvalues() {
        let m = pca(&normal_matrix(20_000, 4, 2)).unwrap();
        for e in m.eigenvalues.iter() {
            assert!((e - 1.0).abs() < 0.05, "{}", m.eigenvalues);
        }
    }

    #[test]
    fn identities_and_sign_convention() {
        let x = normal_matrix(60, 5, 3);
        let m = pca(&x).unwrap();
        let p = 5;
        assert!((m.loadings.tr_mul(&m.loadings) - DMatrix::identity(p, p)).amax() < 1e-10);
        assert!((m.eigenvalues.sum() - p as f64).abs() < 1e-8);
        let z = standardize(&x).unwrap().values;
        assert!((&m.scores * m.loadings.transpose() - z).amax() < 1e-8);
        for col in m.loadings.column_iter() {
            let best = col.iamax();
            assert!(col[best] > 0.0);
        }
        assert!(m.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
        assert!((m.project(&x) - &m.scores).amax() < 1e-10);
    }

    #[test]
    fn retention_rules() {
        let mut vals = vec![6.0, 3.0, 1.0];
        vals.extend(std::iter::repeat_n(0.0, 7));
        let m = model_with_eigen(&vals);
        assert_eq!(select_components(&m, RetentionRule::CumVariance(0.8)).unwrap(), 2);
        assert_eq!(select_components(&m, RetentionRule::CumVariance(1.0)).unwrap(), 3);
        assert_eq!(select_components(&m, RetentionRule::Kaiser).unwrap(), 2);
        assert_eq!(select_components(&m, RetentionRule::FirstK(4)).unwrap(), 4);
        assert!(select_components(&m, RetentionRule::FirstK(0)).is_err());
        assert!(select_components(&m, RetentionRule::CumVariance(1.5)).is_err());
        let flat = model_with_eigen(&[1.0; 6]);
        assert_eq!(select_components(&flat, RetentionRule::CumVariance(1.0)).unwrap(), 6);
    }
}
