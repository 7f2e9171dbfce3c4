//! Regression-based mediation with linear mediator and outcome models
//! (no exposure–mediator interaction), and single-exposure mediation
//! analysis over a mixture.
//!
//! With mediator model `M ~ 1 + x + covariates` and outcome model
//! `Y ~ 1 + x + M + covariates`, a shift `d = x − x*` gives
//! `NDE = d·β_x`, `NIE = d·α_x·β_m` and `TE = NDE + NIE`.

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linmod::{bh_adjust, delta_product_interval, ols_fit, Interval};

pub const DEFAULT_LEVEL: f64 = 0.95;
const INTERCEPT: &str = "(Intercept)";

/// Reference and comparative exposure levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub reference: Vec<f64>,
    pub comparative: Vec<f64>,
}

impl Contrast {
    pub fn new(reference: Vec<f64>, comparative: Vec<f64>) -> Result<Self> {
        if reference.len() != comparative.len() {
            return Err(Error::Dimension(format!(
                "contrast reference has length {}, comparative {}",
                reference.len(),
                comparative.len()
            )));
        }
        Ok(Contrast { reference, comparative })
    }

    /// Scalar contrast `x* → x`.
    pub fn scalar(reference: f64, comparative: f64) -> Self {
        Contrast { reference: vec![reference], comparative: vec![comparative] }
    }

    /// Shift from 0 to 1 in each of `dim` coordinates.
    pub fn unit(dim: usize) -> Self {
        Contrast { reference: vec![0.0; dim], comparative: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    /// Component-wise `x − x*`.
    pub fn shift(&self) -> Vec<f64> {
        self.comparative.iter().zip(&self.reference).map(|(x, r)| x - r).collect()
    }

    /// Scalar sub-contrast for coordinate `j`.
    pub fn component(&self, j: usize) -> Contrast {
        Contrast::scalar(self.reference[j], self.comparative[j])
    }
}

/// Estimated path coefficients behind one set of effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathCoefficients {
    /// Exposure → mediator (`α_x`).
    pub alpha_x: f64,
    pub se_alpha_x: f64,
    /// Exposure → outcome given the mediator (`β_x`).
    pub beta_x: f64,
    pub se_beta_x: f64,
    /// Mediator → outcome (`β_m`).
    pub beta_m: f64,
    pub se_beta_m: f64,
    /// Covariance of (`β_x`, `β_m`) from the outcome model.
    pub cov_beta_x_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationEffects {
    pub label: String,
    pub method: String,
    pub contrast: Contrast,
    pub te: Interval,
    pub nde: Interval,
    pub nie: Interval,
    pub paths: PathCoefficients,
}

/// Sums of per-exposure (or per-component) effects.
///
/// Standard errors add in quadrature as if the summands were independent,
/// so the interval is approximate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEffects {
    pub te: Interval,
    pub nde: Interval,
    pub nie: Interval,
    pub terms: usize,
}

impl GlobalEffects {
    pub fn sum(effects: &[MediationEffects], level: f64) -> GlobalEffects {
        let add = |f: fn(&MediationEffects) -> &Interval| {
            let est: f64 = effects.iter().map(|e| f(e).estimate).sum();
            let var: f64 = effects.iter().map(|e| f(e).se.powi(2)).sum();
            Interval::normal(est, var.sqrt(), level)
        };
        GlobalEffects { te: add(|e| &e.te), nde: add(|e| &e.nde), nie: add(|e| &e.nie), terms: effects.len() }
    }
}

/// Named column views for the low-level estimators.
pub struct MediationInput<'a> {
    pub exposure: DVectorView<'a, f64>,
    pub exposure_name: &'a str,
    pub mediator: &'a DVector<f64>,
    pub outcome: &'a DVector<f64>,
    pub covariates: &'a DMatrix<f64>,
    pub covariate_names: &'a [String],
}

fn design(columns: &[DVectorView<'_, f64>], covariates: &DMatrix<f64>) -> DMatrix<f64> {
    let n = covariates.nrows();
    let k = 1 + columns.len() + covariates.ncols();
    let mut d = DMatrix::zeros(n, k);
    d.column_mut(0).fill(1.0);
    for (j, c) in columns.iter().enumerate() {
        d.column_mut(1 + j).copy_from(c);
    }
    d.columns_mut(1 + columns.len(), covariates.ncols()).copy_from(covariates);
    d
}

fn design_names(first: &[&str], covariate_names: &[String]) -> Vec<String> {
    std::iter::once(INTERCEPT)
        .chain(first.iter().copied())
        .map(str::to_string)
        .chain(covariate_names.iter().cloned())
        .collect()
}

fn check_contrast(contrast: &Contrast) -> Result<f64> {
    if contrast.dim() != 1 {
        return Err(Error::Dimension(format!("single-exposure contrast must have length 1, got {}", contrast.dim())));
    }
    Ok(contrast.shift()[0])
}

/// Product-method effects from raw columns.
pub fn product_effects(input: &MediationInput<'_>, contrast: &Contrast, level: f64) -> Result<MediationEffects> {
    let d = check_contrast(contrast)?;
    let m_view = input.mediator.column(0);
    let med_design = design(&[input.exposure], input.covariates);
    let med_fit = ols_fit(&med_design, input.mediator, &design_names(&[input.exposure_name], input.covariate_names))?;
    let out_design = design(&[input.exposure, m_view], input.covariates);
    let out_fit = ols_fit(
        &out_design,
        input.outcome,
        &design_names(&[input.exposure_name, "__mediator__"], input.covariate_names),
    )?;
    let paths = PathCoefficients {
        alpha_x: med_fit.coefficients[1],
        se_alpha_x: med_fit.se(1),
        beta_x: out_fit.coefficients[1],
        se_beta_x: out_fit.se(1),
        beta_m: out_fit.coefficients[2],
        se_beta_m: out_fit.se(2),
        cov_beta_x_m: out_fit.covariance[(1, 2)],
    };
    effects_from_paths(input.exposure_name, "product", contrast.clone(), d, &paths, level)
}

fn effects_from_paths(
    label: &str,
    method: &str,
    contrast: Contrast,
    d: f64,
    p: &PathCoefficients,
    level: f64,
) -> Result<MediationEffects> {
    if d == 0.0 {
        return Ok(MediationEffects {
            label: label.to_string(),
            method: method.to_string(),
            contrast,
            te: Interval::zero(),
            nde: Interval::zero(),
            nie: Interval::zero(),
            paths: *p,
        });
    }
    let nde = Interval::normal(d * p.beta_x, d.abs() * p.se_beta_x, level);
    let prod = delta_product_interval(p.alpha_x, p.se_alpha_x, p.beta_m, p.se_beta_m, level)?;
    let nie = Interval::normal(d * prod.estimate, d.abs() * prod.se, level);
    let te_var = p.se_beta_x.powi(2)
        + p.beta_m.powi(2) * p.se_alpha_x.powi(2)
        + p.alpha_x.powi(2) * p.se_beta_m.powi(2)
        + 2.0 * p.alpha_x * p.cov_beta_x_m;
    let te = Interval::normal(nde.estimate + nie.estimate, d.abs() * te_var.max(0.0).sqrt(), level);
    Ok(MediationEffects { label: label.to_string(), method: method.to_string(), contrast, te, nde, nie, paths: *p })
}

/// Difference-method effects: `NIE = d·(φ_x − β_x)` from the total-effect and
/// outcome models.
///
/// The NIE standard error reuses the product-form delta rule, which is exact
/// here because `φ_x − β_x = α_x·β_m` for nested OLS fits.
pub fn difference_effects(input: &MediationInput<'_>, contrast: &Contrast, level: f64) -> Result<MediationEffects> {
    let d = check_contrast(contrast)?;
    let total_design = design(&[input.exposure], input.covariates);
    let total_fit =
        ols_fit(&total_design, input.outcome, &design_names(&[input.exposure_name], input.covariate_names))?;
    let product = product_effects(input, contrast, level)?;
    let phi_x = total_fit.coefficients[1];
    let p = product.paths;
    let nie_est = d * (phi_x - p.beta_x);
    let nie = if d == 0.0 { Interval::zero() } else { Interval::normal(nie_est, product.nie.se, level) };
    let nde = product.nde;
    let te = if d == 0.0 { Interval::zero() } else { Interval::normal(d * phi_x, d.abs() * total_fit.se(1), level) };
    Ok(MediationEffects {
        label: input.exposure_name.to_string(),
        method: "difference".into(),
        contrast: contrast.clone(),
        te,
        nde,
        nie,
        paths: p,
    })
}

/// Looks up a named exposure or confounder column.
fn column<'a>(data: &'a Dataset, name: &str) -> Result<DVectorView<'a, f64>> {
    if let Some(j) = data.exposure_index(name) {
        return Ok(data.exposures().column(j));
    }
    if let Some(j) = data.confounder_names().iter().position(|c| c == name) {
        return Ok(data.confounders().column(j));
    }
    Err(Error::Schema(format!("column '{name}' is not an exposure or confounder")))
}

fn covariate_block(data: &Dataset, exposure: &str, covariates: &[String]) -> Result<DMatrix<f64>> {
    if covariates.iter().any(|c| c == exposure) {
        return Err(Error::Config(format!("exposure '{exposure}' also listed as a covariate")));
    }
    let cols: Vec<DVectorView<'_, f64>> = covariates.iter().map(|c| column(data, c)).collect::<Result<_>>()?;
    let mut m = DMatrix::zeros(data.n(), cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).copy_from(c);
    }
    Ok(m)
}

fn with_input<T>(
    data: &Dataset,
    exposure: &str,
    covariates: &[String],
    f: impl FnOnce(&MediationInput<'_>) -> Result<T>,
) -> Result<T> {
    let x = column(data, exposure)?;
    let cov = covariate_block(data, exposure, covariates)?;
    f(&MediationInput {
        exposure: x,
        exposure_name: exposure,
        mediator: data.mediator(),
        outcome: data.outcome(),
        covariates: &cov,
        covariate_names: covariates,
    })
}

/// Product-method mediation for one named exposure, adjusting for the named covariates.
pub fn product_mediation(
    data: &Dataset,
    exposure: &str,
    covariates: &[String],
    contrast: &Contrast,
    level: f64,
) -> Result<MediationEffects> {
    with_input(data, exposure, covariates, |inp| product_effects(inp, contrast, level))
}

/// Difference-method mediation for one named exposure.
pub fn difference_mediation(
    data: &Dataset,
    exposure: &str,
    covariates: &[String],
    contrast: &Contrast,
    level: f64,
) -> Result<MediationEffects> {
    with_input(data, exposure, covariates, |inp| difference_effects(inp, contrast, level))
}

/// Per-exposure contrast choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastRule {
    /// 0 → 1 for every exposure.
    Unit,
    /// One (reference, comparative) pair per exposure.
    Custom(Contrast),
}

impl ContrastRule {
    pub fn resolve(&self, dim: usize) -> Result<Contrast> {
        match self {
            ContrastRule::Unit => Ok(Contrast::unit(dim)),
            ContrastRule::Custom(c) if c.dim() == dim => Ok(c.clone()),
            ContrastRule::Custom(c) => {
                Err(Error::Config(format!("custom contrast has length {}, expected {dim}", c.dim())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemaOptions {
    /// Include the remaining exposures as covariates.
    pub adjust_coexposures: bool,
    pub contrast: ContrastRule,
    /// BH-adjusted NIE p-value threshold for flagging an exposure as active.
    pub fdr_level: f64,
    pub level: f64,
}

impl Default for SemaOptions {
    fn default() -> Self {
        SemaOptions { adjust_coexposures: true, contrast: ContrastRule::Unit, fdr_level: 0.05, level: DEFAULT_LEVEL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemaResult {
    pub adjusted: bool,
    pub effects: Vec<MediationEffects>,
    /// BH-adjusted NIE p-values, one per exposure.
    pub nie_q: Vec<f64>,
    pub active: Vec<bool>,
    /// Sum of the per-exposure effects. A heuristic summary, not a joint causal effect.
    pub global: GlobalEffects,
    pub note: String,
}

/// Single-exposure mediation analysis: one product-method fit per exposure.
pub fn sema(data: &Dataset, options: &SemaOptions) -> Result<SemaResult> {
    if !(options.fdr_level > 0.0 && options.fdr_level <= 1.0) {
        return Err(Error::Config(format!("fdr level {} outside (0, 1]", options.fdr_level)));
    }
    let p = data.p();
    let contrast = options.contrast.resolve(p)?;
    let names = data.exposure_names();
    let effects: Vec<MediationEffects> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut covs: Vec<String> = Vec::new();
            if options.adjust_coexposures {
                covs.extend(names.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, n)| n.clone()));
            }
            covs.extend(data.confounder_names().iter().cloned());
            let mut e = product_mediation(data, &names[j], &covs, &contrast.component(j), options.level)?;
            e.method = if options.adjust_coexposures { "sema-adjusted" } else { "sema-unadjusted" }.into();
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let pvals: Vec<f64> = effects.iter().map(|e| e.nie.p).collect();
    let nie_q = bh_adjust(&pvals)?;
    let active = nie_q.iter().map(|&q| q <= options.fdr_level).collect();
    let global = GlobalEffects::sum(&effects, options.level);
    let note = if options.adjust_coexposures {
        "co-exposure adjusted; global effect is a heuristic sum of exposure-specific effects".to_string()
    } else {
        "not causally interpretable: co-exposures omitted from both models".to_string()
    };
    Ok(SemaResult { adjusted: options.adjust_coexposures, effects, nie_q, active, global, note })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Single exposure, one confounder: M = a·x + c + e, Y = bx·x + bm·M + c + e.
    pub(crate) fn linear_dgp(n: usize, a: f64, bm: f64, bx: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let c: Vec<f64> = (0..n).map(|_| z()).collect();
        let x: Vec<f64> = (0..n).map(|i| 0.3 * c[i] + z()).collect();
        let m: Vec<f64> = (0..n).map(|i| a * x[i] + c[i] + z()).collect();
        let y: Vec<f64> = (0..n).map(|i| bx * x[i] + bm * m[i] + c[i] + z()).collect();
        Dataset::new(DMatrix::from_vec(n, 1, x), DVector::from_vec(m), DVector::from_vec(y), DMatrix::from_vec(n, 1, c))
            .unwrap()
    }

    fn confs(d: &Dataset) -> Vec<String> {
        d.confounder_names().to_vec()
    }

    #[test]
    fn zero_contrast_gives_zero_effects() {
        let d = linear_dgp(200, 0.5, 0.4, 0.2, 1);
        let c = Contrast::scalar(0.7, 0.7);
        for e in [
            product_mediation(&d, "X1", &confs(&d), &c, 0.95).unwrap(),
            difference_mediation(&d, "X1", &confs(&d), &c, 0.95).unwrap(),
        ] {
            assert_eq!(e.te.estimate, 0.0);
            assert_eq!(e.nde.estimate, 0.0);
            assert_eq!(e.nie.estimate, 0.0);
        }
    }

    #[test]
    fn null_mediator_path() {
        let d = linear_dgp(100_000, 0.0, 0.4, 0.2, 2);
        let e = product_mediation(&d, "X1", &confs(&d), &Contrast::unit(1), 0.95).unwrap();
        assert!(e.nie.estimate.abs() < 3.0 * e.nie.se, "{:?}", e.nie);
    }

    #[test]
    fn recovers_analytic_effects() {
        let d = linear_dgp(100_000, 0.5, 0.4, 0.2, 3);
        let p = product_mediation(&d, "X1", &confs(&d), &Contrast::unit(1), 0.95).unwrap();
        assert!((p.nie.estimate - 0.2).abs() < 0.02, "{:?}", p.nie);
        assert!((p.nde.estimate - 0.2).abs() < 0.02, "{:?}", p.nde);
        let q = difference_mediation(&d, "X1", &confs(&d), &Contrast::unit(1), 0.95).unwrap();
        assert!((q.nie.estimate - 0.2).abs() < 0.02);
    }

    #[test]
    fn te_is_sum_and_interval_contains_estimate() {
        let d = linear_dgp(300, 0.5, 0.4, 0.2, 4);
        let e = product_mediation(&d, "X1", &confs(&d), &Contrast::scalar(-1.0, 2.0), 0.95).unwrap();
        assert!((e.te.estimate - e.nde.estimate - e.nie.estimate).abs() < 1e-10);
        for i in [e.te, e.nde, e.nie] {
            assert!(i.ci_lo <= i.estimate && i.estimate <= i.ci_hi);
        }
    }

    #[test]
    fn confounder_shift_invariance() {
        let d = linear_dgp(300, 0.5, 0.4, 0.2, 5);
        let shifted = Dataset::new(
            d.exposures().clone(),
            d.mediator().clone(),
            d.outcome().clone(),
            d.confounders().map(|v| v + 17.5),
        )
        .unwrap();
        let a = product_mediation(&d, "X1", &confs(&d), &Contrast::unit(1), 0.95).unwrap();
        let b = product_mediation(&shifted, "X1", &confs(&d), &Contrast::unit(1), 0.95).unwrap();
        assert!((a.nie.estimate - b.nie.estimate).abs() < 1e-10);
        assert!((a.nde.estimate - b.nde.estimate).abs() < 1e-10);
        assert!((a.te.estimate - b.te.estimate).abs() < 1e-10);
    }

    #[test]
    fn exposure_as_covariate_rejected() {
        let d = linear_dgp(50, 0.5, 0.4, 0.2, 6);
        let err = product_mediation(&d, "X1", &["X1".to_string()], &Contrast::unit(1), 0.95).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_exposure_regimes_coincide() {
        let d = linear_dgp(200, 0.5, 0.4, 0.2, 7);
        let adj = sema(&d, &SemaOptions::default()).unwrap();
        let unadj = sema(&d, &SemaOptions { adjust_coexposures: false, ..SemaOptions::default() }).unwrap();
        assert_eq!(adj.effects[0].nie, unadj.effects[0].nie);
        assert_eq!(adj.global.nie, unadj.global.nie);
    }
}
