//! Environmental-risk-score mediation analysis.
//!
//! An elastic net with unpenalized confounders is tuned by 5-fold
//! cross-validation on a training half of the data. Its exposure
//! coefficients define a scalar score on the analysis half, and that score is
//! the exposure in a product-method mediation fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_train_analysis, standardize, Dataset, SeededRng};
use crate::error::{Error, Result};
use crate::mediate::{product_effects, Contrast, MediationEffects, MediationInput, DEFAULT_LEVEL};

pub const CD_TOLERANCE: f64 = 1e-7;
/// Bound on the KKT residual of the objective scaled by 1/n.
pub const KKT_TOLERANCE: f64 = 1e-6;
pub const MAX_SWEEPS: usize = 100_000;
pub const CV_FOLDS: usize = 5;
pub const LAMBDA2_GRID_LEN: usize = 100;
pub const LAMBDA1_PATH_LEN: usize = 100;
/// The λ1 path spans this many decades below its maximum.
pub const LAMBDA1_PATH_DECADES: f64 = 4.0;
pub const RELAX_FACTOR: f64 = 0.9;
pub const MAX_RELAX_STEPS: usize = 200;
pub const MIN_EXPOSURES: usize = 3;

/// Centered cross-product form of a least-squares problem with intercept.
///
/// `Σ(y − b0 − Zβ)²` with `b0` profiled out equals
/// `yy − 2·cᵀβ + βᵀGβ` where `G = Z̃ᵀZ̃` and `c = Z̃ᵀỹ` on centered data.
#[derive(Debug, Clone)]
struct GramProblem {
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    z_means: DVector<f64>,
    y_mean: f64,
    n: f64,
}

impl GramProblem {
    fn new(z: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let n = z.nrows() as f64;
        let z_means = DVector::from_iterator(z.ncols(), z.column_iter().map(|c| c.sum() / n));
        let y_mean = y.sum() / n;
        let mut zc = z.clone();
        for (mut col, m) in zc.column_iter_mut().zip(z_means.iter()) {
            col.add_scalar_mut(-m);
        }
        let yc = y.add_scalar(-y_mean);
        GramProblem { gram: zc.tr_mul(&zc), cross: zc.tr_mul(&yc), z_means, y_mean, n }
    }

    fn intercept(&self, beta: &DVector<f64>) -> f64 {
        self.y_mean - self.z_means.dot(beta)
    }

    /// `z_jᵀ r` for all j, recomputed from scratch.
    fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.cross - &self.gram * beta
    }
}

/// Per-coordinate KKT violation of the elastic-net objective, maximized over
/// coordinates. The caller divides by n to put it on the per-observation scale.
fn kkt_residual(grad: &DVector<f64>, beta: &DVector<f64>, l1: f64, l2: f64, pf: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..beta.len() {
        let g = -2.0 * grad[j] + 2.0 * l2 * pf[j] * beta[j];
        let r =
            if beta[j] != 0.0 { (g + l1 * pf[j] * beta[j].signum()).abs() } else { (g.abs() - l1 * pf[j]).max(0.0) };
        worst = worst.max(r);
    }
    worst
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on a Gram problem, warm-started from `beta`.
/// Sweeps alternate between all coordinates and the current nonzero set.
/// Returns (sweeps, KKT residual).
fn solve_gram(problem: &GramProblem, l1: f64, l2: f64, pf: &[f64], beta: &mut DVector<f64>) -> Result<(usize, f64)> {
    let p = beta.len();
    let g = &problem.gram;
    let mut grad = problem.gradient(beta);
    let mut sweeps = 0;
    let mut max_change = f64::INFINITY;
    let mut kkt = f64::INFINITY;
    let all: Vec<usize> = (0..p).collect();
    let gs = g.as_slice();
    let sweep = |idx: &[usize], beta: &mut DVector<f64>, grad: &mut DVector<f64>| -> f64 {
        let mut worst = 0.0f64;
        let gr = grad.as_mut_slice();
        for &j in idx {
            let gjj = gs[j * p + j];
            let denom = gjj + l2 * pf[j];
            if denom <= 0.0 {
                continue;
            }
            let old = beta[j];
            let rho = gr[j] + gjj * old;
            let new = soft_threshold(rho, 0.5 * l1 * pf[j]) / denom;
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                for (r, gk) in gr.iter_mut().zip(&gs[j * p..(j + 1) * p]) {
                    *r -= delta * gk;
                }
                worst = worst.max(delta.abs());
            }
        }
        worst
    };
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        max_change = sweep(&all, beta, &mut grad);
        if max_change < CD_TOLERANCE {
            grad = problem.gradient(beta);
            kkt = kkt_residual(&grad, beta, l1, l2, pf) / problem.n;
            if kkt <= KKT_TOLERANCE {
                return Ok((sweeps, kkt));
            }
            continue;
        }
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        while sweeps < MAX_SWEEPS {
            sweeps += 1;
            if sweep(&active, beta, &mut grad) < CD_TOLERANCE {
                break;
            }
        }
    }
    Err(Error::Convergence { sweeps, max_change, kkt })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnetFit {
    pub intercept: f64,
    pub coefficients: DVector<f64>,
    pub sweeps: usize,
    pub kkt: f64,
}

/// Elastic net with intercept:
/// `Σ(y − b0 − Zβ)² + λ1·Σ pf_j|β_j| + λ2·Σ pf_j β_j²`, by cyclic coordinate descent.
pub fn elastic_net(z: &DMatrix<f64>, y: &DVector<f64>, lambda1: f64, lambda2: f64, pf: &[f64]) -> Result<EnetFit> {
    validate_enet(z, y, lambda1, lambda2, pf)?;
    let problem = GramProblem::new(z, y);
    let mut beta = DVector::zeros(z.ncols());
    let (sweeps, kkt) = solve_gram(&problem, lambda1, lambda2, pf, &mut beta)?;
    Ok(EnetFit { intercept: problem.intercept(&beta), coefficients: beta, sweeps, kkt })
}

fn validate_enet(z: &DMatrix<f64>, y: &DVector<f64>, l1: f64, l2: f64, pf: &[f64]) -> Result<()> {
    if z.nrows() != y.len() || pf.len() != z.ncols() {
        return Err(Error::Dimension(format!(
            "Z is {}×{}, y has {}, penalty factors {}",
            z.nrows(),
            z.ncols(),
            y.len(),
            pf.len()
        )));
    }
    if !(l1 >= 0.0 && l2 >= 0.0) || pf.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Domain("penalties and penalty factors must be nonnegative".into()));
    }
    Ok(())
}

/// The objective minimized by [`elastic_net`].
pub fn enet_objective(z: &DMatrix<f64>, y: &DVector<f64>, fit: &EnetFit, l1: f64, l2: f64, pf: &[f64]) -> f64 {
    let r = y - z * &fit.coefficients - DVector::from_element(y.len(), fit.intercept);
    let pen: f64 = fit.coefficients.iter().zip(pf).map(|(b, w)| l1 * w * b.abs() + l2 * w * b * b).sum();
    r.norm_squared() + pen
}

/// Smallest λ1 at which every penalized coefficient is zero, given the
/// unpenalized columns fitted by least squares.
fn lambda1_max(problem: &GramProblem, l2: f64, pf: &[f64]) -> Result<f64> {
    let mut beta = DVector::zeros(pf.len());
    solve_gram(problem, f64::MAX / 4.0, l2, pf, &mut beta)?;
    let grad = problem.gradient(&beta);
    Ok((0..pf.len()).filter(|&j| pf[j] > 0.0).map(|j| 2.0 * grad[j].abs() / pf[j]).fold(0.0, f64::max))
}

/// Geometric λ1 path from `max` down `LAMBDA1_PATH_DECADES` decades.
pub fn lambda1_path(max: f64) -> Vec<f64> {
    let lo = max * 10f64.powf(-LAMBDA1_PATH_DECADES);
    (0..LAMBDA1_PATH_LEN)
        .map(|i| {
            let t = i as f64 / (LAMBDA1_PATH_LEN - 1) as f64;
            (max.ln() + t * (lo.ln() - max.ln())).exp()
        })
        .collect()
}

/// 100 log-spaced λ2 values on [1e-4, 1e2].
pub fn lambda2_grid() -> Vec<f64> {
    let (lo, hi) = (1e-4f64.ln(), 1e2f64.ln());
    (0..LAMBDA2_GRID_LEN).map(|i| (lo + (hi - lo) * i as f64 / (LAMBDA2_GRID_LEN - 1) as f64).exp()).collect()
}

/// Coefficient path at fixed λ2, warm-started down the λ1 path.
pub fn enet_path(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda2: f64,
    pf: &[f64],
) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    validate_enet(z, y, 0.0, lambda2, pf)?;
    let problem = GramProblem::new(z, y);
    let path = lambda1_path(lambda1_max(&problem, lambda2, pf)?);
    let mut beta = DVector::zeros(z.ncols());
    let mut out = Vec::with_capacity(path.len());
    for &l1 in &path {
        solve_gram(&problem, l1, lambda2, pf, &mut beta)?;
        out.push(beta.clone());
    }
    Ok((path, out))
}

/// Held-out sums for squared error evaluation without touching rows again.
struct HeldOut {
    n: f64,
    s_y: f64,
    s_yy: f64,
    s_z: DVector<f64>,
    s_zy: DVector<f64>,
    s_zz: DMatrix<f64>,
}

impl HeldOut {
    fn new(z: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        HeldOut {
            n: y.len() as f64,
            s_y: y.sum(),
            s_yy: y.norm_squared(),
            s_z: DVector::from_iterator(z.ncols(), z.column_iter().map(|c| c.sum())),
            s_zy: z.tr_mul(y),
            s_zz: z.tr_mul(z),
        }
    }

    fn sse(&self, b0: f64, beta: &DVector<f64>) -> f64 {
        self.s_yy - 2.0 * b0 * self.s_y - 2.0 * beta.dot(&self.s_zy)
            + self.n * b0 * b0
            + 2.0 * b0 * beta.dot(&self.s_z)
            + beta.dot(&(&self.s_zz * beta))
    }
}

/// Cross-validation result. Penalties are per observation: a fit on `m`
/// rows uses `m·λ1` and `m·λ2` in the summed-squares objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Cross-validated mean squared error at the selected pair.
    pub cv_error: f64,
    /// λ1 path shared by all λ2 values.
    pub lambda1_path: Vec<f64>,
    /// Minimum CV error per λ2 grid point.
    pub cv_by_lambda2: Vec<f64>,
}

/// Deterministic fold labels for `n` rows.
pub fn fold_ids(n: usize, rng: &SeededRng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.rng());
    let mut folds = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        folds[i] = pos % CV_FOLDS;
    }
    folds
}

/// Two-dimensional penalty tuning by 5-fold cross-validated mean squared error.
pub fn cv_tune(z: &DMatrix<f64>, y: &DVector<f64>, pf: &[f64], rng: &SeededRng) -> Result<CvResult> {
    validate_enet(z, y, 0.0, 0.0, pf)?;
    let n = z.nrows();
    if n < 10 {
        return Err(Error::insufficient("rows for 5-fold cross-validation", 10, n));
    }
    let folds = fold_ids(n, rng);
    let parts: Vec<(GramProblem, HeldOut)> = (0..CV_FOLDS)
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            (
                GramProblem::new(&z.select_rows(&train), &y.select_rows(&train)),
                HeldOut::new(&z.select_rows(&test), &y.select_rows(&test)),
            )
        })
        .collect();
    let full = GramProblem::new(z, y);
    let path = lambda1_path(lambda1_max(&full, 0.0, pf)? / full.n);
    let grid = lambda2_grid();

    let curves: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|&l2| {
            let mut sse = vec![0.0; path.len()];
            for (problem, held) in &parts {
                let mut beta = DVector::zeros(z.ncols());
                for (k, &l1) in path.iter().enumerate() {
                    solve_gram(problem, l1 * problem.n, l2 * problem.n, pf, &mut beta)?;
                    sse[k] += held.sse(problem.intercept(&beta), &beta);
                }
            }
            Ok(sse.into_iter().map(|s| s / n as f64).collect())
        })
        .collect::<Result<_>>()?;

    let mut best = (f64::INFINITY, 0, 0);
    for (a, curve) in curves.iter().enumerate() {
        for (b, &err) in curve.iter().enumerate() {
            if err < best.0 {
                best = (err, a, b);
            }
        }
    }
    Ok(CvResult {
        lambda1: path[best.2],
        lambda2: grid[best.1],
        cv_error: best.0,
        cv_by_lambda2: curves.iter().map(|c| c.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
        lambda1_path: path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpec {
    MainOnly,
    /// Main effects plus squares and pairwise products.
    MainSquaresPairwise,
}

/// Exposure-feature terms for `p` exposures: `(k, None)` is a main effect,
/// `(k, Some(l))` with `k <= l` the product `X_k·X_l`.
pub fn feature_terms(p: usize, spec: FeatureSpec) -> Vec<(usize, Option<usize>)> {
    let mut terms: Vec<(usize, Option<usize>)> = (0..p).map(|k| (k, None)).collect();
    if spec == FeatureSpec::MainSquaresPairwise {
        for k in 0..p {
            for l in k..p {
                terms.push((k, Some(l)));
            }
        }
    }
    terms
}

fn raw_features(xs: &DMatrix<f64>, terms: &[(usize, Option<usize>)]) -> DMatrix<f64> {
    DMatrix::from_fn(xs.nrows(), terms.len(), |i, f| match terms[f] {
        (k, None) => xs[(i, k)],
        (k, Some(l)) => xs[(i, k)] * xs[(i, l)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErsModel {
    pub feature_spec: FeatureSpec,
    pub exposure_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub terms: Vec<(usize, Option<usize>)>,
    /// Training moments of the raw exposures.
    pub exposure_means: Vec<f64>,
    pub exposure_sds: Vec<f64>,
    /// Training moments of the constructed exposure features.
    pub feature_means: Vec<f64>,
    pub feature_sds: Vec<f64>,
    /// Exposure-feature coefficients on the standardized-feature scale.
    pub coefficients: Vec<f64>,
    /// Score weights per term on the standardized-exposure scale (`coefficient / feature sd`).
    pub weights: Vec<f64>,
    /// Confounder coefficients on their standardized scale, for the retained confounders.
    pub confounder_names: Vec<String>,
    pub confounder_coefficients: Vec<f64>,
    pub intercept: f64,
    /// Per-observation penalties; the training fit used `n_train` times these.
    pub lambda1: f64,
    pub lambda2: f64,
    /// λ1 chosen by cross-validation before the minimum-exposure relaxation.
    pub lambda1_cv: f64,
    pub relax_steps: usize,
    pub cv_error: f64,
    pub lambda1_path_max: f64,
    pub selected_features: Vec<String>,
    pub train_rows: Vec<usize>,
    pub rng: SeededRng,
}

impl ErsModel {
    /// Distinct exposures appearing in any nonzero feature.
    pub fn selected_exposures(&self) -> Vec<usize> {
        selected_exposures(&self.terms, &self.coefficients, self.exposure_names.len())
    }

    /// Exposures standardized with the training moments.
    pub fn standardize_exposures(&self, x_raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_raw.ncols() != self.exposure_means.len() {
            return Err(Error::Dimension(format!(
                "expected {} exposures, got {}",
                self.exposure_means.len(),
                x_raw.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x_raw.nrows(), x_raw.ncols(), |i, j| {
            (x_raw[(i, j)] - self.exposure_means[j]) / self.exposure_sds[j]
        }))
    }

    /// Scores for raw exposure rows.
    pub fn score_raw(&self, x_raw: &DMatrix<f64>) -> Result<ErsScores> {
        build_ers(self, &self.standardize_exposures(x_raw)?, self.feature_spec)
    }
}

fn selected_exposures(terms: &[(usize, Option<usize>)], coefs: &[f64], p: usize) -> Vec<usize> {
    let mut used = vec![false; p];
    for (t, c) in terms.iter().zip(coefs) {
        if *c != 0.0 {
            used[t.0] = true;
            if let Some(l) = t.1 {
                used[l] = true;
            }
        }
    }
    (0..p).filter(|&k| used[k]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErsScores {
    pub values: Vec<f64>,
}

/// `ERS_i = Σ_j w_j X_ij + Σ_{k≤l} w_kl X_ik X_il` on exposures already
/// standardized with the training moments. Confounders never enter the score.
pub fn build_ers(model: &ErsModel, x_std: &DMatrix<f64>, spec: FeatureSpec) -> Result<ErsScores> {
    if spec != model.feature_spec {
        return Err(Error::Config(format!(
            "feature spec {spec:?} does not match the trained spec {:?}",
            model.feature_spec
        )));
    }
    if x_std.ncols() != model.exposure_names.len() {
        return Err(Error::Dimension(format!(
            "expected {} exposures, got {}",
            model.exposure_names.len(),
            x_std.ncols()
        )));
    }
    let values = (0..x_std.nrows())
        .map(|i| {
            model
                .terms
                .iter()
                .zip(&model.weights)
                .filter(|(_, w)| **w != 0.0)
                .map(|(t, w)| match *t {
                    (k, None) => w * x_std[(i, k)],
                    (k, Some(l)) => w * x_std[(i, k)] * x_std[(i, l)],
                })
                .sum()
        })
        .collect();
    Ok(ErsScores { values })
}

/// Fits the risk-score model on a training dataset.
pub fn fit_ers(train: &Dataset, spec: FeatureSpec, rng: &SeededRng, train_rows: Vec<usize>) -> Result<ErsModel> {
    let p = train.p();
    let xs = standardize(train.exposures()).map_err(|e| rename_degenerate(e, train.exposure_names()))?;
    let terms = feature_terms(p, spec);
    let raw = raw_features(&xs.values, &terms);
    let feat = standardize(&raw).map_err(|e| {
        rename_degenerate(e, &terms.iter().map(|t| term_name(train.exposure_names(), *t)).collect::<Vec<_>>())
    })?;
    // Constant confounders are absorbed by the intercept.
    let conf_keep: Vec<usize> = (0..train.s())
        .filter(|&j| {
            let c = train.confounders().column(j);
            let m = c.mean();
            c.iter().any(|v| (v - m).abs() > 1e-12 * m.abs().max(1.0))
        })
        .collect();
    let conf = standardize(&train.confounders().select_columns(&conf_keep))?;
    let nf = terms.len();
    let mut z = DMatrix::zeros(train.n(), nf + conf_keep.len());
    z.columns_mut(0, nf).copy_from(&feat.values);
    z.columns_mut(nf, conf_keep.len()).copy_from(&conf.values);
    let pf: Vec<f64> = (0..z.ncols()).map(|j| if j < nf { 1.0 } else { 0.0 }).collect();
    let y = train.outcome();

    let cv = cv_tune(&z, y, &pf, &rng.substream(0))?;
    let problem = GramProblem::new(&z, y);
    let mut beta = DVector::zeros(z.ncols());
    let mut lambda1 = cv.lambda1;
    let n = problem.n;
    solve_gram(&problem, lambda1 * n, cv.lambda2 * n, &pf, &mut beta)?;
    let need = MIN_EXPOSURES.min(p);
    let mut steps = 0;
    while selected_exposures(&terms, &beta.as_slice()[..nf], p).len() < need {
        if steps == MAX_RELAX_STEPS {
            return Err(Error::Numerical(format!(
                "fewer than {need} exposures selected after {MAX_RELAX_STEPS} λ1 reductions"
            )));
        }
        steps += 1;
        lambda1 *= RELAX_FACTOR;
        solve_gram(&problem, lambda1 * n, cv.lambda2 * n, &pf, &mut beta)?;
    }

    let names = train.exposure_names();
    let feature_names: Vec<String> = terms.iter().map(|t| term_name(names, *t)).collect();
    let coefficients: Vec<f64> = beta.as_slice()[..nf].to_vec();
    let weights = coefficients.iter().zip(&feat.sds).map(|(b, s)| b / s).collect();
    let selected_features =
        feature_names.iter().zip(&coefficients).filter(|(_, c)| **c != 0.0).map(|(n, _)| n.clone()).collect();
    Ok(ErsModel {
        feature_spec: spec,
        exposure_names: names.to_vec(),
        feature_names,
        terms,
        exposure_means: xs.means,
        exposure_sds: xs.sds,
        feature_means: feat.means,
        feature_sds: feat.sds,
        coefficients,
        weights,
        confounder_names: conf_keep.iter().map(|&j| train.confounder_names()[j].clone()).collect(),
        confounder_coefficients: beta.as_slice()[nf..].to_vec(),
        intercept: problem.intercept(&beta),
        lambda1,
        lambda2: cv.lambda2,
        lambda1_cv: cv.lambda1,
        relax_steps: steps,
        cv_error: cv.cv_error,
        lambda1_path_max: cv.lambda1_path[0],
        selected_features,
        train_rows,
        rng: *rng,
    })
}

fn term_name(names: &[String], t: (usize, Option<usize>)) -> String {
    match t {
        (k, None) => names[k].clone(),
        (k, Some(l)) if k == l => format!("{}^2", names[k]),
        (k, Some(l)) => format!("{}*{}", names[k], names[l]),
    }
}

fn rename_degenerate(e: Error, names: &[String]) -> Error {
    match e {
        Error::DegenerateColumn(c) => {
            let idx: usize = c.trim_start_matches("column ").parse().unwrap_or(usize::MAX);
            Error::DegenerateColumn(names.get(idx).cloned().unwrap_or(c))
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErsContrast {
    /// 25th → 75th percentile of the analysis-split score.
    Iqr,
    /// Explicit score levels.
    Custom { reference: f64, comparative: f64 },
    /// Score difference between two raw exposure profiles.
    ExposureShift { reference: Vec<f64>, comparative: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErsmaOptions {
    pub feature_spec: FeatureSpec,
    pub contrast: ErsContrast,
    pub level: f64,
}

impl Default for ErsmaOptions {
    fn default() -> Self {
        ErsmaOptions { feature_spec: FeatureSpec::MainOnly, contrast: ErsContrast::Iqr, level: DEFAULT_LEVEL }
    }
}

#[derive(Debug, Clone)]
pub struct ErsmaResult {
    pub model: ErsModel,
    pub scores: ErsScores,
    pub analysis_rows: Vec<usize>,
    pub effects: MediationEffects,
}

/// Sample quantile with linear interpolation between order statistics
/// (`(N−1)·prob` positioning).
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, prob)
}

pub(crate) fn quantile_sorted(v: &[f64], prob: f64) -> f64 {
    let h = (v.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Full risk-score pipeline: split, tune and fit on the training half, score
/// the analysis half, then mediate with the score as exposure.
pub fn ersma(data: &Dataset, options: &ErsmaOptions, rng: &SeededRng) -> Result<ErsmaResult> {
    let split = split_train_analysis(data, &rng.substream(0))?;
    let model = fit_ers(&split.train, options.feature_spec, &rng.substream(1), split.train_rows.clone())?;
    let scores = model.score_raw(split.analysis.exposures())?;
    let s = &scores.values;
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    if s.iter().all(|v| (v - mean).abs() <= 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::DegenerateScore);
    }
    let contrast = match &options.contrast {
        ErsContrast::Iqr => Contrast::scalar(quantile(s, 0.25), quantile(s, 0.75)),
        ErsContrast::Custom { reference, comparative } => Contrast::scalar(*reference, *comparative),
        ErsContrast::ExposureShift { reference, comparative } => {
            let p = data.p();
            if reference.len() != p || comparative.len() != p {
                return Err(Error::Config(format!("exposure-shift contrast needs {p} values per profile")));
            }
            let rows = DMatrix::from_fn(2, p, |i, j| if i == 0 { reference[j] } else { comparative[j] });
            let v = model.score_raw(&rows)?.values;
            Contrast::scalar(v[0], v[1])
        }
    };
    let analysis = &split.analysis;
    let keep: Vec<usize> = (0..analysis.s())
        .filter(|&j| {
            let c = analysis.confounders().column(j);
            let m = c.mean();
            c.iter().any(|v| (v - m).abs() > 1e-12 * m.abs().max(1.0))
        })
        .collect();
    let cov = analysis.confounders().select_columns(&keep);
    let cov_names: Vec<String> = keep.iter().map(|&j| analysis.confounder_names()[j].clone()).collect();
    let ers = DVector::from_column_slice(s);
    let input = MediationInput {
        exposure: ers.column(0),
        exposure_name: "ERS",
        mediator: analysis.mediator(),
        outcome: analysis.outcome(),
        covariates: &cov,
        covariate_names: &cov_names,
    };
    let mut effects = product_effects(&input, &contrast, options.level)?;
    effects.method = "ersma".into();
    Ok(ErsmaResult { model, scores, analysis_rows: split.analysis_rows, effects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmod::ols_fit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = standardize(&DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))).unwrap().values;
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = DVector::from_fn(n, |i, _| 1.5 * z[(i, 0)] - 0.7 * z[(i, 2)] + noise[i] + 3.0);
        (z, y)
    }

    #[test]
    fn unpenalized_matches_ols() {
        let (z, y) = problem(50, 4, 1);
        let fit = elastic_net(&z, &y, 0.0, 0.0, &[1.0; 4]).unwrap();
        let design = DMatrix::from_fn(50, 5, |i, j| if j == 0 { 1.0 } else { z[(i, j - 1)] });
        let names: Vec<String> = (0..5).map(|j| j.to_string()).collect();
        let ols = ols_fit(&design, &y, &names).unwrap();
        assert!((fit.intercept - ols.coefficients[0]).abs() < 1e-6);
        for j in 0..4 {
            assert!((fit.coefficients[j] - ols.coefficients[j + 1]).abs() < 1e-6);
        }
    }

    #[test]
    fn large_lambda1_zeroes_penalized() {
        let (z, y) = problem(50, 6, 2);
        let pf = [1.0; 6];
        let problem = GramProblem::new(&z, &y);
        let lmax = lambda1_max(&problem, 0.5, &pf).unwrap();
        let fit = elastic_net(&z, &y, lmax * 1.0001, 0.5, &pf).unwrap();
        assert!(fit.coefficients.iter().all(|&b| b == 0.0));
        let below = elastic_net(&z, &y, lmax * 0.95, 0.5, &pf).unwrap();
        assert!(below.coefficients.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn unpenalized_columns_survive() {
        let (z, y) = problem(80, 5, 3);
        let pf = [1.0, 1.0, 1.0, 0.0, 0.0];
        let fit = elastic_net(&z, &y, 1e6, 0.1, &pf).unwrap();
        assert!(fit.coefficients.iter().take(3).all(|&b| b == 0.0));
        assert!(fit.kkt <= KKT_TOLERANCE);
    }

    #[test]
    fn nonzero_count_monotone_along_path() {
        let (z, y) = problem(100, 8, 4);
        let (_, betas) = enet_path(&z, &y, 0.3, &[1.0; 8]).unwrap();
        let counts: Vec<usize> = betas.iter().map(|b| b.iter().filter(|v| **v != 0.0).count()).collect();
        // Path runs from large to small λ1, so counts should not decrease.
        for w in counts.windows(2) {
            assert!(w[1] + 1 >= w[0], "{counts:?}");
        }
        assert_eq!(counts[0], 0);
        assert_eq!(*counts.last().unwrap(), 8);
    }

    #[test]
    fn grids() {
        let g = lambda2_grid();
        assert_eq!(g.len(), 100);
        assert!((g[0] - 1e-4).abs() < 1e-16 && (g[99] - 1e2).abs() < 1e-10);
        let p = lambda1_path(10.0);
        assert!((p[0] - 10.0).abs() < 1e-12 && (p[99] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn cv_is_deterministic_and_keeps_signal() {
        let (z, y) = problem(200, 5, 5);
        let pf = [1.0; 5];
        let a = cv_tune(&z, &y, &pf, &SeededRng::new(9)).unwrap();
        let b = cv_tune(&z, &y, &pf, &SeededRng::new(9)).unwrap();
        assert_eq!((a.lambda1, a.lambda2), (b.lambda1, b.lambda2));
        let fit = elastic_net(&z, &y, a.lambda1 * 200.0, a.lambda2 * 200.0, &pf).unwrap();
        assert!(fit.coefficients[0] > 1.0);
    }

    fn toy_model(spec: FeatureSpec, p: usize, weights: &[(usize, f64)]) -> ErsModel {
        let terms = feature_terms(p, spec);
        let mut w = vec![0.0; terms.len()];
        for &(i, v) in weights {
            w[i] = v;
        }
        ErsModel {
            feature_spec: spec,
            exposure_names: (1..=p).map(|j| format!("X{j}")).collect(),
            feature_names: vec![],
            terms: terms.clone(),
            exposure_means: vec![0.0; p],
            exposure_sds: vec![1.0; p],
            feature_means: vec![0.0; terms.len()],
            feature_sds: vec![1.0; terms.len()],
            coefficients: w.clone(),
            weights: w,
            confounder_names: vec![],
            confounder_coefficients: vec![],
            intercept: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda1_cv: 0.0,
            relax_steps: 0,
            cv_error: 0.0,
            lambda1_path_max: 0.0,
            selected_features: vec![],
            train_rows: vec![],
            rng: SeededRng::new(0),
        }
    }

    #[test]
    fn ers_formula_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DMatrix::from_fn(10, 3, |_, _| StandardNormal.sample(&mut rng));
        let zero = toy_model(FeatureSpec::MainOnly, 3, &[]);
        assert!(build_ers(&zero, &x, FeatureSpec::MainOnly).unwrap().values.iter().all(|v| *v == 0.0));
        let one = toy_model(FeatureSpec::MainOnly, 3, &[(0, 0.5)]);
        let s = build_ers(&one, &x, FeatureSpec::MainOnly).unwrap();
        for i in 0..10 {
            assert_eq!(s.values[i], 0.5 * x[(i, 0)]);
        }
        // Terms: 3 mains, then (0,0),(0,1),... so index 4 is X1*X2.
        let inter = toy_model(FeatureSpec::MainSquaresPairwise, 3, &[(4, 1.0)]);
        assert_eq!(inter.terms[4], (0, Some(1)));
        let s = build_ers(&inter, &x, FeatureSpec::MainSquaresPairwise).unwrap();
        for i in 0..10 {
            assert_eq!(s.values[i], x[(i, 0)] * x[(i, 1)]);
        }
        assert!(matches!(build_ers(&inter, &x, FeatureSpec::MainOnly), Err(Error::Config(_))));
    }

    #[test]
    fn quantile_rule() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&v, 0.025) - 3.475).abs() < 1e-12);
        assert!((quantile(&v, 0.975) - 97.525).abs() < 1e-12);
    }
}
