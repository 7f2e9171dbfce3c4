//! Simulation study: block-correlated exposure mixtures, R²-calibrated noise,
//! large-sample reference truths and replicate-level metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bkmr::{cluster_groups, correlation, default_selection, extract_pips, kmbayes, KernelConfig, ModelRole};
use crate::data::{Dataset, SeededRng};
use crate::error::{Error, Result};
use crate::ersma::{ersma, ErsContrast, ErsmaOptions, FeatureSpec};
use crate::mediate::{sema, SemaOptions};
use crate::pcma::{pcma, PcmaOptions, RetentionRule};

/// One data-generating configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub n: usize,
    pub r2_m: f64,
    pub r2_y: f64,
    pub block_sizes: Vec<usize>,
    pub block_corr: Vec<f64>,
    pub confounders: usize,
    pub confounder_corr: f64,
    /// Every entry of the confounder → exposure coefficient matrix.
    pub theta_c: f64,
    pub alpha_x: Vec<f64>,
    pub beta_x: Vec<f64>,
    pub beta_m: f64,
    pub alpha_c: f64,
    pub beta_c: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::standard(1000, 0.1)
    }
}

impl Scenario {
    /// Thirty exposures in blocks of 5/10/15, five confounders.
    pub fn standard(n: usize, r2_m: f64) -> Scenario {
        let p = 30;
        let alpha_x = (0..p)
            .map(|j| match j % 10 {
                0 => 0.3,
                1 => 0.6,
                2 => 0.9,
                _ => 0.0,
            })
            .collect();
        let beta_x = (0..p).map(|j| if j % 3 == 0 { 0.3 } else { 0.0 }).collect();
        Scenario {
            n,
            r2_m,
            r2_y: 0.3,
            block_sizes: vec![5, 10, 15],
            block_corr: vec![0.4, 0.8, 0.1],
            confounders: 5,
            confounder_corr: 0.2,
            theta_c: 0.1,
            alpha_x,
            beta_x,
            beta_m: 0.4,
            alpha_c: 1.0,
            beta_c: 1.0,
        }
    }

    /// n ∈ {1000, 2500} × R²_M ∈ {0.1, 0.4}.
    pub fn grid() -> Vec<Scenario> {
        let mut out = Vec::new();
        for n in [1000, 2500] {
            for r2 in [0.1, 0.4] {
                out.push(Scenario::standard(n, r2));
            }
        }
        out
    }

    pub fn p(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn label(&self) -> String {
        format!("n{}_r2m{}", self.n, self.r2_m)
    }

    pub fn with_n(&self, n: usize) -> Scenario {
        Scenario { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p == 0 || self.confounders == 0 {
            return Err(Error::Config("scenario needs at least one exposure and one confounder".into()));
        }
        if self.block_sizes.len() != self.block_corr.len() {
            return Err(Error::Config("block_sizes and block_corr differ in length".into()));
        }
        if self.alpha_x.len() != p || self.beta_x.len() != p {
            return Err(Error::Config(format!("coefficient patterns must have {p} entries")));
        }
        for (&size, &r) in self.block_sizes.iter().zip(&self.block_corr) {
            // Equicorrelation is PSD iff −1/(k−1) ≤ ρ ≤ 1.
            let lower = if size > 1 { -1.0 / (size as f64 - 1.0) } else { -1.0 };
            if !(r >= lower && r < 1.0) {
                return Err(Error::Config(format!("block correlation {r} is not valid for a block of {size}")));
            }
        }
        let k = self.confounders as f64;
        if !(self.confounder_corr < 1.0 && (k == 1.0 || self.confounder_corr >= -1.0 / (k - 1.0))) {
            return Err(Error::Config(format!("confounder correlation {} is not valid", self.confounder_corr)));
        }
        for r2 in [self.r2_m, self.r2_y] {
            if !(r2 > 0.0 && r2 < 1.0) {
                return Err(Error::Config(format!("target R² {r2} outside (0, 1)")));
            }
        }
        if self.n < 10 {
            return Err(Error::Config(format!("scenario n = {} is below 10", self.n)));
        }
        Ok(())
    }

    /// Conditional covariance of the exposures given the confounders.
    pub fn exposure_cov(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut sigma = DMatrix::identity(p, p);
        let mut start = 0;
        for (&size, &r) in self.block_sizes.iter().zip(&self.block_corr) {
            for i in start..start + size {
                for j in start..start + size {
                    if i != j {
                        sigma[(i, j)] = r;
                    }
                }
            }
            start += size;
        }
        sigma
    }

    pub fn confounder_cov(&self) -> DMatrix<f64> {
        let s = self.confounders;
        DMatrix::from_fn(s, s, |i, j| if i == j { 1.0 } else { self.confounder_corr })
    }

    /// s×p coefficient matrix of X on C.
    pub fn theta(&self) -> DMatrix<f64> {
        DMatrix::from_element(self.confounders, self.p(), self.theta_c)
    }

    /// Var(aᵀX + bᵀC) = aᵀΣ_X a + (Θa + b)ᵀΣ_C(Θa + b).
    pub fn linear_variance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let sx = self.exposure_cov();
        let sc = self.confounder_cov();
        let w = self.theta() * a + b;
        (a.transpose() * sx * a)[(0, 0)] + (w.transpose() * sc * &w)[(0, 0)]
    }

    pub fn mediator_linpred_variance(&self) -> f64 {
        let a = DVector::from_column_slice(&self.alpha_x);
        let b = DVector::from_element(self.confounders, self.alpha_c);
        self.linear_variance(&a, &b)
    }

    /// Variance of Mβ_m + Xβ_x + Cβ_c, including the mediator's own noise.
    pub fn outcome_linpred_variance(&self) -> Result<f64> {
        let (sm2, _) = self.mediator_noise()?;
        let a = DVector::from_fn(self.p(), |j, _| self.beta_m * self.alpha_x[j] + self.beta_x[j]);
        let b = DVector::from_element(self.confounders, self.beta_m * self.alpha_c + self.beta_c);
        Ok(self.linear_variance(&a, &b) + self.beta_m.powi(2) * sm2)
    }

    fn mediator_noise(&self) -> Result<(f64, f64)> {
        let v = self.mediator_linpred_variance();
        Ok((noise_or_unit(v, self.r2_m)?, v))
    }

    /// (σ_m², σ_e²).
    pub fn noise_variances(&self) -> Result<(f64, f64)> {
        let (sm2, _) = self.mediator_noise()?;
        let se2 = noise_or_unit(self.outcome_linpred_variance()?, self.r2_y)?;
        Ok((sm2, se2))
    }

    /// Exposures with a nonzero exposure → mediator path (and β_m ≠ 0).
    pub fn active(&self) -> Vec<bool> {
        self.alpha_x.iter().map(|&a| a != 0.0 && self.beta_m != 0.0).collect()
    }

    pub fn exposure_names(&self) -> Vec<String> {
        (1..=self.p()).map(|j| format!("X{j}")).collect()
    }
}

/// A degenerate all-zero linear predictor leaves pure unit-variance noise.
fn noise_or_unit(var: f64, r2: f64) -> Result<f64> {
    if var == 0.0 {
        Ok(1.0)
    } else {
        solve_sigma_for_r2(var, r2)
    }
}

/// Noise variance giving population R² = `target_r2` for a linear predictor
/// with variance `linpred_variance`.
pub fn solve_sigma_for_r2(linpred_variance: f64, target_r2: f64) -> Result<f64> {
    if !(linpred_variance > 0.0 && linpred_variance.is_finite()) {
        return Err(Error::Domain(format!("linear predictor variance {linpred_variance} must be positive")));
    }
    if !(target_r2 > 0.0 && target_r2 < 1.0) {
        return Err(Error::Domain(format!("target R² {target_r2} outside (0, 1)")));
    }
    Ok(linpred_variance * (1.0 - target_r2) / target_r2)
}

fn lower_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Config("scenario covariance is not positive definite".into()))
}

/// One draw of a dataset of `scenario.n` rows.
pub fn generate_dataset(scenario: &Scenario, rng: &SeededRng) -> Result<Dataset> {
    scenario.validate()?;
    let (n, p, s) = (scenario.n, scenario.p(), scenario.confounders);
    let (sm2, se2) = scenario.noise_variances()?;
    let lc = lower_factor(&scenario.confounder_cov())?;
    let lx = lower_factor(&scenario.exposure_cov())?;
    let mut g = rng.rng();
    let mut draw = |rows: usize, cols: usize| -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut g))
    };
    let c = draw(n, s) * lc.transpose();
    let x = &c * scenario.theta() + draw(n, p) * lx.transpose();
    let em = draw(n, 1);
    let ey = draw(n, 1);
    let alpha = DVector::from_column_slice(&scenario.alpha_x);
    let beta = DVector::from_column_slice(&scenario.beta_x);
    let csum = DVector::from_fn(n, |i, _| c.row(i).sum());
    let m = &x * alpha + &csum * scenario.alpha_c + em.column(0) * sm2.sqrt();
    let y = &m * scenario.beta_m + &x * beta + &csum * scenario.beta_c + ey.column(0) * se2.sqrt();
    Dataset::with_names(
        x,
        m,
        y,
        c,
        scenario.exposure_names(),
        (1..=s).map(|j| format!("C{j}")).collect(),
        "M".into(),
        "Y".into(),
    )
}

/// A pipeline evaluated in the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Method {
    SemaUnadjusted,
    SemaAdjusted,
    Pcma { rule: RetentionRule },
    Ersma,
    Bkmr { hierarchical: bool },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::SemaUnadjusted => "sema_unadjusted".into(),
            Method::SemaAdjusted => "sema_adjusted".into(),
            Method::Pcma { rule } => match rule {
                RetentionRule::FirstK(k) => format!("pcma_first{k}"),
                RetentionRule::CumVariance(t) => format!("pcma_cum{t}"),
                RetentionRule::Kaiser => "pcma_kaiser".into(),
            },
            Method::Ersma => "ersma_main".into(),
            Method::Bkmr { hierarchical: false } => "bkmr_componentwise".into(),
            Method::Bkmr { hierarchical: true } => "bkmr_hierarchical".into(),
        }
    }

    /// Inverse of [`Method::label`].
    pub fn from_label(label: &str) -> Result<Method> {
        let bad = || Error::Config(format!("unknown study method '{label}'"));
        Ok(match label {
            "sema_unadjusted" => Method::SemaUnadjusted,
            "sema_adjusted" => Method::SemaAdjusted,
            "ersma_main" => Method::Ersma,
            "pcma_kaiser" => Method::Pcma { rule: RetentionRule::Kaiser },
            "bkmr_componentwise" => Method::Bkmr { hierarchical: false },
            "bkmr_hierarchical" => Method::Bkmr { hierarchical: true },
            other => {
                if let Some(k) = other.strip_prefix("pcma_first") {
                    Method::Pcma { rule: RetentionRule::FirstK(k.parse().map_err(|_| bad())?) }
                } else if let Some(t) = other.strip_prefix("pcma_cum") {
                    Method::Pcma { rule: RetentionRule::CumVariance(t.parse().map_err(|_| bad())?) }
                } else {
                    return Err(bad());
                }
            }
        })
    }

    fn is_bkmr(&self) -> bool {
        matches!(self, Method::Bkmr { .. })
    }

    /// The linear pipelines: both SE-MA regimes, first-PC PC-MA and main-effect ERS-MA.
    pub fn linear() -> Vec<Method> {
        vec![
            Method::SemaUnadjusted,
            Method::SemaAdjusted,
            Method::Pcma { rule: RetentionRule::FirstK(1) },
            Method::Ersma,
        ]
    }
}

/// Global NIE for a joint unit shift; for BKMR only the selection flags are used.
struct MethodOutput {
    nie: Option<f64>,
    flags: Vec<(Option<f64>, Vec<bool>)>,
}

fn ers_options(p: usize) -> ErsmaOptions {
    ErsmaOptions {
        feature_spec: FeatureSpec::MainOnly,
        contrast: ErsContrast::ExposureShift { reference: vec![0.0; p], comparative: vec![1.0; p] },
        ..ErsmaOptions::default()
    }
}

fn run_linear(method: &Method, data: &Dataset, fdr: f64, rng: &SeededRng) -> Result<MethodOutput> {
    Ok(match method {
        Method::SemaUnadjusted | Method::SemaAdjusted => {
            let r = sema(
                data,
                &SemaOptions {
                    adjust_coexposures: *method == Method::SemaAdjusted,
                    fdr_level: fdr,
                    ..SemaOptions::default()
                },
            )?;
            MethodOutput { nie: Some(r.global.nie.estimate), flags: vec![(None, r.active)] }
        }
        Method::Pcma { rule } => {
            let r = pcma(data, &PcmaOptions { rule: *rule, ..PcmaOptions::default() })?;
            MethodOutput { nie: Some(r.global.nie.estimate), flags: Vec::new() }
        }
        Method::Ersma => {
            let r = ersma(data, &ers_options(data.p()), rng)?;
            MethodOutput { nie: Some(r.effects.nie.estimate), flags: Vec::new() }
        }
        Method::Bkmr { .. } => unreachable!("BKMR is run through run_bkmr"),
    })
}

/// Reference-dataset truth for a method under a scenario.
///
/// SE-MA uses β_m·Σα_x; PC-MA and ERS-MA run the same pipeline once on a
/// `reference_n`-row draw from `rng`. No mediation path means a zero truth.
pub fn true_global_nie(scenario: &Scenario, method: &Method, reference_n: usize, rng: &SeededRng) -> Result<f64> {
    if scenario.beta_m == 0.0 || scenario.alpha_x.iter().all(|&a| a == 0.0) {
        return Ok(0.0);
    }
    match method {
        Method::SemaUnadjusted | Method::SemaAdjusted => Ok(scenario.beta_m * scenario.alpha_x.iter().sum::<f64>()),
        Method::Pcma { .. } | Method::Ersma => {
            let data = generate_dataset(&scenario.with_n(reference_n), &rng.substream(0))?;
            let out = run_linear(method, &data, 0.05, &rng.substream(1))?;
            Ok(out.nie.expect("linear pipelines report a global NIE"))
        }
        Method::Bkmr { .. } => Err(Error::Config("BKMR has no global-NIE truth in the study".into())),
    }
}

/// Reference truths keyed by (scenario, method, reference size, stream).
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct TruthCache {
    entries: BTreeMap<String, f64>,
}

impl TruthCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(scenario: &Scenario, method: &Method, reference_n: usize, rng: &SeededRng) -> Result<String> {
        let scen = serde_json::to_string(&scenario.with_n(0)).map_err(|e| Error::Numerical(e.to_string()))?;
        let meth = serde_json::to_string(method).map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(format!("{scen}|{meth}|{reference_n}|{}:{}", rng.seed, rng.stream))
    }

    pub fn get_or_compute(
        &mut self,
        scenario: &Scenario,
        method: &Method,
        reference_n: usize,
        rng: &SeededRng,
    ) -> Result<f64> {
        let key = Self::key(scenario, method, reference_n, rng)?;
        if let Some(v) = self.entries.get(&key) {
            return Ok(*v);
        }
        let v = true_global_nie(scenario, method, reference_n, rng)?;
        self.entries.insert(key, v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Settings for the (expensive) BKMR arm of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BkmrStudy {
    /// Replicates per scenario that also run BKMR (the first ones).
    pub replicates: usize,
    /// Rows used for the fit (leading rows of each replicate); `None` keeps all.
    pub subsample: Option<usize>,
    pub iterations: usize,
    pub thresholds: Vec<f64>,
    /// Clusters for hierarchical grouping.
    pub groups: usize,
}

impl Default for BkmrStudy {
    fn default() -> Self {
        BkmrStudy { replicates: 2, subsample: Some(300), iterations: 1000, thresholds: vec![0.1, 0.3, 0.5], groups: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub seed: u64,
    pub reference_n: usize,
    pub fdr_level: f64,
    pub bkmr: BkmrStudy,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            scenarios: Scenario::grid(),
            methods: Method::linear(),
            replicates: 20,
            seed: 1,
            reference_n: 100_000,
            fdr_level: 0.05,
            bkmr: BkmrStudy::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("study needs at least one replicate".into()));
        }
        if self.scenarios.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("study needs at least one scenario and one method".into()));
        }
        for s in &self.scenarios {
            s.validate()?;
        }
        if !(self.fdr_level > 0.0 && self.fdr_level <= 1.0) {
            return Err(Error::Config(format!("fdr level {} outside (0, 1]", self.fdr_level)));
        }
        if self.reference_n < 100 {
            return Err(Error::Config("reference_n must be at least 100".into()));
        }
        if self.methods.iter().any(Method::is_bkmr) {
            let b = &self.bkmr;
            if b.thresholds.is_empty() || b.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
                return Err(Error::Config("BKMR thresholds must lie in (0, 1)".into()));
            }
            if b.subsample.is_some_and(|m| m < 20) {
                return Err(Error::Config("BKMR subsample must be at least 20 rows".into()));
            }
            if b.groups == 0 {
                return Err(Error::Config("BKMR groups must be positive".into()));
            }
            KernelConfig { iterations: b.iterations, ..KernelConfig::default() }.validate(self.scenarios[0].p())?;
        }
        for m in &self.methods {
            if let Method::Pcma { rule } = m {
                for s in &self.scenarios {
                    rule.validate(s.p())?;
                }
            }
        }
        Ok(())
    }
}

/// Signed relative bias in percent; undefined for a zero truth.
pub fn relative_bias(estimate: f64, truth: f64) -> Option<f64> {
    (truth != 0.0).then(|| (estimate - truth) / truth * 100.0)
}

/// (TPR, FPR); a rate with an empty denominator is `None`.
pub fn detection_rates(flags: &[bool], active: &[bool]) -> (Option<f64>, Option<f64>) {
    let pos = active.iter().filter(|a| **a).count();
    let neg = active.len() - pos;
    let tp = flags.iter().zip(active).filter(|(f, a)| **f && **a).count();
    let fp = flags.iter().zip(active).filter(|(f, a)| **f && !**a).count();
    let rate = |k: usize, d: usize| (d > 0).then(|| k as f64 / d as f64);
    (rate(tp, pos), rate(fp, neg))
}

/// Mean and sample sd.
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: String,
    pub method: String,
    pub replicate: usize,
    pub data_stream: u64,
    pub method_stream: u64,
    pub threshold: Option<f64>,
    pub estimate: Option<f64>,
    pub truth: Option<f64>,
    pub relative_bias: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub n: usize,
    pub r2_m: f64,
    pub method: String,
    pub threshold: Option<f64>,
    pub replicates: usize,
    pub failures: usize,
    pub truth: Option<f64>,
    pub rel_bias_mean: Option<f64>,
    pub rel_bias_sd: Option<f64>,
    /// Absolute value of the mean signed relative bias.
    pub rel_bias_abs: Option<f64>,
    pub tpr_mean: Option<f64>,
    pub tpr_sd: Option<f64>,
    pub fpr_mean: Option<f64>,
    pub fpr_sd: Option<f64>,
    /// Fewer BKMR replicates or rows than the linear pipelines.
    pub desk_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub scenario: String,
    pub method: String,
    pub value: f64,
    pub reference_seed: u64,
    pub reference_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: StudyConfig,
    pub truths: Vec<TruthRecord>,
    pub rows: Vec<MetricRow>,
    pub replicates: Vec<ReplicateRecord>,
}

impl MetricsReport {
    pub fn row(&self, scenario: &str, method: &str, threshold: Option<f64>) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.method == method && r.threshold == threshold)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(format!("report serialization: {e}")))
    }

    pub fn write_rows_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_csv(writer, &self.rows)
    }

    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_csv(writer, &self.replicates)
    }
}

fn write_csv<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Streams: data for (scenario s, replicate r) is `root/0/s/r`; a method's own
/// randomness is `root/1/s/r/m`; references are `root/2/s`.
pub fn data_stream(root: &SeededRng, scenario: usize, replicate: usize) -> SeededRng {
    root.substream(0).substream(scenario as u64).substream(replicate as u64)
}

pub fn method_stream(root: &SeededRng, scenario: usize, replicate: usize, method: usize) -> SeededRng {
    root.substream(1).substream(scenario as u64).substream(replicate as u64).substream(method as u64)
}

pub fn reference_stream(root: &SeededRng, scenario: usize) -> SeededRng {
    root.substream(2).substream(scenario as u64)
}

fn run_bkmr(method: &Method, data: &Dataset, cfg: &BkmrStudy, rng: &SeededRng) -> Result<MethodOutput> {
    let Method::Bkmr { hierarchical } = method else { unreachable!() };
    let rows: Vec<usize> = (0..cfg.subsample.map_or(data.n(), |m| m.min(data.n()))).collect();
    let d = data.subset(&rows);
    let groups =
        if *hierarchical { Some(cluster_groups(&correlation(d.exposures())?, cfg.groups.min(d.p()))?) } else { None };
    let kc = KernelConfig { iterations: cfg.iterations, groups, ..KernelConfig::default() };
    let fit = kmbayes(
        ModelRole::Mediator,
        d.mediator(),
        d.exposures(),
        d.exposure_names(),
        d.confounders(),
        d.confounder_names(),
        &kc,
        rng,
    )?;
    let pips = extract_pips(&fit, &default_selection(fit.chain.len()))?;
    let flags = cfg.thresholds.iter().map(|&t| (Some(t), pips.pip.iter().map(|&v| v > t).collect())).collect();
    Ok(MethodOutput { nie: None, flags })
}

/// Runs every (scenario, replicate, method) cell and aggregates.
pub fn run_study(config: &StudyConfig, rng: &SeededRng) -> Result<MetricsReport> {
    config.validate()?;
    let mut cache = TruthCache::new();
    let mut truths = Vec::new();
    let mut truth_of: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (si, scen) in config.scenarios.iter().enumerate() {
        let stream = reference_stream(rng, si);
        for (mi, m) in config.methods.iter().enumerate() {
            if m.is_bkmr() {
                continue;
            }
            let v = cache.get_or_compute(scen, m, config.reference_n, &stream)?;
            truth_of.insert((si, mi), v);
            truths.push(TruthRecord {
                scenario: scen.label(),
                method: m.label(),
                value: v,
                reference_seed: stream.seed,
                reference_stream: stream.stream,
            });
        }
    }

    let cells: Vec<(usize, usize)> =
        (0..config.scenarios.len()).flat_map(|s| (0..config.replicates).map(move |r| (s, r))).collect();
    let done = Mutex::new(0usize);
    let per_cell: Vec<Vec<ReplicateRecord>> = cells
        .par_iter()
        .map(|&(si, r)| {
            let out = replicate_records(config, rng, &truth_of, si, r);
            let mut k = done.lock().unwrap_or_else(|e| e.into_inner());
            *k += 1;
            log::debug!("study cell {}/{} done", *k, cells.len());
            out
        })
        .collect::<Result<_>>()?;
    let replicates: Vec<ReplicateRecord> = per_cell.into_iter().flatten().collect();
    let rows = aggregate(config, &replicates);
    Ok(MetricsReport { config: config.clone(), truths, rows, replicates })
}

fn replicate_records(
    config: &StudyConfig,
    rng: &SeededRng,
    truths: &BTreeMap<(usize, usize), f64>,
    si: usize,
    r: usize,
) -> Result<Vec<ReplicateRecord>> {
    let scen = &config.scenarios[si];
    let ds = data_stream(rng, si, r);
    let data = generate_dataset(scen, &ds)?;
    let active = scen.active();
    let mut out = Vec::new();
    for (mi, m) in config.methods.iter().enumerate() {
        if m.is_bkmr() && r >= config.bkmr.replicates {
            continue;
        }
        let ms = method_stream(rng, si, r, mi);
        let truth = truths.get(&(si, mi)).copied();
        let base = ReplicateRecord {
            scenario: scen.label(),
            method: m.label(),
            replicate: r,
            data_stream: ds.stream,
            method_stream: ms.stream,
            threshold: None,
            estimate: None,
            truth,
            relative_bias: None,
            tpr: None,
            fpr: None,
            error: None,
        };
        let result = if m.is_bkmr() {
            run_bkmr(m, &data, &config.bkmr, &ms)
        } else {
            run_linear(m, &data, config.fdr_level, &ms)
        };
        match result {
            Err(e) => {
                let thresholds: Vec<Option<f64>> =
                    if m.is_bkmr() { config.bkmr.thresholds.iter().map(|t| Some(*t)).collect() } else { vec![None] };
                for t in thresholds {
                    out.push(ReplicateRecord { threshold: t, error: Some(e.to_string()), ..base.clone() });
                }
            }
            Ok(o) => {
                let flags = if o.flags.is_empty() { vec![(None, Vec::new())] } else { o.flags };
                for (t, f) in flags {
                    let (tpr, fpr) = if f.is_empty() { (None, None) } else { detection_rates(&f, &active) };
                    out.push(ReplicateRecord {
                        threshold: t,
                        estimate: o.nie,
                        relative_bias: o.nie.zip(truth).and_then(|(e, t)| relative_bias(e, t)),
                        tpr,
                        fpr,
                        ..base.clone()
                    });
                }
            }
        }
    }
    Ok(out)
}

fn aggregate(config: &StudyConfig, records: &[ReplicateRecord]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for scen in &config.scenarios {
        let label = scen.label();
        for m in &config.methods {
            let ml = m.label();
            let thresholds: Vec<Option<f64>> =
                if m.is_bkmr() { config.bkmr.thresholds.iter().map(|t| Some(*t)).collect() } else { vec![None] };
            for t in thresholds {
                let cell: Vec<&ReplicateRecord> =
                    records.iter().filter(|r| r.scenario == label && r.method == ml && r.threshold == t).collect();
                let ok: Vec<&&ReplicateRecord> = cell.iter().filter(|r| r.error.is_none()).collect();
                let collect =
                    |f: fn(&ReplicateRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
                let (bm, bs) = mean_sd(&collect(|r| r.relative_bias));
                let (tm, ts) = mean_sd(&collect(|r| r.tpr));
                let (fm, fs) = mean_sd(&collect(|r| r.fpr));
                let desk = m.is_bkmr()
                    && (config.bkmr.replicates < config.replicates
                        || config.bkmr.subsample.is_some_and(|k| k < scen.n));
                rows.push(MetricRow {
                    scenario: label.clone(),
                    n: scen.n,
                    r2_m: scen.r2_m,
                    method: ml.clone(),
                    threshold: t,
                    replicates: cell.len(),
                    failures: cell.len() - ok.len(),
                    truth: cell.first().and_then(|r| r.truth),
                    rel_bias_mean: bm,
                    rel_bias_sd: bs,
                    rel_bias_abs: bm.map(f64::abs),
                    tpr_mean: tm,
                    tpr_sd: ts,
                    fpr_mean: fm,
                    fpr_sd: fs,
                    desk_scale: desk,
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_closed_form() {
        assert_eq!(solve_sigma_for_r2(1.0, 0.5).unwrap(), 1.0);
        assert!(solve_sigma_for_r2(2.0, 1.0 - 1e-12).unwrap() < 1e-11);
        assert!(solve_sigma_for_r2(0.0, 0.5).is_err());
        assert!(solve_sigma_for_r2(1.0, 1.0).is_err());
        assert!(solve_sigma_for_r2(1.0, 0.0).is_err());
    }

    #[test]
    fn patterns_and_active_set() {
        let s = Scenario::standard(1000, 0.4);
        assert_eq!(s.p(), 30);
        assert_eq!(s.alpha_x.iter().filter(|a| **a != 0.0).count(), 9);
        assert_eq!(s.beta_x.iter().filter(|b| **b != 0.0).count(), 10);
        let act = s.active();
        assert_eq!(act.iter().filter(|a| **a).count(), 9);
        assert_eq!(act.iter().filter(|a| !**a).count(), 21);
        s.validate().unwrap();
        assert_eq!(Scenario::grid().len(), 4);
    }

    #[test]
    fn method_labels_round_trip() {
        let mut all = Method::linear();
        all.push(Method::Pcma { rule: RetentionRule::CumVariance(0.8) });
        all.push(Method::Pcma { rule: RetentionRule::Kaiser });
        all.push(Method::Bkmr { hierarchical: true });
        all.push(Method::Bkmr { hierarchical: false });
        for m in all {
            assert_eq!(Method::from_label(&m.label()).unwrap(), m);
        }
        assert!(Method::from_label("pcma_firstx").is_err());
        assert!(Method::from_label("lasso").is_err());
    }

    #[test]
    fn linear_variance_by_hand() {
        // One exposure, one confounder: Var(aX + bC) with X = θC + e.
        let s = Scenario {
            block_sizes: vec![1],
            block_corr: vec![0.0],
            confounders: 1,
            theta_c: 0.5,
            alpha_x: vec![2.0],
            beta_x: vec![0.0],
            ..Scenario::standard(100, 0.5)
        };
        let v = s.linear_variance(&DVector::from_vec(vec![2.0]), &DVector::from_vec(vec![1.0]));
        // 4·1 + (0.5·2 + 1)² = 8
        assert!((v - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rates_and_bias() {
        let active = [true, true, false, false, false];
        let (t, f) = detection_rates(&[true, false, true, false, false], &active);
        assert_eq!(t, Some(0.5));
        assert!((f.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(relative_bias(3.0, 2.0), Some(50.0));
        assert_eq!(relative_bias(1.0, 0.0), None);
        assert_eq!(mean_sd(&[1.0, 3.0]), (Some(2.0), Some(2f64.sqrt())));
    }
}
