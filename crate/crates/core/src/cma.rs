//! Counterfactual mediation effects from three kernel machine regression fits.
//!
//! Per retained iteration: mediator values are drawn from the mediator
//! model's posterior predictive at the reference exposure, the outcome model
//! is evaluated at both exposure levels with those mediator values, and the
//! total-effect model gives the total effect. `NIE = TE − NDE` by construction.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bkmr::{default_selection, kmbayes, BkmrFit, HConditional, KernelConfig, ModelRole};
use crate::data::{Dataset, SeededRng};
use crate::error::{Error, Result};
use crate::ersma::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaConfig {
    /// Comparative exposure levels.
    pub a: Vec<f64>,
    /// Reference exposure levels.
    pub astar: Vec<f64>,
    /// Mediator quantiles at which controlled direct effects are evaluated.
    pub m_quantiles: Vec<f64>,
    /// Explicit mediator values; replaces `m_quantiles` when set.
    pub m_values: Option<Vec<f64>>,
    /// Mediator draws per iteration.
    pub draws: usize,
    /// Retained iterations; the second half of the chain when absent.
    pub sel: Option<Vec<usize>>,
    /// Credible intervals have level `1 − alpha`.
    pub alpha: f64,
    /// Covariate values for prediction; confounder means when absent.
    pub covariates: Option<Vec<f64>>,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            a: vec![],
            astar: vec![],
            m_quantiles: vec![0.1, 0.25, 0.5, 0.75],
            m_values: None,
            draws: 50,
            sel: None,
            alpha: 0.05,
            covariates: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Mean, sd and equal-tailed interval at level `1 − alpha`. Interval ends use
/// linear interpolation between order statistics at `(N−1)·prob`.
pub fn posterior_summary(samples: &[f64], alpha: f64) -> Result<Summary> {
    if samples.is_empty() {
        return Err(Error::Domain("no posterior samples".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = if samples.len() > 1 {
        (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Summary { mean, sd, lo: quantile_sorted(&s, alpha / 2.0), hi: quantile_sorted(&s, 1.0 - alpha / 2.0) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdeSamples {
    pub m: f64,
    pub samples: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEffects {
    pub iterations: Vec<usize>,
    pub te: Vec<f64>,
    pub nde: Vec<f64>,
    pub nie: Vec<f64>,
    pub cde: Vec<CdeSamples>,
    pub te_summary: Summary,
    pub nde_summary: Summary,
    pub nie_summary: Summary,
    pub alpha: f64,
}

impl PosteriorEffects {
    /// Rows of (effect, mean, lo, hi) for a forest plot.
    pub fn forest_table(&self) -> Vec<(String, f64, f64, f64)> {
        let mut rows = vec![
            ("TE".to_string(), self.te_summary),
            ("NDE".to_string(), self.nde_summary),
            ("NIE".to_string(), self.nie_summary),
        ];
        for c in &self.cde {
            rows.push((format!("CDE(m={})", c.m), c.summary));
        }
        rows.into_iter().map(|(k, s)| (k, s.mean, s.lo, s.hi)).collect()
    }
}

fn check_fits(fit_m: &BkmrFit, fit_y: &BkmrFit, fit_te: &BkmrFit, p: usize) -> Result<()> {
    for (fit, role) in [(fit_m, ModelRole::Mediator), (fit_y, ModelRole::Outcome), (fit_te, ModelRole::TotalEffect)] {
        if fit.role != role {
            return Err(Error::Config(format!("expected a {role:?} fit, got {:?}", fit.role)));
        }
        if fit.x_names != fit_m.x_names || fit.config.intercept != fit_m.config.intercept {
            return Err(Error::Config("fits do not share the same confounders".into()));
        }
    }
    if fit_m.z.ncols() != p || fit_te.z.ncols() != p || fit_y.z.ncols() != p + 1 {
        return Err(Error::Config(format!(
            "kernel inputs: mediator {}, outcome {}, total effect {}; expected {p}, {} and {p}",
            fit_m.z.ncols(),
            fit_y.z.ncols(),
            fit_te.z.ncols(),
            p + 1
        )));
    }
    Ok(())
}

/// Posterior samples of TE, NDE, NIE and CDEs for the contrast `astar → a`.
///
/// `fit_y` must use the exposures followed by the mediator as kernel inputs.
pub fn mediation_bkmr(
    fit_m: &BkmrFit,
    fit_y: &BkmrFit,
    fit_te: &BkmrFit,
    config: &CmaConfig,
    rng: &SeededRng,
) -> Result<PosteriorEffects> {
    let p = config.a.len();
    if p == 0 || config.astar.len() != p {
        return Err(Error::Config(format!(
            "contrast lengths {} and {} must match and be nonzero",
            config.a.len(),
            config.astar.len()
        )));
    }
    check_fits(fit_m, fit_y, fit_te, p)?;
    if config.draws == 0 {
        return Err(Error::Config("at least one mediator draw per iteration is required".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    let len = fit_m.chain.len().min(fit_y.chain.len()).min(fit_te.chain.len());
    let sel = config.sel.clone().unwrap_or_else(|| default_selection(len));
    if sel.is_empty() {
        return Err(Error::Domain("no retained iterations".into()));
    }
    if let Some(&bad) = sel.iter().find(|&&j| j >= len) {
        return Err(Error::Domain(format!("iteration {bad} outside chains of length {len}")));
    }
    let covariates = match &config.covariates {
        Some(c) if c.len() == fit_m.x.ncols() => c.clone(),
        Some(c) => {
            return Err(Error::Config(format!(
                "covariate profile has {} values for {} confounders",
                c.len(),
                fit_m.x.ncols()
            )))
        }
        None => fit_m.covariate_means(),
    };
    let m_levels = match &config.m_values {
        Some(v) => v.clone(),
        None => {
            if let Some(q) = config.m_quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
                return Err(Error::Config(format!("mediator quantile {q} outside (0, 1)")));
            }
            let mut m: Vec<f64> = fit_y.z.column(p).iter().copied().collect();
            m.sort_by(f64::total_cmp);
            config.m_quantiles.iter().map(|&q| quantile_sorted(&m, q)).collect()
        }
    };

    let k = config.draws;
    let astar_row = DMatrix::from_row_slice(1, p, &config.astar);
    let te_points = DMatrix::from_fn(2, p, |i, c| if i == 0 { config.a[c] } else { config.astar[c] });

    let per_iter: Vec<(f64, f64, Vec<f64>)> = sel
        .par_iter()
        .map(|&j| {
            let mut draw_rng = rng.substream(j as u64).rng();
            let cm = HConditional::new(fit_m, j)?;
            let (mu, var) = cm.mean_var(&astar_row)?[0];
            let center = mu + fit_m.fixed_effect(j, &covariates);
            let sd = (var + cm.sigsq()).sqrt();
            let mediators: Vec<f64> = (0..k)
                .map(|_| {
                    let xi: f64 = StandardNormal.sample(&mut draw_rng);
                    center + sd * xi
                })
                .collect();

            // Rows: (a, m_k) for all k, then (astar, m_k), then the CDE pairs.
            let levels = mediators.iter().chain(&m_levels).copied().collect::<Vec<_>>();
            let rows = 2 * levels.len();
            let points = DMatrix::from_fn(rows, p + 1, |i, c| {
                let (exposure, level) = if i % 2 == 0 { (&config.a, i / 2) } else { (&config.astar, i / 2) };
                if c < p {
                    exposure[c]
                } else {
                    levels[level]
                }
            });
            let hy = HConditional::new(fit_y, j)?.mean(&points)?;
            let nde = (0..k).map(|i| hy[2 * i] - hy[2 * i + 1]).sum::<f64>() / k as f64;
            let cde = (k..levels.len()).map(|i| hy[2 * i] - hy[2 * i + 1]).collect();
            let hte = HConditional::new(fit_te, j)?.mean(&te_points)?;
            Ok((hte[0] - hte[1], nde, cde))
        })
        .collect::<Result<_>>()?;

    let te: Vec<f64> = per_iter.iter().map(|v| v.0).collect();
    let nde: Vec<f64> = per_iter.iter().map(|v| v.1).collect();
    let nie: Vec<f64> = te.iter().zip(&nde).map(|(t, d)| t - d).collect();
    let cde = m_levels
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let samples: Vec<f64> = per_iter.iter().map(|v| v.2[i]).collect();
            Ok(CdeSamples { m, summary: posterior_summary(&samples, config.alpha)?, samples })
        })
        .collect::<Result<_>>()?;
    Ok(PosteriorEffects {
        te_summary: posterior_summary(&te, config.alpha)?,
        nde_summary: posterior_summary(&nde, config.alpha)?,
        nie_summary: posterior_summary(&nie, config.alpha)?,
        iterations: sel,
        te,
        nde,
        nie,
        cde,
        alpha: config.alpha,
    })
}

/// Mediator, outcome and total-effect fits for a dataset, run in parallel on
/// independent streams. The outcome model's kernel inputs are the exposures
/// followed by the mediator; group labels, if any, get a fresh label for it.
pub fn fit_models(data: &Dataset, config: &KernelConfig, rng: &SeededRng) -> Result<[BkmrFit; 3]> {
    let p = data.p();
    let x = data.confounders();
    let x_names = data.confounder_names();
    let z = data.exposures();
    let z_names = data.exposure_names();
    let mut zy = DMatrix::zeros(data.n(), p + 1);
    zy.columns_mut(0, p).copy_from(z);
    zy.set_column(p, data.mediator());
    let mut zy_names = z_names.to_vec();
    zy_names.push(data.mediator_name().to_string());
    let mut cfg_y = config.clone();
    if let Some(g) = &mut cfg_y.groups {
        let fresh = g.iter().max().map_or(0, |m| m + 1);
        g.push(fresh);
    }
    let (fm, (fy, ft)) = rayon::join(
        || kmbayes(ModelRole::Mediator, data.mediator(), z, z_names, x, x_names, config, &rng.substream(0)),
        || {
            rayon::join(
                || kmbayes(ModelRole::Outcome, data.outcome(), &zy, &zy_names, x, x_names, &cfg_y, &rng.substream(1)),
                || kmbayes(ModelRole::TotalEffect, data.outcome(), z, z_names, x, x_names, config, &rng.substream(2)),
            )
        },
    );
    Ok([fm?, fy?, ft?])
}
