//! One function per subcommand: load inputs, run the pipeline, collect artifacts.

use std::path::Path;

use mixmed::bkmr::{cluster_groups, correlation, default_selection, extract_pips, BkmrFit, PipTable};
use mixmed::cma::{fit_models, mediation_bkmr, PosteriorEffects};
use mixmed::data::{load_dataset, Dataset, LoadReport, SeededRng};
use mixmed::ersma::{ersma, quantile, ErsModel, ErsmaOptions};
use mixmed::mediate::{sema, Contrast, ContrastRule, GlobalEffects, MediationEffects, SemaOptions, SemaResult};
use mixmed::pcma::{pcma, scree_table, PcmaOptions};
use mixmed::sim::{run_study, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::artifact::{num, opt, Artifacts};
use crate::config::{
    parse_ers_contrast, parse_features, parse_rule, BkmrSection, CmaSection, DataSection, ErsmaSection, InputFile,
    PcmaSection, ReportSection, Resolved, SemaSection, SimulateSection,
};
use crate::error::{CliError, CliResult};

fn load(data: &DataSection) -> CliResult<(LoadReport, InputFile)> {
    let path = data.require_path()?;
    data.schema().validate()?;
    let input = InputFile::new("data", path)?;
    let report = load_dataset(path, &data.schema())?;
    if report.dropped_rows > 0 {
        log::warn!("dropped {} rows with missing values", report.dropped_rows);
    }
    Ok((report, input))
}

fn check_level(level: f64) -> CliResult<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("interval level {level} outside (0, 1)")))
    }
}

const EFFECT_HEADER: [&str; 15] = [
    "label",
    "method",
    "reference",
    "comparative",
    "te",
    "te_lo",
    "te_hi",
    "nde",
    "nde_lo",
    "nde_hi",
    "nie",
    "nie_se",
    "nie_lo",
    "nie_hi",
    "nie_p",
];

fn effect_row(e: &MediationEffects) -> Vec<String> {
    let join = |v: &[f64]| v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";");
    vec![
        e.label.clone(),
        e.method.clone(),
        join(&e.contrast.reference),
        join(&e.contrast.comparative),
        num(e.te.estimate),
        num(e.te.ci_lo),
        num(e.te.ci_hi),
        num(e.nde.estimate),
        num(e.nde.ci_lo),
        num(e.nde.ci_hi),
        num(e.nie.estimate),
        num(e.nie.se),
        num(e.nie.ci_lo),
        num(e.nie.ci_hi),
        num(e.nie.p),
    ]
}

/// Shared shape of the linear pipelines' JSON result.
#[derive(Serialize, Deserialize)]
pub struct EffectsResult<T> {
    pub rows_used: usize,
    pub dropped_rows: usize,
    pub effects: Vec<MediationEffects>,
    pub global: Option<GlobalEffects>,
    pub details: T,
}

pub fn run_sema(
    seed: u64,
    data: &DataSection,
    section: &SemaSection,
    out: &Path,
) -> CliResult<Vec<std::path::PathBuf>> {
    check_level(section.level)?;
    let contrast = match (&section.reference, &section.comparative) {
        (None, None) => ContrastRule::Unit,
        (Some(r), Some(c)) => ContrastRule::Custom(Contrast::new(r.clone(), c.clone())?),
        _ => return Err(CliError::Config("give both reference and comparative levels, or neither".into())),
    };
    let opts =
        SemaOptions { adjust_coexposures: section.adjust, contrast, fdr_level: section.fdr, level: section.level };
    if !(opts.fdr_level > 0.0 && opts.fdr_level <= 1.0) {
        return Err(CliError::Config(format!("fdr level {} outside (0, 1]", opts.fdr_level)));
    }
    let (loaded, input) = load(data)?;
    let resolved = Resolved::new("sema", seed, vec![input], Some(data.clone()), section)?;
    let r: SemaResult = sema(&loaded.dataset, &opts)?;
    let mut art = Artifacts::new(out, &resolved)?;
    let mut header: Vec<&str> = EFFECT_HEADER.to_vec();
    header.extend(["nie_q", "active"]);
    let rows: Vec<Vec<String>> = r
        .effects
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let mut row = effect_row(e);
            row.push(num(r.nie_q[j]));
            row.push(r.active[j].to_string());
            row
        })
        .collect();
    art.csv("", &header, &rows)?;
    #[derive(Serialize)]
    struct Details {
        adjusted: bool,
        nie_q: Vec<f64>,
        active: Vec<bool>,
        note: String,
    }
    art.json(
        "",
        &EffectsResult {
            rows_used: loaded.dataset.n(),
            dropped_rows: loaded.dropped_rows,
            effects: r.effects.clone(),
            global: Some(r.global.clone()),
            details: Details {
                adjusted: r.adjusted,
                nie_q: r.nie_q.clone(),
                active: r.active.clone(),
                note: r.note.clone(),
            },
        },
    )?;
    art.commit()
}

pub fn run_pcma(
    seed: u64,
    data: &DataSection,
    section: &PcmaSection,
    out: &Path,
) -> CliResult<Vec<std::path::PathBuf>> {
    check_level(section.level)?;
    let rule = parse_rule(&section.rule)?;
    if let Some(p) = (!data.exposures.is_empty()).then_some(data.exposures.len()) {
        rule.validate(p)?;
    }
    let (loaded, input) = load(data)?;
    let resolved = Resolved::new("pcma", seed, vec![input], Some(data.clone()), section)?;
    let r = pcma(&loaded.dataset, &PcmaOptions { rule, shift: None, level: section.level })?;
    let mut art = Artifacts::new(out, &resolved)?;
    let rows: Vec<Vec<String>> = r.effects.iter().map(effect_row).collect();
    art.csv("effects", &EFFECT_HEADER, &rows)?;
    let scree: Vec<Vec<String>> =
        scree_table(&r.model).into_iter().map(|(k, e, p, c)| vec![k.to_string(), num(e), num(p), num(c)]).collect();
    art.csv("scree", &["component", "eigenvalue", "proportion", "cumulative"], &scree)?;
    let p = r.model.loadings.nrows();
    let names = loaded.dataset.exposure_names();
    let comp: Vec<String> = (1..=p).map(|k| format!("PC{k}")).collect();
    let mut header = vec!["exposure"];
    header.extend(comp.iter().map(String::as_str));
    let loadings: Vec<Vec<String>> = (0..p)
        .map(|i| {
            let mut row = vec![names[i].clone()];
            row.extend((0..p).map(|k| num(r.model.loadings[(i, k)])));
            row
        })
        .collect();
    art.csv("loadings", &header, &loadings)?;
    #[derive(Serialize)]
    struct Details {
        retained: usize,
        eigenvalues: Vec<f64>,
        cumulative: Vec<f64>,
        loadings: Vec<Vec<f64>>,
    }
    art.json(
        "",
        &EffectsResult {
            rows_used: loaded.dataset.n(),
            dropped_rows: loaded.dropped_rows,
            effects: r.effects.clone(),
            global: Some(r.global.clone()),
            details: Details {
                retained: r.retained,
                eigenvalues: r.model.eigenvalues.iter().copied().collect(),
                cumulative: r.model.cumulative_proportions(),
                loadings: (0..p).map(|i| r.model.loadings.row(i).iter().copied().collect()).collect(),
            },
        },
    )?;
    art.commit()
}

pub fn run_ersma(
    seed: u64,
    data: &DataSection,
    section: &ErsmaSection,
    out: &Path,
) -> CliResult<Vec<std::path::PathBuf>> {
    check_level(section.level)?;
    let opts = ErsmaOptions {
        feature_spec: parse_features(&section.features)?,
        contrast: parse_ers_contrast(&section.contrast)?,
        level: section.level,
    };
    let (loaded, input) = load(data)?;
    let resolved = Resolved::new("ersma", seed, vec![input], Some(data.clone()), section)?;
    let r = ersma(&loaded.dataset, &opts, &SeededRng::new(seed))?;
    let mut art = Artifacts::new(out, &resolved)?;
    art.csv("effects", &EFFECT_HEADER, &[effect_row(&r.effects)])?;
    let weights: Vec<Vec<String>> = r
        .model
        .feature_names
        .iter()
        .enumerate()
        .map(|(k, f)| vec![f.clone(), num(r.model.coefficients[k]), num(r.model.weights[k])])
        .collect();
    art.csv("weights", &["feature", "coefficient", "weight"], &weights)?;
    #[derive(Serialize)]
    struct Details<'a> {
        model: &'a ErsModel,
        analysis_rows: &'a [usize],
        scores: &'a [f64],
    }
    art.json(
        "",
        &EffectsResult {
            rows_used: loaded.dataset.n(),
            dropped_rows: loaded.dropped_rows,
            effects: vec![r.effects.clone()],
            global: None,
            details: Details { model: &r.model, analysis_rows: &r.analysis_rows, scores: &r.scores.values },
        },
    )?;
    art.commit()
}

fn kernel_for(dataset: &Dataset, section: &BkmrSection) -> CliResult<mixmed::bkmr::KernelConfig> {
    let mut kc = section.kernel.clone();
    if let Some(k) = section.clusters {
        if kc.groups.is_some() {
            return Err(CliError::Config("set either bkmr.groups or bkmr.clusters, not both".into()));
        }
        if k == 0 || k > dataset.p() {
            return Err(CliError::Config(format!("clusters {k} outside 1..={}", dataset.p())));
        }
        kc.groups = Some(cluster_groups(&correlation(dataset.exposures())?, k)?);
    }
    kc.validate(dataset.p())?;
    Ok(kc)
}

#[derive(Serialize, Deserialize)]
pub struct FitResult {
    pub rows_used: usize,
    pub dropped_rows: usize,
    pub pips: Vec<PipTable>,
    pub fits: Vec<BkmrFit>,
}

const PIP_HEADER: [&str; 6] = ["model", "input", "group", "group_pip", "conditional_pip", "pip"];

fn pip_rows(fits: &[BkmrFit], tables: &[PipTable]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (f, t) in fits.iter().zip(tables) {
        for (k, name) in t.names.iter().enumerate() {
            rows.push(vec![
                format!("{:?}", f.role).to_lowercase(),
                name.clone(),
                t.group.as_ref().map(|g| g[k].to_string()).unwrap_or_default(),
                opt(t.group_pip.as_ref().map(|g| g[k])),
                opt(t.conditional_pip.as_ref().map(|g| g[k])),
                num(t.pip[k]),
            ]);
        }
    }
    rows
}

fn fit_three(dataset: &Dataset, section: &BkmrSection, seed: u64) -> CliResult<(Vec<BkmrFit>, Vec<PipTable>)> {
    let kc = kernel_for(dataset, section)?;
    let fits = fit_models(dataset, &kc, &SeededRng::new(seed))?.to_vec();
    let tables = if kc.varsel {
        fits.iter().map(|f| extract_pips(f, &default_selection(f.chain.len()))).collect::<mixmed::Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok((fits, tables))
}

pub fn run_bkmr_fit(
    seed: u64,
    data: &DataSection,
    section: &BkmrSection,
    out: &Path,
) -> CliResult<Vec<std::path::PathBuf>> {
    let (loaded, input) = load(data)?;
    let resolved = Resolved::new("bkmr-fit", seed, vec![input], Some(data.clone()), section)?;
    let (fits, pips) = fit_three(&loaded.dataset, section, seed)?;
    let mut art = Artifacts::new(out, &resolved)?;
    art.csv("pips", &PIP_HEADER, &pip_rows(&fits, &pips))?;
    art.json("", &FitResult { rows_used: loaded.dataset.n(), dropped_rows: loaded.dropped_rows, pips, fits })?;
    art.commit()
}

#[derive(Deserialize)]
struct Envelope<T> {
    config: serde_json::Value,
    result: T,
}

pub fn run_bkmr_cma(
    seed: u64,
    data: &DataSection,
    bkmr: &BkmrSection,
    section: &CmaSection,
    out: &Path,
) -> CliResult<Vec<std::path::PathBuf>> {
    #[derive(Serialize)]
    struct Params<'a> {
        cma: &'a CmaSection,
        bkmr: Option<&'a BkmrSection>,
    }
    let (fits, inputs, data_used) = match &section.chains {
        Some(path) => {
            let input = InputFile::new("chains", path)?;
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let env: Envelope<FitResult> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{} is not a bkmr-fit artifact: {e}", path.display())))?;
            if env.config.get("subcommand").and_then(|s| s.as_str()) != Some("bkmr-fit") {
                return Err(CliError::Config(format!("{} is not a bkmr-fit artifact", path.display())));
            }
            (env.result.fits, vec![input], None)
        }
        None => {
            let (loaded, input) = load(data)?;
            let (fits, _) = fit_three(&loaded.dataset, bkmr, seed)?;
            (fits, vec![input], Some(data.clone()))
        }
    };
    let [fm, fy, ft]: [BkmrFit; 3] =
        fits.try_into().map_err(|_| CliError::Config("chain artifact must hold exactly three fits".into()))?;
    let mut cfg = section.cma.clone();
    if cfg.a.is_empty() && cfg.astar.is_empty() {
        // Upper versus lower quartile of every exposure.
        let cols: Vec<Vec<f64>> = fm.z.column_iter().map(|c| c.iter().copied().collect()).collect();
        cfg.a = cols.iter().map(|c| quantile(c, 0.75)).collect();
        cfg.astar = cols.iter().map(|c| quantile(c, 0.25)).collect();
    }
    let resolved_section = CmaSection { chains: section.chains.clone(), cma: cfg.clone() };
    let params = Params { cma: &resolved_section, bkmr: data_used.is_some().then_some(bkmr) };
    let resolved = Resolved::new("bkmr-cma", seed, inputs, data_used, &params)?;
    let eff: PosteriorEffects = mediation_bkmr(&fm, &fy, &ft, &cfg, &SeededRng::new(seed).substream(3))?;
    let mut art = Artifacts::new(out, &resolved)?;
    let rows: Vec<Vec<String>> =
        eff.forest_table().into_iter().map(|(k, m, lo, hi)| vec![k, num(m), num(lo), num(hi)]).collect();
    art.csv("forest", &["effect", "mean", "lo", "hi"], &rows)?;
    art.json("", &eff)?;
    art.commit()
}

pub fn run_simulate(seed: u64, section: &SimulateSection, out: &Path) -> CliResult<Vec<std::path::PathBuf>> {
    let study = section.study(seed)?;
    let resolved = Resolved::new("simulate", seed, Vec::new(), None, section)?;
    let report = run_study(&study, &SeededRng::new(seed))?;
    let mut art = Artifacts::new(out, &resolved)?;
    art.csv_records("metrics", &report.rows)?;
    art.csv_records("replicates", &report.replicates)?;
    art.json("", &report)?;
    art.commit()
}

pub fn run_report(seed: u64, section: &ReportSection, out: &Path) -> CliResult<Vec<std::path::PathBuf>> {
    let path =
        section.input.as_deref().ok_or_else(|| CliError::Config("report needs --input <artifact.json>".into()))?;
    if !path.is_file() {
        return Err(CliError::Config(format!("report input '{}' does not exist", path.display())));
    }
    let input = InputFile::new("artifact", path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |e: serde_json::Error| CliError::Config(format!("{} is not a mixmed artifact: {e}", path.display()));
    let env: Envelope<serde_json::Value> = serde_json::from_str(&text).map_err(bad)?;
    let kind = env
        .config
        .get("subcommand")
        .and_then(|s| s.as_str())
        .ok_or_else(|| CliError::Config(format!("{} has no subcommand field", path.display())))?
        .to_string();
    let resolved = Resolved::new("report", seed, vec![input], None, section)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut summary = format!("source: {} ({kind})\n", path.display());
    match kind.as_str() {
        "simulate" => {
            let r: MetricsReport = serde_json::from_value(env.result).map_err(bad)?;
            for m in &r.rows {
                let metrics = [
                    ("rel_bias_mean", m.rel_bias_mean),
                    ("rel_bias_sd", m.rel_bias_sd),
                    ("rel_bias_abs", m.rel_bias_abs),
                    ("tpr_mean", m.tpr_mean),
                    ("tpr_sd", m.tpr_sd),
                    ("fpr_mean", m.fpr_mean),
                    ("fpr_sd", m.fpr_sd),
                ];
                for (name, v) in metrics {
                    if let Some(v) = v {
                        rows.push(vec![m.scenario.clone(), m.method.clone(), opt(m.threshold), name.into(), num(v)]);
                    }
                }
                summary.push_str(&format!(
                    "{:<16} {:<20} {:>6} bias {:>9} tpr {:>6} fpr {:>6} failures {}\n",
                    m.scenario,
                    m.method,
                    opt(m.threshold),
                    m.rel_bias_mean.map(|v| format!("{v:.1}%")).unwrap_or_default(),
                    m.tpr_mean.map(|v| format!("{v:.3}")).unwrap_or_default(),
                    m.fpr_mean.map(|v| format!("{v:.3}")).unwrap_or_default(),
                    m.failures
                ));
            }
            art_finish(out, &resolved, &["scenario", "method", "threshold", "metric", "value"], rows, summary)
        }
        "bkmr-cma" => {
            let e: PosteriorEffects = serde_json::from_value(env.result).map_err(bad)?;
            for (k, m, lo, hi) in e.forest_table() {
                summary.push_str(&format!("{k:<14} {m:>10.4} ({lo:.4}, {hi:.4})\n"));
                rows.push(vec![k, num(m), num(lo), num(hi)]);
            }
            art_finish(out, &resolved, &["effect", "mean", "lo", "hi"], rows, summary)
        }
        "sema" | "pcma" | "ersma" => {
            let r: EffectsResult<serde_json::Value> = serde_json::from_value(env.result).map_err(bad)?;
            let mut push = |label: &str, name: &str, i: &mixmed::linmod::Interval| {
                rows.push(vec![label.into(), name.into(), num(i.estimate), num(i.ci_lo), num(i.ci_hi)]);
            };
            for e in &r.effects {
                push(&e.label, "te", &e.te);
                push(&e.label, "nde", &e.nde);
                push(&e.label, "nie", &e.nie);
                summary.push_str(&format!(
                    "{:<12} NIE {:>9.4} ({:.4}, {:.4})\n",
                    e.label, e.nie.estimate, e.nie.ci_lo, e.nie.ci_hi
                ));
            }
            if let Some(g) = &r.global {
                push("global", "te", &g.te);
                push("global", "nde", &g.nde);
                push("global", "nie", &g.nie);
                summary.push_str(&format!(
                    "{:<12} NIE {:>9.4} ({:.4}, {:.4})\n",
                    "global", g.nie.estimate, g.nie.ci_lo, g.nie.ci_hi
                ));
            }
            art_finish(out, &resolved, &["label", "effect", "estimate", "lo", "hi"], rows, summary)
        }
        "bkmr-fit" => {
            let r: FitResult = serde_json::from_value(env.result).map_err(bad)?;
            let rows = pip_rows(&r.fits, &r.pips);
            for row in &rows {
                summary.push_str(&format!("{:<10} {:<12} PIP {}\n", row[0], row[1], row[5]));
            }
            art_finish(out, &resolved, &PIP_HEADER, rows, summary)
        }
        other => Err(CliError::Config(format!("cannot report on a '{other}' artifact"))),
    }
}

fn art_finish(
    out: &Path,
    resolved: &Resolved,
    header: &[&str],
    rows: Vec<Vec<String>>,
    summary: String,
) -> CliResult<Vec<std::path::PathBuf>> {
    let mut art = Artifacts::new(out, resolved)?;
    art.csv("", header, &rows)?;
    art.text("", "txt", summary);
    art.commit()
}
