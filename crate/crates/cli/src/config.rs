//! File configuration and the resolved per-run configuration that gets hashed.

use std::path::{Path, PathBuf};

use mixmed::bkmr::KernelConfig;
use mixmed::cma::CmaConfig;
use mixmed::data::Schema;
use mixmed::ersma::{ErsContrast, FeatureSpec};
use mixmed::pcma::RetentionRule;
use mixmed::sim::{BkmrStudy, Method, Scenario, StudyConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 1;

/// Everything a TOML config file may contain. Command-line flags are applied on top.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub data: DataSection,
    pub sema: SemaSection,
    pub pcma: PcmaSection,
    pub ersma: ErsmaSection,
    pub bkmr: BkmrSection,
    pub cma: CmaSection,
    pub simulate: SimulateSection,
    pub report: ReportSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub exposures: Vec<String>,
    pub mediator: String,
    pub outcome: String,
    pub confounders: Vec<String>,
    pub categorical: Vec<String>,
}

impl DataSection {
    pub fn schema(&self) -> Schema {
        Schema {
            exposures: self.exposures.clone(),
            mediator: self.mediator.clone(),
            outcome: self.outcome.clone(),
            confounders: self.confounders.clone(),
            categorical: self.categorical.clone(),
        }
    }

    pub fn require_path(&self) -> CliResult<&Path> {
        let p = self
            .path
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset given (use --data or [data] path)".into()))?;
        if !p.is_file() {
            return Err(CliError::Config(format!("dataset '{}' does not exist", p.display())));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemaSection {
    /// Adjust each exposure's models for the other exposures.
    pub adjust: bool,
    pub fdr: f64,
    pub level: f64,
    /// Per-exposure reference and comparative levels; unit shift when absent.
    pub reference: Option<Vec<f64>>,
    pub comparative: Option<Vec<f64>>,
}

impl Default for SemaSection {
    fn default() -> Self {
        SemaSection { adjust: true, fdr: 0.05, level: 0.95, reference: None, comparative: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcmaSection {
    /// `cum:<θ>`, `first:<k>` or `kaiser`.
    pub rule: String,
    pub level: f64,
}

impl Default for PcmaSection {
    fn default() -> Self {
        PcmaSection { rule: "cum:0.8".into(), level: 0.95 }
    }
}

pub fn parse_rule(s: &str) -> CliResult<RetentionRule> {
    let bad = || CliError::Config(format!("retention rule '{s}' is not cum:<θ>, first:<k> or kaiser"));
    match s.split_once(':') {
        None if s == "kaiser" => Ok(RetentionRule::Kaiser),
        Some(("cum", v)) => v.parse().map(RetentionRule::CumVariance).map_err(|_| bad()),
        Some(("first", v)) => v.parse().map(RetentionRule::FirstK).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErsmaSection {
    /// `main` or `full` (main effects, squares and pairwise products).
    pub features: String,
    /// `iqr` or `custom:<reference>,<comparative>` on the score scale.
    pub contrast: String,
    pub level: f64,
}

impl Default for ErsmaSection {
    fn default() -> Self {
        ErsmaSection { features: "main".into(), contrast: "iqr".into(), level: 0.95 }
    }
}

pub fn parse_features(s: &str) -> CliResult<FeatureSpec> {
    match s {
        "main" => Ok(FeatureSpec::MainOnly),
        "full" => Ok(FeatureSpec::MainSquaresPairwise),
        _ => Err(CliError::Config(format!("feature spec '{s}' is not 'main' or 'full'"))),
    }
}

pub fn parse_ers_contrast(s: &str) -> CliResult<ErsContrast> {
    if s == "iqr" {
        return Ok(ErsContrast::Iqr);
    }
    let bad = || CliError::Config(format!("ERS contrast '{s}' is not 'iqr' or 'custom:<ref>,<cmp>'"));
    let v = s.strip_prefix("custom:").ok_or_else(bad)?;
    let (a, b) = v.split_once(',').ok_or_else(bad)?;
    Ok(ErsContrast::Custom {
        reference: a.trim().parse().map_err(|_| bad())?,
        comparative: b.trim().parse().map_err(|_| bad())?,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BkmrSection {
    /// Build hierarchical groups by clustering exposure correlations into this many clusters.
    pub clusters: Option<usize>,
    #[serde(flatten)]
    pub kernel: KernelConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaSection {
    /// A `bkmr-fit` artifact to reuse instead of fitting.
    pub chains: Option<PathBuf>,
    #[serde(flatten)]
    pub cma: CmaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// `<n>:<R²_M>` pairs on the standard design.
    pub scenarios: Vec<String>,
    pub methods: Vec<String>,
    pub replicates: usize,
    pub reference_n: usize,
    pub fdr_level: f64,
    pub bkmr: BkmrStudy,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let d = StudyConfig::default();
        SimulateSection {
            scenarios: d.scenarios.iter().map(|s| format!("{}:{}", s.n, s.r2_m)).collect(),
            methods: d.methods.iter().map(Method::label).collect(),
            replicates: d.replicates,
            reference_n: d.reference_n,
            fdr_level: d.fdr_level,
            bkmr: d.bkmr,
        }
    }
}

impl SimulateSection {
    pub fn study(&self, seed: u64) -> CliResult<StudyConfig> {
        let scenarios = self
            .scenarios
            .iter()
            .map(|s| {
                let bad = || CliError::Config(format!("scenario '{s}' is not <n>:<R²_M>"));
                let (n, r2) = s.split_once(':').ok_or_else(bad)?;
                Ok(Scenario::standard(n.trim().parse().map_err(|_| bad())?, r2.trim().parse().map_err(|_| bad())?))
            })
            .collect::<CliResult<_>>()?;
        let methods =
            self.methods.iter().map(|m| Method::from_label(m).map_err(CliError::from)).collect::<CliResult<_>>()?;
        let study = StudyConfig {
            scenarios,
            methods,
            replicates: self.replicates,
            seed,
            reference_n: self.reference_n,
            fdr_level: self.fdr_level,
            bkmr: self.bkmr.clone(),
        };
        study.validate()?;
        Ok(study)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// A JSON artifact written by another subcommand.
    pub input: Option<PathBuf>,
}

/// Digest of an input file that the run depends on.
#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn new(role: &str, path: &Path) -> CliResult<InputFile> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(InputFile {
            role: role.into(),
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// The configuration a run actually used; embedded in and hashed into every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub seed: u64,
    pub inputs: Vec<InputFile>,
    pub data: Option<DataSection>,
    pub params: serde_json::Value,
}

impl Resolved {
    pub fn new(
        subcommand: &str,
        seed: u64,
        inputs: Vec<InputFile>,
        data: Option<DataSection>,
        params: &impl Serialize,
    ) -> CliResult<Resolved> {
        Ok(Resolved {
            tool: "mixmed",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.into(),
            seed,
            inputs,
            data,
            params: serde_json::to_value(params).map_err(|e| CliError::Config(e.to_string()))?,
        })
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("resolved config serializes");
        hex::encode(Sha256::digest(&bytes))[..12].to_string()
    }
}
