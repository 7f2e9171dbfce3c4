//! Dataset model, CSV ingestion, standardization and seeded randomness.
//!
//! A [`Dataset`] holds the four variable roles used by every pipeline:
//! exposures `X` (n×p), a single mediator `M`, a single outcome `Y` and
//! confounders `C` (n×s, categorical confounders already dummy-coded).
//! Datasets are immutable once built.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens read as a missing cell.
const MISSING_TOKENS: [&str; 6] = ["", "NA", "na", "NaN", "nan", "null"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Exposure,
    Mediator,
    Outcome,
    Confounder,
}

/// Column-to-role mapping used when reading a CSV file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub exposures: Vec<String>,
    pub mediator: String,
    pub outcome: String,
    #[serde(default)]
    pub confounders: Vec<String>,
    /// Confounders to expand into dummy columns. Must be a subset of `confounders`.
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        if self.exposures.is_empty() {
            return Err(Error::Schema("at least one exposure column is required".into()));
        }
        if self.mediator.is_empty() || self.outcome.is_empty() {
            return Err(Error::Schema("mediator and outcome columns are required".into()));
        }
        let mut seen = BTreeSet::new();
        let all = self
            .exposures
            .iter()
            .chain(std::iter::once(&self.mediator))
            .chain(std::iter::once(&self.outcome))
            .chain(self.confounders.iter());
        for name in all {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("column '{name}' is assigned more than one role")));
            }
        }
        for cat in &self.categorical {
            if !self.confounders.contains(cat) {
                return Err(Error::Schema(format!("categorical column '{cat}' is not listed as a confounder")));
            }
        }
        Ok(())
    }
}

/// Exposures, mediator, outcome and confounders for `n` complete cases.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    exposures: DMatrix<f64>,
    mediator: DVector<f64>,
    outcome: DVector<f64>,
    confounders: DMatrix<f64>,
    exposure_names: Vec<String>,
    confounder_names: Vec<String>,
    mediator_name: String,
    outcome_name: String,
}

impl Dataset {
    /// Builds a dataset with default column names (`X1..Xp`, `M`, `Y`, `C1..Cs`).
    pub fn new(
        exposures: DMatrix<f64>,
        mediator: DVector<f64>,
        outcome: DVector<f64>,
        confounders: DMatrix<f64>,
    ) -> Result<Self> {
        let exposure_names = (1..=exposures.ncols()).map(|j| format!("X{j}")).collect();
        let confounder_names = (1..=confounders.ncols()).map(|j| format!("C{j}")).collect();
        Self::with_names(
            exposures,
            mediator,
            outcome,
            confounders,
            exposure_names,
            confounder_names,
            "M".into(),
            "Y".into(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_names(
        exposures: DMatrix<f64>,
        mediator: DVector<f64>,
        outcome: DVector<f64>,
        confounders: DMatrix<f64>,
        exposure_names: Vec<String>,
        confounder_names: Vec<String>,
        mediator_name: String,
        outcome_name: String,
    ) -> Result<Self> {
        let n = outcome.len();
        if mediator.len() != n || exposures.nrows() != n || confounders.nrows() != n {
            return Err(Error::Dimension(format!(
                "columns have unequal lengths (X {}, M {}, Y {}, C {})",
                exposures.nrows(),
                mediator.len(),
                n,
                confounders.nrows()
            )));
        }
        if n < 2 {
            return Err(Error::insufficient("dataset rows", 2, n));
        }
        if exposures.ncols() == 0 {
            return Err(Error::Schema("dataset has no exposure columns".into()));
        }
        if exposure_names.len() != exposures.ncols() || confounder_names.len() != confounders.ncols() {
            return Err(Error::Dimension("column name count does not match matrix width".into()));
        }
        let all_finite = exposures
            .iter()
            .chain(mediator.iter())
            .chain(outcome.iter())
            .chain(confounders.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        let ds = Dataset {
            exposures,
            mediator,
            outcome,
            confounders,
            exposure_names,
            confounder_names,
            mediator_name,
            outcome_name,
        };
        let mut seen = BTreeSet::new();
        for name in ds.column_names() {
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("column '{name}' is assigned more than one role")));
            }
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn p(&self) -> usize {
        self.exposures.ncols()
    }

    pub fn s(&self) -> usize {
        self.confounders.ncols()
    }

    pub fn exposures(&self) -> &DMatrix<f64> {
        &self.exposures
    }

    pub fn mediator(&self) -> &DVector<f64> {
        &self.mediator
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.outcome
    }

    pub fn confounders(&self) -> &DMatrix<f64> {
        &self.confounders
    }

    pub fn exposure_names(&self) -> &[String] {
        &self.exposure_names
    }

    pub fn confounder_names(&self) -> &[String] {
        &self.confounder_names
    }

    pub fn mediator_name(&self) -> &str {
        &self.mediator_name
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    /// All column names in output order: exposures, mediator, outcome, confounders.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = self.exposure_names.clone();
        names.push(self.mediator_name.clone());
        names.push(self.outcome_name.clone());
        names.extend(self.confounder_names.iter().cloned());
        names
    }

    pub fn role_of(&self, column: &str) -> Option<Role> {
        if self.exposure_names.iter().any(|c| c == column) {
            Some(Role::Exposure)
        } else if self.mediator_name == column {
            Some(Role::Mediator)
        } else if self.outcome_name == column {
            Some(Role::Outcome)
        } else if self.confounder_names.iter().any(|c| c == column) {
            Some(Role::Confounder)
        } else {
            None
        }
    }

    pub fn exposure_index(&self, name: &str) -> Option<usize> {
        self.exposure_names.iter().position(|c| c == name)
    }

    /// Row subset in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            exposures: self.exposures.select_rows(rows),
            mediator: self.mediator.select_rows(rows),
            outcome: self.outcome.select_rows(rows),
            confounders: self.confounders.select_rows(rows),
            exposure_names: self.exposure_names.clone(),
            confounder_names: self.confounder_names.clone(),
            mediator_name: self.mediator_name.clone(),
            outcome_name: self.outcome_name.clone(),
        }
    }

    /// Same data with the exposure block replaced (names supplied by the caller).
    pub fn with_exposures(&self, exposures: DMatrix<f64>, names: Vec<String>) -> Result<Dataset> {
        Dataset::with_names(
            exposures,
            self.mediator.clone(),
            self.outcome.clone(),
            self.confounders.clone(),
            names,
            self.confounder_names.clone(),
            self.mediator_name.clone(),
            self.outcome_name.clone(),
        )
    }

    /// Copy of the dataset with every exposure column standardized.
    pub fn standardized_exposures(&self) -> Result<Dataset> {
        let st = standardize(&self.exposures).map_err(|e| match e {
            Error::DegenerateColumn(col) => {
                let idx: usize = col.trim_start_matches("column ").parse().unwrap_or(0);
                Error::DegenerateColumn(self.exposure_names.get(idx).cloned().unwrap_or(col))
            }
            other => other,
        })?;
        self.with_exposures(st.values, self.exposure_names.clone())
    }

    /// Writes the dataset as a CSV file with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.column_names())?;
        for i in 0..self.n() {
            let mut record: Vec<String> = Vec::with_capacity(self.p() + 2 + self.s());
            record.extend(self.exposures.row(i).iter().map(|v| v.to_string()));
            record.push(self.mediator[i].to_string());
            record.push(self.outcome[i].to_string());
            record.extend(self.confounders.row(i).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Schema that reloads the output of [`Dataset::write_csv`].
    pub fn schema(&self) -> Schema {
        Schema {
            exposures: self.exposure_names.clone(),
            mediator: self.mediator_name.clone(),
            outcome: self.outcome_name.clone(),
            confounders: self.confounder_names.clone(),
            categorical: Vec::new(),
        }
    }
}

/// Result of reading a CSV file: the dataset plus listwise-deletion bookkeeping.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Number of data rows dropped because a used column was missing.
    pub dropped_rows: usize,
    /// 1-based data-row numbers (header excluded) of the dropped rows.
    pub dropped_row_numbers: Vec<usize>,
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<LoadReport> {
    let file = File::open(path.as_ref())?;
    read_dataset(file, schema)
}

/// Reads a dataset from any CSV source.
///
/// Rows with a missing value in any used column are dropped. Categorical
/// confounders are expanded into 0/1 dummy columns named `<col>_<level>`, with
/// the alphabetically first level as reference.
pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<LoadReport> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let locate = |name: &str| -> Result<usize> {
        index.get(name).copied().ok_or_else(|| Error::Schema(format!("column '{name}' not found in CSV header")))
    };

    let exposure_idx: Vec<usize> = schema.exposures.iter().map(|c| locate(c)).collect::<Result<_>>()?;
    let mediator_idx = locate(&schema.mediator)?;
    let outcome_idx = locate(&schema.outcome)?;
    let confounder_idx: Vec<usize> = schema.confounders.iter().map(|c| locate(c)).collect::<Result<_>>()?;
    let is_categorical: Vec<bool> = schema.confounders.iter().map(|c| schema.categorical.contains(c)).collect();

    let mut numeric_cols: Vec<usize> = exposure_idx.clone();
    numeric_cols.push(mediator_idx);
    numeric_cols.push(outcome_idx);

    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut m_vals = Vec::new();
    let mut y_vals = Vec::new();
    // Confounders kept as raw text until levels are known.
    let mut c_rows: Vec<Vec<String>> = Vec::new();
    let mut dropped = Vec::new();

    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row_number = r + 1;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let missing = numeric_cols.iter().chain(confounder_idx.iter()).any(|&i| MISSING_TOKENS.contains(&cell(i)));
        if missing {
            dropped.push(row_number);
            continue;
        }
        let parse = |i: usize| -> Result<f64> {
            let raw = cell(i);
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row: row_number,
                column: headers[i].clone(),
                value: raw.to_string(),
            })
        };
        x_rows.push(exposure_idx.iter().map(|&i| parse(i)).collect::<Result<_>>()?);
        m_vals.push(parse(mediator_idx)?);
        y_vals.push(parse(outcome_idx)?);
        let mut crow = Vec::with_capacity(confounder_idx.len());
        for (k, &i) in confounder_idx.iter().enumerate() {
            if is_categorical[k] {
                crow.push(cell(i).to_string());
            } else {
                crow.push(parse(i)?.to_string());
            }
        }
        c_rows.push(crow);
    }

    let n = y_vals.len();
    if n < 2 {
        return Err(Error::insufficient("complete rows after listwise deletion", 2, n));
    }

    // Expand confounders.
    let mut c_columns: Vec<Vec<f64>> = Vec::new();
    let mut c_names: Vec<String> = Vec::new();
    for (k, name) in schema.confounders.iter().enumerate() {
        if is_categorical[k] {
            let levels: BTreeSet<&str> = c_rows.iter().map(|row| row[k].as_str()).collect();
            for level in levels.iter().skip(1) {
                c_names.push(format!("{name}_{level}"));
                c_columns.push(c_rows.iter().map(|row| f64::from(u8::from(row[k] == *level))).collect());
            }
        } else {
            c_names.push(name.clone());
            c_columns.push(c_rows.iter().map(|row| row[k].parse::<f64>().unwrap_or(f64::NAN)).collect());
        }
    }

    let p = schema.exposures.len();
    let exposures = DMatrix::from_fn(n, p, |i, j| x_rows[i][j]);
    let confounders = DMatrix::from_fn(n, c_columns.len(), |i, j| c_columns[j][i]);
    let dataset = Dataset::with_names(
        exposures,
        DVector::from_vec(m_vals),
        DVector::from_vec(y_vals),
        confounders,
        schema.exposures.clone(),
        c_names,
        schema.mediator.clone(),
        schema.outcome.clone(),
    )?;
    if !dropped.is_empty() {
        log::info!("dropped {} row(s) with missing values", dropped.len());
    }
    Ok(LoadReport { dataset, dropped_rows: dropped.len(), dropped_row_numbers: dropped })
}

/// A column-standardized matrix plus the moments needed to transform new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    #[serde(skip)]
    pub values: DMatrix<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardized {
    /// Applies the stored centering and scaling to another matrix with the same columns.
    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.ncols() != self.means.len() {
            return Err(Error::Dimension(format!("expected {} columns, got {}", self.means.len(), m.ncols())));
        }
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.means[j]) / self.sds[j]))
    }
}

/// Centers each column to mean 0 and scales it to sample sd 1 (n−1 denominator).
pub fn standardize(matrix: &DMatrix<f64>) -> Result<Standardized> {
    let n = matrix.nrows();
    if n < 2 {
        return Err(Error::insufficient("rows to standardize", 2, n));
    }
    let mut values = matrix.clone();
    let mut means = Vec::with_capacity(matrix.ncols());
    let mut sds = Vec::with_capacity(matrix.ncols());
    for (j, mut col) in values.column_iter_mut().enumerate() {
        let mean = col.mean();
        let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        if !(sd > 1e-14 * mean.abs().max(1.0)) {
            return Err(Error::DegenerateColumn(format!("column {j}")));
        }
        col.apply(|v| *v = (*v - mean) / sd);
        means.push(mean);
        sds.push(sd);
    }
    Ok(Standardized { values, means, sds })
}

/// Seed plus stream id; every random draw in the crate comes from one of these.
///
/// Child streams are derived by mixing the parent stream with an index, so a
/// replicate's generator can be rebuilt without replaying its siblings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededRng {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        SeededRng { seed, stream }
    }

    /// Child stream `index` of this stream.
    pub fn substream(&self, index: u64) -> SeededRng {
        SeededRng {
            seed: self.seed,
            stream: splitmix64(splitmix64(self.stream) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03)),
        }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Disjoint training / analysis partition of a dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub analysis: Dataset,
    /// Sorted row indices of the training part.
    pub train_rows: Vec<usize>,
    /// Sorted row indices of the analysis part.
    pub analysis_rows: Vec<usize>,
}

/// Random split with `floor(n/2)` training rows.
pub fn split_train_analysis(data: &Dataset, rng: &SeededRng) -> Result<Split> {
    let n = data.n();
    if n < 4 {
        return Err(Error::insufficient("rows for a train/analysis split", 4, n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.rng());
    let mut train_rows = idx[..n / 2].to_vec();
    let mut analysis_rows = idx[n / 2..].to_vec();
    train_rows.sort_unstable();
    analysis_rows.sort_unstable();
    Ok(Split { train: data.subset(&train_rows), analysis: data.subset(&analysis_rows), train_rows, analysis_rows })
}
