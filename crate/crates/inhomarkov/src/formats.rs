//! File formats: the input price/feature CSV, result CSVs, JSON documents,
//! network checkpoints and operator snapshots.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use inhomarkov_core::counts::CountMatrix;
use inhomarkov_core::diagnostics::{CkReport, DiagnosticsSeries};
use inhomarkov_core::discretization::LabelKind;
use inhomarkov_core::matrix::Matrix;
use inhomarkov_core::nn::{EpochRecord, MlpParams, TrainConfig};
use inhomarkov_core::operator::{OperatorSnapshot, StateConditionedModel, StateFreeModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::InputError;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Parsed input table: `date`, `price`, then feature columns.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub dates: Vec<NaiveDate>,
    pub prices: Vec<f64>,
    pub feature_names: Vec<String>,
    /// One entry per feature column, `None` for empty cells.
    pub features: Vec<Vec<Option<f64>>>,
}

fn input_err(msg: String) -> anyhow::Error {
    InputError(msg).into()
}

/// Reads the input CSV. Errors name the offending row (1-based, header
/// excluded) and column.
pub fn read_series(path: &Path) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_err(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| input_err(format!("{}: bad header: {e}", path.display())))?.clone();
    if headers.len() < 2 || &headers[0] != "date" || &headers[1] != "price" {
        return Err(input_err(format!("{}: header must start with `date,price`", path.display())));
    }
    let feature_names: Vec<String> = headers.iter().skip(2).map(str::to_owned).collect();
    let mut out = RawSeries {
        dates: Vec::new(),
        prices: Vec::new(),
        features: vec![Vec::new(); feature_names.len()],
        feature_names,
    };
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| input_err(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(input_err(format!("row {row}: expected {} fields, found {}", headers.len(), record.len())));
        }
        let date = NaiveDate::parse_from_str(&record[0], DATE_FORMAT)
            .map_err(|_| input_err(format!("row {row}: unparseable date {:?} in column `date`", &record[0])))?;
        if let Some(prev) = out.dates.last() {
            if date <= *prev {
                return Err(input_err(format!("row {row}: date {date} does not follow {prev}")));
            }
        }
        let price: f64 = record[1]
            .parse()
            .map_err(|_| input_err(format!("row {row}: unparseable value {:?} in column `price`", &record[1])))?;
        if !(price > 0.0 && price.is_finite()) {
            return Err(input_err(format!("row {row}: price must be positive, found {price}")));
        }
        out.dates.push(date);
        out.prices.push(price);
        for (j, cell) in record.iter().skip(2).enumerate() {
            let value = if cell.is_empty() {
                None
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    input_err(format!("row {row}: unparseable value {cell:?} in column `{}`", out.feature_names[j]))
                })?;
                if !v.is_finite() {
                    return Err(input_err(format!("row {row}: non-finite value in column `{}`", out.feature_names[j])));
                }
                Some(v)
            };
            out.features[j].push(value);
        }
    }
    Ok(out)
}

pub fn write_series(path: &Path, series: &RawSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["date".to_owned(), "price".to_owned()];
    header.extend(series.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (t, (date, price)) in series.dates.iter().zip(&series.prices).enumerate() {
        let mut row = vec![date.format(DATE_FORMAT).to_string(), price.to_string()];
        row.extend(series.features.iter().map(|c| c[t].map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| input_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input_err(format!("{} is malformed: {e}", path.display())))
}

/// Sparse-style `i,j,value` listing of every cell.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["i", "j", "value"])?;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            w.write_record([i.to_string(), j.to_string(), m.get(i, j).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_counts_csv(path: &Path, c: &CountMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["i", "j", "value"])?;
    for i in 0..c.n {
        for j in 0..c.m {
            w.write_record([i.to_string(), j.to_string(), c.get(i, j).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics_csv(path: &Path, series: &DiagnosticsSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "rho", "entropy", "dobrushin"])?;
    for r in &series.records {
        w.write_record([r.t.to_string(), r.rho.to_string(), r.entropy.to_string(), r.dobrushin.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ck_csv(path: &Path, report: &CkReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "kl", "tv"])?;
    for r in &report.records {
        w.write_record([r.t.to_string(), r.kl.to_string(), r.tv.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "train_nll", "val_nll"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_nll.to_string(), r.val_nll.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    t: usize,
    h: usize,
    n: usize,
    m: usize,
    rows: Vec<Vec<f64>>,
}

/// Streams snapshots as one `{t, h, n, m, rows}` object per line.
pub struct SnapshotWriter {
    out: BufWriter<File>,
}

impl SnapshotWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            ensure_dir(parent)?;
        }
        let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(SnapshotWriter { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, snapshots: &[OperatorSnapshot]) -> Result<()> {
        for s in snapshots {
            let line = SnapshotLine { t: s.t, h: s.h, n: s.matrix.rows(), m: s.matrix.cols(), rows: s.matrix.to_rows() };
            serde_json::to_writer(&mut self.out, &line)?;
            self.out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_snapshots(path: &Path, snapshots: &[OperatorSnapshot]) -> Result<()> {
    let mut w = SnapshotWriter::create(path)?;
    w.write(snapshots)?;
    w.finish()
}

/// Tolerance for rows read back from disk.
pub const LOAD_ROW_TOL: f64 = 1e-9;

/// Reads snapshots back, rejecting any row off the simplex.
pub fn read_snapshots(path: &Path) -> Result<Vec<OperatorSnapshot>> {
    let file = File::open(path).map_err(|e| input_err(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let s: SnapshotLine = serde_json::from_str(&line)
            .map_err(|e| input_err(format!("{} line {}: {e}", path.display(), k + 1)))?;
        let matrix = Matrix::from_rows(&s.rows)?;
        if matrix.rows() != s.n || matrix.cols() != s.m {
            return Err(input_err(format!("{} line {}: shape does not match n, m", path.display(), k + 1)));
        }
        check_stochastic(&matrix).map_err(|e| input_err(format!("{} line {}: {e}", path.display(), k + 1)))?;
        out.push(OperatorSnapshot { t: s.t, h: s.h, matrix });
    }
    Ok(out)
}

pub fn check_stochastic(m: &Matrix) -> std::result::Result<(), String> {
    if m.as_slice().iter().any(|&p| p.is_nan() || p < 0.0) {
        return Err("negative or NaN probability".into());
    }
    if !m.is_row_stochastic(LOAD_ROW_TOL) {
        return Err(format!("row sums deviate from 1 by {:e}", m.max_row_sum_error()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    StateConditioned,
    StateFree,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::StateConditioned, ModelKind::StateFree];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::StateConditioned => "state_conditioned",
            ModelKind::StateFree => "state_free",
        }
    }
}

/// A trained network with everything needed to rebuild its model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub target: LabelKind,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub horizon: usize,
    pub feature_names: Vec<String>,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub params: MlpParams,
}

pub enum LoadedModel {
    StateConditioned(StateConditionedModel),
    StateFree(StateFreeModel),
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(input_err(format!("missing checkpoint {}", path.display())));
        }
        let ck: Checkpoint = read_json(path)?;
        ck.params.validate().map_err(|e| input_err(format!("{}: {e}", path.display())))?;
        Ok(ck)
    }

    pub fn model(&self) -> Result<LoadedModel> {
        let p = self.params.clone();
        Ok(match self.kind {
            ModelKind::StateConditioned => {
                LoadedModel::StateConditioned(StateConditionedModel::new(p, self.n, self.d, self.m, self.horizon)?)
            }
            ModelKind::StateFree => LoadedModel::StateFree(StateFreeModel::new(p, self.n, self.d, self.m, self.horizon)?),
        })
    }
}
