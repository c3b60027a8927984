//! Returns, covariate alignment, train-only standardization, feature ranking
//! and chronological splitting.
//!
//! All row indices here are positions on the daily grid. Parsing dates and
//! files is the caller's business; a raw column arrives as one optional value
//! per grid row.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::discretization::{discretize, fit_quantile_bins, LabelSeries};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Quantile bins per feature when estimating mutual information.
pub const MI_QUANTILE_BINS: usize = 10;

/// Columns whose training standard deviation falls below this are dropped.
pub const MIN_TRAIN_STD: f64 = 1e-12;

/// One-period simple returns; `out[t]` belongs to the date of `prices[t + 1]`.
pub fn compute_returns(prices: &[f64]) -> Result<Vec<f64>> {
    if prices.len() < 2 {
        return Err(Error::invalid("at least two prices are required"));
    }
    if let Some((index, &value)) = prices.iter().enumerate().find(|(_, &p)| !(p > 0.0)) {
        return Err(Error::NonPositivePrice { index, value });
    }
    Ok(prices.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    ForwardFill,
    Interpolate,
}

/// A covariate column on the daily grid, `None` where nothing was released.
#[derive(Clone, Debug, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub values: Vec<Option<f64>>,
    pub fill_mode: FillMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Internal gaps up to this many grid days are interpolated.
    pub max_interp_gap: usize,
    /// A column must have an observation within this many leading grid days.
    pub max_leading_missing: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { max_interp_gap: 5, max_leading_missing: 30 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NoObservations,
    ExtensiveExtrapolation,
    ConstantInTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: DropReason,
}

/// Gap-filled covariates. Row `r` of `values` is grid row `first_row + r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures {
    pub names: Vec<String>,
    pub values: Matrix,
    pub first_row: usize,
    pub dropped: Vec<DroppedColumn>,
}

/// Fills every column onto the grid.
///
/// Forward-fill columns carry the last released value. Interpolated columns
/// fill internal gaps of at most `max_interp_gap` rows linearly between the
/// bracketing observations and fall back to forward fill for longer gaps.
/// Rows before the latest first observation among kept columns are trimmed.
pub fn align_features(columns: &[RawColumn], config: &AlignConfig) -> Result<AlignedFeatures> {
    let len = columns.first().map_or(0, |c| c.values.len());
    if let Some(c) = columns.iter().find(|c| c.values.len() != len) {
        return Err(Error::LengthMismatch { expected: len, got: c.values.len() });
    }

    let mut names = Vec::new();
    let mut filled: Vec<Vec<f64>> = Vec::new();
    let mut dropped = Vec::new();
    let mut first_row = 0usize;

    for col in columns {
        if let Some(idx) = col.values.iter().position(|v| matches!(v, Some(x) if x.is_nan())) {
            return Err(Error::NanValue { index: idx });
        }
        let Some(first) = col.values.iter().position(Option::is_some) else {
            dropped.push(DroppedColumn { name: col.name.clone(), reason: DropReason::NoObservations });
            continue;
        };
        if first >= config.max_leading_missing {
            dropped.push(DroppedColumn {
                name: col.name.clone(),
                reason: DropReason::ExtensiveExtrapolation,
            });
            continue;
        }
        first_row = first_row.max(first);
        names.push(col.name.clone());
        filled.push(fill_column(&col.values, col.fill_mode, config.max_interp_gap));
    }

    let rows = len.saturating_sub(first_row);
    let mut values = Matrix::zeros(rows, filled.len());
    for (j, col) in filled.iter().enumerate() {
        for r in 0..rows {
            values.set(r, j, col[first_row + r]);
        }
    }
    Ok(AlignedFeatures { names, values, first_row, dropped })
}

// Leading entries before the first observation are left as NaN; the caller
// trims them.
fn fill_column(values: &[Option<f64>], mode: FillMode, max_gap: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; values.len()];
    let mut last: Option<(usize, f64)> = None;
    let mut t = 0;
    while t < values.len() {
        match values[t] {
            Some(v) => {
                out[t] = v;
                last = Some((t, v));
                t += 1;
            }
            None => {
                let gap_end = values[t..].iter().position(Option::is_some).map(|o| t + o);
                match (last, gap_end) {
                    (Some((i0, v0)), Some(i1))
                        if mode == FillMode::Interpolate && i1 - t <= max_gap =>
                    {
                        let v1 = values[i1].unwrap();
                        let span = (i1 - i0) as f64;
                        for (s, slot) in out.iter_mut().enumerate().take(i1).skip(t) {
                            let w = (s - i0) as f64 / span;
                            *slot = v0 + w * (v1 - v0);
                        }
                        t = i1;
                    }
                    (Some((_, v0)), end) => {
                        let stop = end.unwrap_or(values.len());
                        out[t..stop].fill(v0);
                        t = stop;
                    }
                    (None, end) => t = end.unwrap_or(values.len()),
                }
            }
        }
    }
    out
}

/// Chronological boundaries: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

impl SplitIndex {
    pub fn new(train_end: usize, val_end: usize, len: usize) -> Result<Self> {
        if 0 < train_end && train_end < val_end && val_end < len {
            Ok(SplitIndex { train_end, val_end, len })
        } else {
            Err(Error::invalid(alloc::format!(
                "split boundaries must satisfy 0 < {train_end} < {val_end} < {len}"
            )))
        }
    }

    pub fn train(&self) -> core::ops::Range<usize> {
        0..self.train_end
    }

    pub fn validation(&self) -> core::ops::Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> core::ops::Range<usize> {
        self.val_end..self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.70, validation: 0.15 }
    }
}

pub const MIN_SPLIT_LEN: usize = 10;

pub fn chronological_split(len: usize, fractions: SplitFractions) -> Result<SplitIndex> {
    if len < MIN_SPLIT_LEN {
        return Err(Error::invalid(alloc::format!(
            "series of length {len} is too short to split (minimum {MIN_SPLIT_LEN})"
        )));
    }
    let SplitFractions { train, validation } = fractions;
    if !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
        return Err(Error::invalid("split fractions must be positive and sum below one"));
    }
    // The epsilon keeps e.g. 0.85 * 100 from flooring to 84.
    let floor = |x: f64| libm::floor(x + 1e-9) as usize;
    let train_end = floor(train * len as f64);
    let val_end = floor((train + validation) * len as f64);
    SplitIndex::new(train_end, val_end, len)
}

/// Train-standardized covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub column_names: Vec<String>,
    pub train_mean: Vec<f64>,
    pub train_std: Vec<f64>,
    pub dropped: Vec<DroppedColumn>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> FeatureMatrix {
        let mut values = Matrix::zeros(self.rows(), columns.len());
        for t in 0..self.rows() {
            for (k, &j) in columns.iter().enumerate() {
                values.set(t, k, self.values.get(t, j));
            }
        }
        FeatureMatrix {
            values,
            column_names: columns.iter().map(|&j| self.column_names[j].clone()).collect(),
            train_mean: columns.iter().map(|&j| self.train_mean[j]).collect(),
            train_std: columns.iter().map(|&j| self.train_std[j]).collect(),
            dropped: self.dropped.clone(),
        }
    }
}

/// Z-scores every column with the mean and population standard deviation of
/// its first `train_end` rows. Near-constant columns are dropped.
pub fn standardize(features: &Matrix, names: &[String], train_end: usize) -> Result<FeatureMatrix> {
    if names.len() != features.cols() {
        return Err(Error::LengthMismatch { expected: features.cols(), got: names.len() });
    }
    if train_end == 0 || train_end > features.rows() {
        return Err(Error::invalid("train segment must be non-empty and within the matrix"));
    }
    if let Some(idx) = features.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::NanValue { index: idx / features.cols().max(1) });
    }

    let n = train_end as f64;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let mean = (0..train_end).map(|t| features.get(t, j)).sum::<f64>() / n;
        let var = (0..train_end)
            .map(|t| {
                let d = features.get(t, j) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = libm::sqrt(var);
        if std < MIN_TRAIN_STD {
            dropped.push(DroppedColumn { name: name.clone(), reason: DropReason::ConstantInTrain });
        } else {
            kept.push((j, mean, std));
        }
    }

    let mut values = Matrix::zeros(features.rows(), kept.len());
    for t in 0..features.rows() {
        for (k, &(j, mean, std)) in kept.iter().enumerate() {
            values.set(t, k, (features.get(t, j) - mean) / std);
        }
    }
    Ok(FeatureMatrix {
        values,
        column_names: kept.iter().map(|&(j, _, _)| names[j].clone()).collect(),
        train_mean: kept.iter().map(|k| k.1).collect(),
        train_std: kept.iter().map(|k| k.2).collect(),
        dropped,
    })
}

/// Plug-in Shannon entropy (nats) of a discrete sample.
pub fn plugin_entropy(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let k = values.iter().copied().max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; k];
    for &v in values {
        counts[v] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * libm::log(p)
        })
        .sum()
}

/// Plug-in mutual information (nats) between two aligned discrete samples.
pub fn mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let ka = a.iter().copied().max().unwrap_or(0) + 1;
    let kb = b.iter().copied().max().unwrap_or(0) + 1;
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c == 0 {
                continue;
            }
            // log(p_xy / (p_x p_y)) with counts
            mi += (c as f64 / n) * libm::log(c as f64 * n / (ca[x] as f64 * cb[y] as f64));
        }
    }
    Ok(mi.max(0.0))
}

/// Quantile-discretized plug-in MI between each feature column and the label,
/// over training rows that carry a label.
pub fn feature_label_mi(
    features: &Matrix,
    labels: &LabelSeries,
    train_end: usize,
) -> Result<Vec<f64>> {
    let rows = train_end.min(labels.len()).min(features.rows());
    if rows == 0 {
        return Err(Error::invalid("no labelled training rows for feature ranking"));
    }
    let y = &labels.labels[..rows];
    let mut scores = Vec::with_capacity(features.cols());
    for j in 0..features.cols() {
        let column: Vec<f64> = (0..rows).map(|t| features.get(t, j)).collect();
        let bins = match fit_quantile_bins(&column, MI_QUANTILE_BINS.min(rows)) {
            Ok(edges) => edges,
            // A column with a single effective bin carries no information.
            Err(Error::DegenerateBins { .. }) => {
                scores.push(0.0);
                continue;
            }
            Err(e) => return Err(e),
        };
        let x = discretize(&column, &bins)?;
        scores.push(mutual_information(&x.states, y)?);
    }
    Ok(scores)
}

/// Indices of the `k` features with the highest training MI; ties go to
/// the lower column index.
pub fn rank_features_mi(
    features: &Matrix,
    labels: &LabelSeries,
    split: &SplitIndex,
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > features.cols() {
        return Err(Error::invalid(alloc::format!(
            "k = {k} exceeds the {} available features",
            features.cols()
        )));
    }
    let scores = feature_label_mi(features, labels, split.train_end)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Trailing mean of squared returns over `window` observations, inclusive of
/// `t`. The first `window - 1` entries are unavailable.
pub fn realized_variance(returns: &[f64], window: usize) -> Result<Vec<Option<f64>>> {
    if window <= 1 {
        return Err(Error::invalid("realized-variance window must exceed 1"));
    }
    if returns.len() < window {
        return Err(Error::invalid(alloc::format!(
            "{} returns are fewer than the {window}-day window",
            returns.len()
        )));
    }
    let sq: Vec<f64> = returns.iter().map(|r| r * r).collect();
    let mut out = vec![None; returns.len()];
    for t in window - 1..returns.len() {
        // Summing each window directly keeps values exact for constant input.
        let s: f64 = sq[t + 1 - window..=t].iter().sum();
        out[t] = Some(s / window as f64);
    }
    Ok(out)
}
