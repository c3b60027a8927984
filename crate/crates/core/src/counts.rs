//! Empirical transition counts, sparsity metrics and the count-based
//! baselines: marginal, additive-smoothed conditional, and backoff.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::discretization::{LabelSeries, StateSeries};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::PROB_FLOOR;

/// `counts[i][j]` = number of training timesteps with state `i` and label `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    pub n: usize,
    pub m: usize,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CountMatrix {
    pub fn zeros(n: usize, m: usize) -> Self {
        CountMatrix { n, m, counts: vec![0; n * m], total: 0 }
    }

    /// Tallies `(state, label)` pairs.
    pub fn from_pairs<I: IntoIterator<Item = (usize, usize)>>(n: usize, m: usize, pairs: I) -> Result<Self> {
        let mut c = CountMatrix::zeros(n, m);
        for (i, j) in pairs {
            if i >= n || j >= m {
                return Err(Error::invalid(alloc::format!("pair ({i}, {j}) outside {n}x{m}")));
            }
            c.counts[i * m + j] += 1;
            c.total += 1;
        }
        Ok(c)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.m..(i + 1) * self.m]
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.row(i).iter().sum()
    }

    pub fn column_totals(&self) -> Vec<u64> {
        let mut out = vec![0; self.m];
        for i in 0..self.n {
            for (o, &c) in out.iter_mut().zip(self.row(i)) {
                *o += c;
            }
        }
        out
    }
}

/// Counts `(states[t], labels[t])` for `t` in `range` where a label exists.
pub fn count_transitions(
    states: &StateSeries,
    labels: &LabelSeries,
    range: Range<usize>,
) -> Result<CountMatrix> {
    let end = range.end.min(labels.len()).min(states.len());
    if range.start >= end {
        return Err(Error::invalid("count range contains no labelled timesteps"));
    }
    CountMatrix::from_pairs(
        states.n,
        labels.m,
        (range.start..end).map(|t| (states.states[t], labels.labels[t])),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyMetrics {
    pub zero_frac: f64,
    pub below_threshold_frac: f64,
    pub median_row_support: f64,
}

pub fn degeneracy_metrics(c: &CountMatrix, threshold: u64) -> DegeneracyMetrics {
    let cells = (c.n * c.m) as f64;
    let zero = c.counts.iter().filter(|&&x| x == 0).count() as f64;
    let below = c.counts.iter().filter(|&&x| x < threshold).count() as f64;
    let mut support: Vec<usize> =
        (0..c.n).map(|i| c.row(i).iter().filter(|&&x| x > 0).count()).collect();
    support.sort_unstable();
    let median = match support.len() {
        0 => 0.0,
        len if len % 2 == 1 => support[len / 2] as f64,
        len => 0.5 * (support[len / 2 - 1] + support[len / 2]) as f64,
    };
    DegeneracyMetrics {
        zero_frac: if cells > 0.0 { zero / cells } else { 0.0 },
        below_threshold_frac: if cells > 0.0 { below / cells } else { 0.0 },
        median_row_support: median,
    }
}

/// Pseudo-count `alpha` and backoff weight `lambda` on the conditional.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    pub alpha: f64,
    pub lambda: f64,
}

impl SmoothingParams {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("alpha must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid("lambda must lie in [0, 1]"));
        }
        Ok(SmoothingParams { alpha, lambda })
    }
}

pub fn marginal_estimator(c: &CountMatrix, alpha: f64) -> Result<Vec<f64>> {
    let denom = c.total as f64 + alpha * c.m as f64;
    if !(denom > 0.0) {
        return Err(Error::degenerate("marginal of an empty count matrix needs alpha > 0"));
    }
    Ok(c.column_totals().iter().map(|&s| (s as f64 + alpha) / denom).collect())
}

pub fn conditional_estimator(c: &CountMatrix, alpha: f64) -> Result<Matrix> {
    let mut a = Matrix::zeros(c.n, c.m);
    for i in 0..c.n {
        let denom = c.row_total(i) as f64 + alpha * c.m as f64;
        if !(denom > 0.0) {
            return Err(Error::EmptyRow { row: i });
        }
        for (out, &x) in a.row_mut(i).iter_mut().zip(c.row(i)) {
            *out = (x as f64 + alpha) / denom;
        }
    }
    Ok(a)
}

/// `lambda * conditional + (1 - lambda) * marginal`, row by row.
pub fn backoff_estimator(c: &CountMatrix, params: SmoothingParams) -> Result<Matrix> {
    let SmoothingParams { alpha, lambda } = SmoothingParams::new(params.alpha, params.lambda)?;
    let marginal = marginal_estimator(c, alpha)?;
    if lambda == 0.0 {
        return Ok(Matrix::replicate_row(&marginal, c.n));
    }
    let mut a = conditional_estimator(c, alpha)?;
    if lambda == 1.0 {
        return Ok(a);
    }
    for i in 0..c.n {
        for (x, &p) in a.row_mut(i).iter_mut().zip(&marginal) {
            *x = lambda * *x + (1.0 - lambda) * p;
        }
    }
    Ok(a)
}

/// Mean negative log-likelihood of `(state, label)` pairs under `a`.
pub fn pairs_nll(a: &Matrix, pairs: &[(usize, usize)]) -> f64 {
    let total: f64 = pairs.iter().map(|&(i, j)| -libm::log(a.get(i, j).max(PROB_FLOOR))).sum();
    total / pairs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid { alphas: vec![0.01, 0.1, 0.5, 1.0], lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0] }
    }
}

/// Grid point minimizing validation NLL. Points are visited by increasing
/// lambda then increasing alpha, and only a strictly lower NLL (by more
/// than 1e-12) displaces the incumbent.
pub fn tune_backoff(
    c: &CountMatrix,
    val_pairs: &[(usize, usize)],
    grid: &TuningGrid,
) -> Result<SmoothingParams> {
    if val_pairs.is_empty() {
        return Err(Error::invalid("validation pairs are empty"));
    }
    if let Some(&(i, j)) = val_pairs.iter().find(|&&(i, j)| i >= c.n || j >= c.m) {
        return Err(Error::invalid(alloc::format!("validation pair ({i}, {j}) out of range")));
    }
    let mut lambdas = grid.lambdas.clone();
    let mut alphas = grid.alphas.clone();
    lambdas.sort_by(f64::total_cmp);
    alphas.sort_by(f64::total_cmp);

    let mut best: Option<(f64, SmoothingParams)> = None;
    for &lambda in &lambdas {
        for &alpha in &alphas {
            let params = SmoothingParams::new(alpha, lambda)?;
            // Unusable corners (alpha = 0 with empty rows) are skipped.
            let Ok(a) = backoff_estimator(c, params) else { continue };
            let nll = pairs_nll(&a, val_pairs);
            if best.is_none_or(|(b, _)| nll < b - 1e-12) {
                best = Some((nll, params));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::degenerate("no grid point yields a valid estimator"))
}
