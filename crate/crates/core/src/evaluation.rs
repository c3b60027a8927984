//! Held-out scoring: NLL and its gain over the marginal, calibration of a
//! coarse event, circular block bootstrap intervals, and Welch's t-test.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::matrix::Matrix;
use crate::special::student_t_two_sided_p;
use crate::PROB_FLOOR;

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// `-log p[label]` per row, with `p` floored.
pub fn per_sample_nll(rows: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    ensure_len(rows.rows(), labels.len())?;
    labels
        .iter()
        .enumerate()
        .map(|(r, &j)| {
            if j >= rows.cols() {
                return Err(Error::invalid(alloc::format!("label {j} outside 0..{}", rows.cols())));
            }
            Ok(-libm::log(rows.get(r, j).max(PROB_FLOOR)))
        })
        .collect()
}

pub fn mean_nll(rows: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("NLL of an empty sample"));
    }
    Ok(mean(&per_sample_nll(rows, labels)?))
}

/// Per-sample `nll(marginal) - nll(model)`.
pub fn per_sample_delta_nll(model: &Matrix, marginal: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    ensure_len(model.cols(), marginal.len())?;
    let base = Matrix::replicate_row(marginal, model.rows());
    let a = per_sample_nll(&base, labels)?;
    let b = per_sample_nll(model, labels)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// `NLL(marginal) - NLL(model)`; positive when the model beats the marginal.
pub fn delta_nll(model: &Matrix, marginal: &[f64], labels: &[usize]) -> Result<f64> {
    ensure_len(model.cols(), marginal.len())?;
    let base = Matrix::replicate_row(marginal, model.rows());
    Ok(mean_nll(&base, labels)? - mean_nll(model, labels)?)
}

pub fn event_probability(row: &[f64], event: &[usize]) -> Result<f64> {
    if event.is_empty() {
        return Err(Error::invalid("event must contain at least one bin"));
    }
    event
        .iter()
        .map(|&j| row.get(j).copied().ok_or_else(|| Error::invalid(alloc::format!("bin {j} out of range"))))
        .sum()
}

/// Equal-width-bin expected calibration error; empty bins are skipped.
pub fn ece(probs: &[f64], outcomes: &[bool], bins: usize) -> Result<f64> {
    ensure_len(probs.len(), outcomes.len())?;
    if bins < 2 {
        return Err(Error::invalid("calibration needs at least two bins"));
    }
    if probs.is_empty() {
        return Err(Error::invalid("calibration of an empty sample"));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("probabilities must lie in [0, 1]"));
    }
    let mut count = vec![0usize; bins];
    let mut prob_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&p, &o) in probs.iter().zip(outcomes) {
        let b = (libm::floor(p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        prob_sum[b] += p;
        hits[b] += o as usize;
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (prob_sum[b] / c - hits[b] as f64 / c).abs()
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub block_len: usize,
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { block_len: 21, reps: 1000, seed: 0, level: 0.95 }
    }
}

/// Replicate means of a circular block bootstrap, sorted ascending.
/// Replicate `r` draws from its own ChaCha stream `r` of `cfg.seed`.
pub fn bootstrap_means(values: &[f64], cfg: &BootstrapConfig) -> Result<Vec<f64>> {
    let n = values.len();
    if cfg.block_len == 0 || n < cfg.block_len {
        return Err(Error::invalid(alloc::format!(
            "block bootstrap needs at least block_len = {} samples, got {n}",
            cfg.block_len
        )));
    }
    if cfg.reps < 2 {
        return Err(Error::invalid("bootstrap needs at least two replicates"));
    }
    // Summing offsets from a fixed anchor makes a constant series exact.
    let anchor = values[0];
    let blocks = n.div_ceil(cfg.block_len);
    let mut means = Vec::with_capacity(cfg.reps);
    for rep in 0..cfg.reps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(rep as u64);
        let mut sum = 0.0;
        let mut taken = 0;
        'fill: for _ in 0..blocks {
            let start = rng.random_range(0..n);
            for k in 0..cfg.block_len {
                if taken == n {
                    break 'fill;
                }
                sum += values[(start + k) % n] - anchor;
                taken += 1;
            }
        }
        means.push(anchor + sum / n as f64);
    }
    means.sort_by(f64::total_cmp);
    Ok(means)
}

/// Percentile interval at `cfg.level` from [`bootstrap_means`].
pub fn block_bootstrap_ci(values: &[f64], cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::invalid("confidence level must lie in (0, 1)"));
    }
    let means = bootstrap_means(values, cfg)?;
    Ok(percentile_interval(&means, cfg.level))
}

/// Order statistics `floor(a/2 (R-1))` and `ceil((1-a/2)(R-1))` of sorted values.
pub fn percentile_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let alpha = 1.0 - level;
    let last = (sorted.len() - 1) as f64;
    let lo = libm::floor(alpha / 2.0 * last) as usize;
    let hi = (libm::ceil((1.0 - alpha / 2.0) * last) as usize).min(sorted.len() - 1);
    (sorted[lo], sorted[hi])
}

/// Welch's unequal-variance t statistic and two-sided p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least two values"));
    }
    let (va, vb) = (sample_variance(a) / a.len() as f64, sample_variance(b) / b.len() as f64);
    let se2 = va + vb;
    if !(se2 > 0.0) {
        return Err(Error::degenerate("both samples have zero variance"));
    }
    let t = (mean(a) - mean(b)) / libm::sqrt(se2);
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    Ok((t, student_t_two_sided_p(t, df)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub horizon: usize,
    pub m: usize,
    pub samples: usize,
    pub mean_nll: f64,
    pub delta_nll_vs_marginal: f64,
    /// Calibration of the negative-return event, when the bins define one.
    pub ece: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bootstrap: BootstrapConfig,
}

pub const ECE_BINS: usize = 10;

/// Scores `rows` (one predicted distribution per sample) on `labels`.
/// `event` lists the bins making up the calibration event; an empty list
/// skips calibration.
pub fn evaluate(
    model: &str,
    horizon: usize,
    rows: &Matrix,
    marginal: &[f64],
    labels: &[usize],
    event: &[usize],
    bootstrap: &BootstrapConfig,
) -> Result<EvalReport> {
    let deltas = per_sample_delta_nll(rows, marginal, labels)?;
    let (ci_low, ci_high) = block_bootstrap_ci(&deltas, bootstrap)?;
    let ece = if event.is_empty() {
        None
    } else {
        let probs: Vec<f64> =
            rows.iter_rows().map(|r| event_probability(r, event).map(|p| p.clamp(0.0, 1.0))).collect::<Result<_>>()?;
        let outcomes: Vec<bool> = labels.iter().map(|j| event.contains(j)).collect();
        Some(ece(&probs, &outcomes, ECE_BINS)?)
    };
    Ok(EvalReport {
        model: model.into(),
        horizon,
        m: rows.cols(),
        samples: labels.len(),
        mean_nll: mean_nll(rows, labels)?,
        delta_nll_vs_marginal: delta_nll(rows, marginal, labels)?,
        ece,
        ci_low,
        ci_high,
        bootstrap: *bootstrap,
    })
}
