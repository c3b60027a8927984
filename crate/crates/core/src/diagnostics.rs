//! Structural diagnostics of operator snapshots and Chapman-Kolmogorov
//! consistency checks. All logarithms are natural.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::evaluation::{mean, welch_t_test};
use crate::matrix::Matrix;
use crate::operator::OperatorSnapshot;
use crate::special::student_t_two_sided_p;
use crate::PROB_FLOOR;

pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_len(p.len(), q.len())?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `KL(p || q)` with `q` floored; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_len(p.len(), q.len())?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (libm::log(a) - libm::log(b.max(PROB_FLOOR))))
        .sum())
}

fn pairwise_tv(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows();
    if n < 2 {
        return Err(Error::invalid("row comparisons need at least two rows"));
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for k in i + 1..n {
            out.push(tv_distance(a.row(i), a.row(k))?);
        }
    }
    Ok(out)
}

/// Mean total-variation distance over unordered row pairs.
pub fn row_heterogeneity(a: &Matrix) -> Result<f64> {
    let d = pairwise_tv(a)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Largest total-variation distance between two rows.
pub fn dobrushin(a: &Matrix) -> Result<f64> {
    Ok(pairwise_tv(a)?.into_iter().fold(0.0, f64::max))
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * libm::log(x)).sum()
}

/// Mean Shannon entropy of the rows.
pub fn row_entropy(a: &Matrix) -> f64 {
    if a.rows() == 0 {
        return 0.0;
    }
    a.iter_rows().map(entropy).sum::<f64>() / a.rows() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub t: usize,
    pub rho: f64,
    pub entropy: f64,
    pub dobrushin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSeries {
    pub model: String,
    pub records: Vec<DiagnosticRecord>,
}

impl DiagnosticsSeries {
    pub fn rho(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rho).collect()
    }
    pub fn entropy(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.entropy).collect()
    }
    pub fn dobrushin(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.dobrushin).collect()
    }
}

/// `(rho, H, delta)` per snapshot. Rectangular snapshots are rejected.
pub fn diagnostics_series(snapshots: &[OperatorSnapshot], model: &str) -> Result<DiagnosticsSeries> {
    let records = snapshots
        .iter()
        .map(|s| {
            if !s.matrix.is_square() {
                return Err(Error::invalid(alloc::format!(
                    "snapshot at t={} is {}x{}; row comparisons need a square operator",
                    s.t,
                    s.matrix.rows(),
                    s.matrix.cols()
                )));
            }
            Ok(DiagnosticRecord {
                t: s.t,
                rho: row_heterogeneity(&s.matrix)?,
                entropy: row_entropy(&s.matrix),
                dobrushin: dobrushin(&s.matrix)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DiagnosticsSeries { model: model.into(), records })
}

/// Mean row entropy per snapshot; works for rectangular operators too.
pub fn entropy_series(snapshots: &[OperatorSnapshot]) -> Vec<(usize, f64)> {
    snapshots.iter().map(|s| (s.t, row_entropy(&s.matrix))).collect()
}

/// `A_t A_{t+1} ... A_{t+h-1}` from consecutive square one-step snapshots.
pub fn ck_compose(one_step: &[OperatorSnapshot]) -> Result<Matrix> {
    let first = one_step.first().ok_or_else(|| Error::invalid("composition needs at least one snapshot"))?;
    if !first.matrix.is_square() {
        return Err(Error::invalid("composition needs square snapshots"));
    }
    let n = first.matrix.rows();
    let mut acc = first.matrix.clone();
    for w in one_step.windows(2) {
        if w[1].t != w[0].t + 1 {
            return Err(Error::TimestepGap { previous: w[0].t, found: w[1].t });
        }
        if w[1].matrix.rows() != n || w[1].matrix.cols() != n {
            return Err(Error::invalid("composition needs snapshots of one common square shape"));
        }
        acc = acc.matmul(&w[1].matrix)?;
    }
    Ok(acc)
}

/// Row-averaged `KL(direct || composed)` and total variation.
pub fn ck_discrepancy(direct: &Matrix, composed: &Matrix) -> Result<(f64, f64)> {
    if !direct.is_square() || direct.rows() != composed.rows() || direct.cols() != composed.cols() {
        return Err(Error::invalid("CK comparison needs two square operators of the same shape"));
    }
    let n = direct.rows() as f64;
    let mut kl = 0.0;
    let mut tv = 0.0;
    for (p, q) in direct.iter_rows().zip(composed.iter_rows()) {
        kl += kl_divergence(p, q)?;
        tv += tv_distance(p, q)?;
    }
    Ok((kl / n, tv / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkRecord {
    pub t: usize,
    pub kl: f64,
    pub tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkReport {
    pub model: String,
    pub horizon: usize,
    pub records: Vec<CkRecord>,
}

impl CkReport {
    pub fn mean_kl(&self) -> f64 {
        mean(&self.records.iter().map(|r| r.kl).collect::<Vec<_>>())
    }
    pub fn mean_tv(&self) -> f64 {
        mean(&self.records.iter().map(|r| r.tv).collect::<Vec<_>>())
    }
}

/// Compares each direct `h`-step snapshot at `t` with the composition of the
/// one-step snapshots at `t..t+h`. Direct snapshots whose window is not fully
/// covered by `one_step` are skipped.
pub fn ck_series(one_step: &[OperatorSnapshot], direct: &[OperatorSnapshot], h: usize, model: &str) -> Result<CkReport> {
    if h == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let mut records = Vec::new();
    if let Some(first) = one_step.first() {
        let t0 = first.t;
        for snap in direct {
            let Some(start) = snap.t.checked_sub(t0) else { continue };
            let Some(window) = one_step.get(start..start + h) else { continue };
            let composed = ck_compose(window)?;
            if window[0].t != snap.t {
                return Err(Error::TimestepGap { previous: window[0].t, found: snap.t });
            }
            let (kl, tv) = ck_discrepancy(&snap.matrix, &composed)?;
            records.push(CkRecord { t: snap.t, kl, tv });
        }
    }
    Ok(CkReport { model: model.into(), horizon: h, records })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    ensure_len(x.len(), y.len())?;
    if x.len() < 3 {
        return Err(Error::invalid("correlation needs at least three points"));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::degenerate("correlation of a constant series"));
    }
    let r = (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    let t = if r.abs() == 1.0 { f64::INFINITY } else { r * libm::sqrt(df / (1.0 - r * r)) };
    Ok((r, student_t_two_sided_p(t, df)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumComparison {
    pub high_mean: f64,
    pub low_mean: f64,
    pub t: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratificationReport {
    pub model: String,
    pub tail_fraction: f64,
    pub stratum_size: usize,
    pub rho: StratumComparison,
    pub entropy: StratumComparison,
    pub dobrushin: StratumComparison,
}

/// Welch comparison that also accepts two constant strata.
fn compare(high: &[f64], low: &[f64]) -> Result<StratumComparison> {
    let (hm, lm) = (mean(high), mean(low));
    let (t, p) = match welch_t_test(high, low) {
        Ok(tp) => tp,
        Err(Error::Degenerate(_)) if hm == lm => (0.0, 1.0),
        Err(Error::Degenerate(_)) => (if hm > lm { f64::INFINITY } else { f64::NEG_INFINITY }, 0.0),
        Err(e) => return Err(e),
    };
    Ok(StratumComparison { high_mean: hm, low_mean: lm, t, p })
}

/// Compares diagnostics on the `tail` fraction of timesteps with the highest
/// realized variance against the same fraction with the lowest. `rv[k]`
/// belongs to `diag.records[k]`; ties in RV keep time order.
pub fn regime_stratify(diag: &DiagnosticsSeries, rv: &[f64], tail: f64) -> Result<StratificationReport> {
    ensure_len(diag.records.len(), rv.len())?;
    if !(tail > 0.0 && tail <= 0.5) {
        return Err(Error::invalid("tail fraction must lie in (0, 0.5]"));
    }
    if rv.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("realized variance contains non-finite values"));
    }
    let k = libm::floor(tail * rv.len() as f64 + 1e-9) as usize;
    if k < 2 {
        return Err(Error::invalid("each stratum needs at least two timesteps"));
    }
    let mut order: Vec<usize> = (0..rv.len()).collect();
    order.sort_by(|&a, &b| rv[a].total_cmp(&rv[b]));
    let low = &order[..k];
    let high = &order[order.len() - k..];
    let pick = |idx: &[usize], f: fn(&DiagnosticRecord) -> f64| -> Vec<f64> {
        idx.iter().map(|&i| f(&diag.records[i])).collect()
    };
    let cmp = |f: fn(&DiagnosticRecord) -> f64| compare(&pick(high, f), &pick(low, f));
    Ok(StratificationReport {
        model: diag.model.clone(),
        tail_fraction: tail,
        stratum_size: k,
        rho: cmp(|r| r.rho)?,
        entropy: cmp(|r| r.entropy)?,
        dobrushin: cmp(|r| r.dobrushin)?,
    })
}
