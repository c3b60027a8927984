//! Quantile binning of returns into Markov states and construction of the
//! two label families (forward-return bins and future states).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SplitIndex;

/// Interior bin edges; bin `i` is `[edges[i-1], edges[i])` with the outer
/// bins unbounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub n: usize,
    pub edges: Vec<f64>,
}

impl BinEdges {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.iter().any(|e| e.is_nan()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bin edges must be strictly increasing"));
        }
        if edges.is_empty() {
            return Err(Error::DegenerateBins { effective: 1 });
        }
        Ok(BinEdges { n: edges.len() + 1, edges })
    }

    /// Bin index of `value` under the left-inclusive convention.
    #[inline]
    pub fn bin_of(&self, value: f64) -> usize {
        self.edges.partition_point(|&e| e <= value)
    }

    /// `(lower, upper)` bounds of bin `i`, infinite at the ends.
    pub fn interval(&self, i: usize) -> (f64, f64) {
        let lo = if i == 0 { f64::NEG_INFINITY } else { self.edges[i - 1] };
        let hi = if i + 1 == self.n { f64::INFINITY } else { self.edges[i] };
        (lo, hi)
    }

    /// Bins lying entirely below zero, i.e. with upper edge `<= 0`.
    pub fn negative_bins(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.interval(i).1 <= 0.0).collect()
    }
}

/// Type-7 quantile: linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Fits `n` equal-mass bins on training values.
///
/// Edges sit at the `k/n` quantiles. Duplicate edges, and edges at or below
/// the sample minimum (which would leave the lowest bin empty), are
/// collapsed, so the returned `n` may be smaller than requested.
pub fn fit_quantile_bins(train_values: &[f64], n: usize) -> Result<BinEdges> {
    if n < 2 {
        return Err(Error::invalid("at least two bins are required"));
    }
    if train_values.len() < n {
        return Err(Error::invalid(alloc::format!(
            "{} training values cannot fill {n} bins",
            train_values.len()
        )));
    }
    if let Some(index) = train_values.iter().position(|v| v.is_nan()) {
        return Err(Error::NanValue { index });
    }
    let mut sorted = train_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let min = sorted[0];

    let mut edges: Vec<f64> = Vec::with_capacity(n - 1);
    for k in 1..n {
        let e = quantile_sorted(&sorted, k as f64 / n as f64);
        if e > min && edges.last().is_none_or(|&last| e > last) {
            edges.push(e);
        }
    }
    if edges.is_empty() {
        return Err(Error::DegenerateBins { effective: 1 });
    }
    Ok(BinEdges { n: edges.len() + 1, edges })
}

/// Discretized Markov states in `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSeries {
    pub states: Vec<usize>,
    pub n: usize,
}

impl StateSeries {
    pub fn new(states: Vec<usize>, n: usize) -> Result<Self> {
        if let Some(index) = states.iter().position(|&s| s >= n) {
            return Err(Error::invalid(alloc::format!(
                "state {} at index {index} is outside 0..{n}",
                states[index]
            )));
        }
        Ok(StateSeries { states, n })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

pub fn discretize(values: &[f64], edges: &BinEdges) -> Result<StateSeries> {
    let mut states = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NanValue { index });
        }
        states.push(edges.bin_of(v));
    }
    Ok(StateSeries { states, n: edges.n })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    ForwardReturn,
    StateToState,
}

/// Labels `labels[t]` for `t` in `0..labels.len()`; later timesteps have no
/// label because their future window is not observed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSeries {
    pub labels: Vec<usize>,
    pub m: usize,
    pub horizon: usize,
    pub kind: LabelKind,
}

impl LabelSeries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<usize> {
        self.labels.get(t).copied()
    }

    pub fn valid_range(&self) -> core::ops::Range<usize> {
        0..self.labels.len()
    }

    /// Re-indexes so that new index `t` holds the old label at `t + offset`.
    pub fn shifted(&self, offset: usize) -> LabelSeries {
        LabelSeries {
            labels: self.labels.get(offset..).unwrap_or(&[]).to_vec(),
            ..self.clone()
        }
    }
}

/// Forward-return labels with their train-fit bin edges.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardLabels {
    pub labels: LabelSeries,
    pub edges: BinEdges,
    pub returns: Vec<f64>,
}

/// `R_t = (P[t+1+h] - P[t+1]) / P[t+1]`, binned into `m` quantile bins fit
/// on `t < split.train_end`. Indices are price positions; the last `h + 1`
/// prices carry no label.
pub fn forward_return_labels(
    prices: &[f64],
    h: usize,
    m: usize,
    split: &SplitIndex,
) -> Result<ForwardLabels> {
    if h == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if m < 2 {
        return Err(Error::invalid("forward-return labels need at least two bins"));
    }
    if let Some((index, &value)) = prices.iter().enumerate().find(|(_, &p)| !(p > 0.0)) {
        return Err(Error::NonPositivePrice { index, value });
    }
    let count = prices.len().saturating_sub(h + 1);
    let returns: Vec<f64> =
        (0..count).map(|t| (prices[t + 1 + h] - prices[t + 1]) / prices[t + 1]).collect();
    let train = &returns[..split.train_end.min(count)];
    if train.is_empty() {
        return Err(Error::invalid(alloc::format!(
            "horizon {h} leaves no labelled training timesteps"
        )));
    }
    // A constant target still gets a valid (single-bin) labelling.
    let edges = match fit_quantile_bins(train, m.min(train.len()).max(2)) {
        Ok(e) => e,
        Err(Error::DegenerateBins { .. }) => BinEdges { n: 2, edges: alloc::vec![train[0]] },
        Err(e) => return Err(e),
    };
    let labels = discretize(&returns, &edges)?;
    Ok(ForwardLabels {
        labels: LabelSeries {
            labels: labels.states,
            m: edges.n,
            horizon: h,
            kind: LabelKind::ForwardReturn,
        },
        edges,
        returns,
    })
}

/// `labels[t] = states[t + h]`.
pub fn state_labels(states: &StateSeries, h: usize) -> Result<LabelSeries> {
    if h == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if h >= states.len() {
        return Err(Error::invalid(alloc::format!(
            "horizon {h} is not shorter than the {}-step series",
            states.len()
        )));
    }
    Ok(LabelSeries {
        labels: states.states[h..].to_vec(),
        m: states.n,
        horizon: h,
        kind: LabelKind::StateToState,
    })
}

#[cfg(test)]
mod tests {
    extern crate std;

    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    // Independent order-statistic quantile: rank r = 1 + q (N - 1), interpolate
    // between the floor and ceiling ranks.
    fn oracle_quantile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = 1.0 + q * (v.len() as f64 - 1.0);
        let below = v[(rank.floor() as usize) - 1];
        let above = v[(rank.ceil() as usize) - 1];
        below + (rank - rank.floor()) * (above - below)
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(oracle_quantile(&v, 0.5), 4.5);
        assert_eq!(fit_quantile_bins(&v, 2).unwrap().edges, vec![4.5]);

        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let expected: Vec<f64> = [0.25, 0.5, 0.75].iter().map(|&q| oracle_quantile(&v, q)).collect();
        assert_eq!(expected, vec![25.75, 50.5, 75.25]);
        let e = fit_quantile_bins(&v, 4).unwrap();
        for (a, b) in e.edges.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_values_are_degenerate() {
        assert_eq!(fit_quantile_bins(&[3.0; 20], 4), Err(Error::DegenerateBins { effective: 1 }));
        assert!(fit_quantile_bins(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn duplicate_edges_collapse() {
        let mut v = vec![0.0; 50];
        v.extend((0..50).map(|i| 1.0 + i as f64));
        let e = fit_quantile_bins(&v, 4).unwrap();
        assert!(e.n < 4);
        assert!(e.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn discretize_boundaries() {
        let e = BinEdges::new(vec![4.5]).unwrap();
        assert_eq!(discretize(&[1.0, 9.0], &e).unwrap().states, vec![0, 1]);
        assert_eq!(discretize(&[-1e300, f64::NEG_INFINITY], &e).unwrap().states, vec![0, 0]);
        assert_eq!(discretize(&[4.5], &e).unwrap().states, vec![1]);
        assert_eq!(discretize(&[1.0, f64::NAN], &e), Err(Error::NanValue { index: 1 }));
    }

    #[test]
    fn forward_return_example() {
        let split = SplitIndex { train_end: 2, val_end: 3, len: 4 };
        let fl = forward_return_labels(&[100.0, 100.0, 110.0, 121.0], 1, 2, &split).unwrap();
        assert_eq!(fl.returns.len(), 2);
        assert!((fl.returns[0] - 0.10).abs() < 1e-15);
        assert!((fl.returns[1] - 0.10).abs() < 1e-15);
        assert!(forward_return_labels(&[100.0, 100.0, 110.0, 121.0], 1, 1, &split).is_err());
    }

    #[test]
    fn constant_prices_give_identical_labels() {
        let prices = [50.0; 30];
        let split = SplitIndex { train_end: 20, val_end: 25, len: 30 };
        let fl = forward_return_labels(&prices, 2, 5, &split).unwrap();
        assert!(fl.returns.iter().all(|&r| r == 0.0));
        assert!(fl.labels.labels.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(fl.labels.len(), 30 - 3);
    }

    #[test]
    fn forward_horizon_too_long() {
        let split = SplitIndex { train_end: 2, val_end: 3, len: 4 };
        assert!(forward_return_labels(&[1.0, 1.0, 1.0, 1.0], 3, 2, &split).is_err());
    }

    #[test]
    fn state_label_examples() {
        let s = StateSeries::new(vec![0, 1, 2], 3).unwrap();
        assert_eq!(state_labels(&s, 1).unwrap().labels, vec![1, 2]);
        assert_eq!(state_labels(&s, 2).unwrap().labels, vec![2]);
        assert!(state_labels(&s, 0).is_err());
        assert!(state_labels(&s, 3).is_err());
    }

    #[test]
    fn negative_bins_exclude_straddling_bin() {
        let e = BinEdges::new(vec![-0.02, -0.01, 0.005, 0.02]).unwrap();
        assert_eq!(e.negative_bins(), vec![0, 1]);
        let e = BinEdges::new(vec![-0.02, 0.0, 0.02]).unwrap();
        assert_eq!(e.negative_bins(), vec![0, 1]);
    }

    #[test]
    fn train_marginals_roughly_uniform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..1000).map(|_| rng.random::<f64>().powi(3) - 0.3).collect();
        for n in [2, 5, 10, 20] {
            let e = fit_quantile_bins(&values, n).unwrap();
            assert_eq!(e.n, n);
            let s = discretize(&values, &e).unwrap();
            for k in 0..n {
                let freq = s.states.iter().filter(|&&x| x == k).count() as f64 / 1000.0;
                let target = 1.0 / n as f64;
                assert!((freq - target).abs() <= 0.3 * target, "n={n} bin {k}: {freq}");
            }
        }
    }

    proptest! {
        #[test]
        fn no_empty_bins_on_training_values(
            values in proptest::collection::vec(-1e3f64..1e3, 40..200),
            n in 2usize..10,
        ) {
            let e = fit_quantile_bins(&values, n).unwrap();
            let s = discretize(&values, &e).unwrap();
            for k in 0..e.n {
                prop_assert!(s.states.contains(&k), "bin {} empty", k);
            }
        }

        #[test]
        fn state_labels_shift_back(states in proptest::collection::vec(0usize..7, 2..60), h in 1usize..5) {
            prop_assume!(h < states.len());
            let s = StateSeries::new(states.clone(), 7).unwrap();
            let l = state_labels(&s, h).unwrap();
            for t in 0..l.len() {
                prop_assert_eq!(l.labels[t], states[t + h]);
            }
        }
    }
}
