//! A regime-switching Markov chain with known operators, used as ground
//! truth for estimator recovery and for exact Chapman-Kolmogorov checks.
//!
//! The regime follows a sticky chain; at each step the state moves with the
//! current regime's operator. Features are the regime one-hot plus Gaussian
//! noise, so the time variation is learnable from them.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::tv_distance;
use crate::discretization::StateSeries;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::operator::OperatorSnapshot;

pub const MIN_SYNTHETIC_LEN: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub regimes: Vec<Matrix>,
    /// Probability of keeping the current regime at each step.
    pub regime_persistence: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

/// Diagonal-heavy operator: `stay` on the diagonal, the rest spread evenly.
pub fn persistent_operator(n: usize, stay: f64) -> Matrix {
    let off = (1.0 - stay) / (n - 1) as f64;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, if i == j { stay } else { off });
        }
    }
    a
}

/// Mean-reverting operator: `flip` on the anti-diagonal. When `n` is odd the
/// centre row has no opposite state, so it splits `flip` between the two
/// extremes.
pub fn reverting_operator(n: usize, flip: f64) -> Matrix {
    let off = (1.0 - flip) / (n - 1) as f64;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let target = n - 1 - i;
        if target == i {
            let rest = (1.0 - flip) / (n - 2) as f64;
            for j in 0..n {
                a.set(i, j, if j == 0 || j == n - 1 { flip / 2.0 } else { rest });
            }
        } else {
            for j in 0..n {
                a.set(i, j, if j == target { flip } else { off });
            }
        }
    }
    a
}

impl SyntheticSpec {
    /// Five states, one persistent and one mean-reverting regime,
    /// persistence 0.98, feature noise 0.1.
    pub fn headline(seed: u64) -> Self {
        SyntheticSpec {
            n: 5,
            regimes: vec![persistent_operator(5, 0.6), reverting_operator(5, 0.7)],
            regime_persistence: 0.98,
            feature_noise_sigma: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("synthetic chain needs at least two states"));
        }
        if self.regimes.is_empty() {
            return Err(Error::invalid("synthetic chain needs at least one regime"));
        }
        for (k, a) in self.regimes.iter().enumerate() {
            if a.rows() != self.n || a.cols() != self.n {
                return Err(Error::invalid(alloc::format!("regime {k} operator is not {0}x{0}", self.n)));
            }
            if a.as_slice().iter().any(|&p| !(p >= 0.0)) || !a.is_row_stochastic(1e-12) {
                return Err(Error::invalid(alloc::format!("regime {k} operator is not row-stochastic")));
            }
        }
        if !(self.regime_persistence > 0.0 && self.regime_persistence <= 1.0) {
            return Err(Error::invalid("regime persistence must lie in (0, 1]"));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return Err(Error::invalid("feature noise must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub states: StateSeries,
    /// `len x regimes`: regime one-hot plus noise.
    pub features: Matrix,
    pub regime_path: Vec<usize>,
    pub regimes: Vec<Matrix>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.regime_path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regime_path.is_empty()
    }

    /// The operator that moved the state from `t` to `t + 1`.
    pub fn true_operator_at(&self, t: usize) -> &Matrix {
        &self.regimes[self.regime_path[t]]
    }
}

fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // Rounding left `u` past the cumulative sum: take the last reachable state.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Draws `len` steps. Regime path, states and feature noise use separate
/// ChaCha streams of `spec.seed`. The regime starts at 0 and the state is
/// uniform at `t = 0`.
pub fn generate(spec: &SyntheticSpec, len: usize) -> Result<GroundTruth> {
    spec.validate()?;
    if len < MIN_SYNTHETIC_LEN {
        return Err(Error::invalid(alloc::format!("synthetic series needs at least {MIN_SYNTHETIC_LEN} steps")));
    }
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k);
        rng
    };
    let (mut regime_rng, mut state_rng, mut noise_rng) = (stream(0), stream(1), stream(2));
    let k = spec.regimes.len();

    let mut regime_path = Vec::with_capacity(len);
    let mut r = 0;
    for t in 0..len {
        if t > 0 && k > 1 && regime_rng.random::<f64>() >= spec.regime_persistence {
            r = (r + regime_rng.random_range(1..k)) % k;
        }
        regime_path.push(r);
    }

    let mut states = Vec::with_capacity(len);
    let mut x = state_rng.random_range(0..spec.n);
    for &r in &regime_path {
        states.push(x);
        x = sample_row(spec.regimes[r].row(x), &mut state_rng);
    }

    let noise = Normal::new(0.0, spec.feature_noise_sigma).map_err(|_| Error::invalid("bad noise scale"))?;
    let mut features = Matrix::zeros(len, k);
    for (t, &r) in regime_path.iter().enumerate() {
        for j in 0..k {
            let base = if j == r { 1.0 } else { 0.0 };
            features.set(t, j, base + noise.sample(&mut noise_rng));
        }
    }
    Ok(GroundTruth { states: StateSeries::new(states, spec.n)?, features, regime_path, regimes: spec.regimes.clone() })
}

/// Snapshot at `t` is the operator of `regime_path[t]`.
pub fn exact_operator_series(spec: &SyntheticSpec, regime_path: &[usize]) -> Result<Vec<OperatorSnapshot>> {
    regime_path
        .iter()
        .enumerate()
        .map(|(t, &r)| {
            let matrix = spec
                .regimes
                .get(r)
                .ok_or_else(|| Error::invalid(alloc::format!("regime {r} at t={t} does not exist")))?
                .clone();
            Ok(OperatorSnapshot { t, h: 1, matrix })
        })
        .collect()
}

/// True `h`-step operators `A_t A_{t+1} ... A_{t+h-1}` for every `t` whose
/// window fits in the path.
pub fn exact_h_step_series(spec: &SyntheticSpec, regime_path: &[usize], h: usize) -> Result<Vec<OperatorSnapshot>> {
    if h == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let one = exact_operator_series(spec, regime_path)?;
    let mut out = Vec::with_capacity(one.len().saturating_sub(h - 1));
    for w in one.windows(h) {
        let mut acc = w[0].matrix.clone();
        for s in &w[1..] {
            acc = acc.matmul(&s.matrix)?;
        }
        out.push(OperatorSnapshot { t: w[0].t, h, matrix: acc });
    }
    Ok(out)
}

/// Mean over timesteps and rows of the TV distance to the true rows.
pub fn recovery_error(learned: &[OperatorSnapshot], truth: &[OperatorSnapshot]) -> Result<f64> {
    crate::error::ensure_len(truth.len(), learned.len())?;
    if learned.is_empty() {
        return Err(Error::invalid("recovery error of an empty series"));
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for (a, b) in learned.iter().zip(truth) {
        if a.t != b.t || a.matrix.rows() != b.matrix.rows() || a.matrix.cols() != b.matrix.cols() {
            return Err(Error::invalid(alloc::format!("snapshots at t={} and t={} are not aligned", a.t, b.t)));
        }
        for (p, q) in a.matrix.iter_rows().zip(b.matrix.iter_rows()) {
            total += tv_distance(p, q)?;
            rows += 1;
        }
    }
    Ok(total / rows as f64)
}

/// Price path whose daily return at `t` sits in the band of state `states[t]`:
/// the band midpoint `(k - (n-1)/2) * width` plus uniform jitter of up to
/// `0.4 * width`. Starts at `start` and has one more point than `states`.
pub fn synthetic_prices(states: &StateSeries, width: f64, start: f64, seed: u64) -> Result<Vec<f64>> {
    if !(width > 0.0) || !(start > 0.0) {
        return Err(Error::invalid("band width and start price must be positive"));
    }
    let centre = (states.n as f64 - 1.0) / 2.0;
    if (centre + 0.5) * width >= 1.0 {
        return Err(Error::invalid("band width too large: prices could turn non-positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut prices = Vec::with_capacity(states.len() + 1);
    let mut p = start;
    prices.push(p);
    for &k in &states.states {
        let r = (k as f64 - centre) * width + rng.random_range(-0.4 * width..=0.4 * width);
        p *= 1.0 + r;
        prices.push(p);
    }
    Ok(prices)
}
