//! Row-wise operator estimators built on the network, and per-timestep
//! operator assembly.
//!
//! The state-conditioned model maps `[one_hot(i); F_t]` to row `i` of the
//! operator at `t`. The state-free model sees only `F_t`; its operator is one
//! computed row copied `n` times.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::discretization::{LabelSeries, StateSeries};
use crate::error::{ensure_len, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{operator_widths, predict_proba, train, Dataset, MlpParams, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotKind {
    Square,
    Rectangular,
}

/// The estimated `n x m` operator at timestep `t` for horizon `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSnapshot {
    pub t: usize,
    pub h: usize,
    pub matrix: Matrix,
}

impl OperatorSnapshot {
    pub fn kind(&self) -> SnapshotKind {
        if self.matrix.is_square() {
            SnapshotKind::Square
        } else {
            SnapshotKind::Rectangular
        }
    }
}

/// Anything that produces an operator from a feature snapshot.
pub trait OperatorModel {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn assemble(&self, features: &[f64], t: usize) -> Result<OperatorSnapshot>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateConditionedModel {
    pub params: MlpParams,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFreeModel {
    pub params: MlpParams,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub horizon: usize,
}

fn check_io(params: &MlpParams, input: usize, m: usize) -> Result<()> {
    params.validate()?;
    ensure_len(input, params.input_dim())?;
    ensure_len(m, params.output_dim())
}

pub fn state_input(state: usize, n: usize, features: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n + features.len()];
    x[state] = 1.0;
    x[n..].copy_from_slice(features);
    x
}

impl StateConditionedModel {
    pub fn new(params: MlpParams, n: usize, d: usize, m: usize, horizon: usize) -> Result<Self> {
        check_io(&params, n + d, m)?;
        Ok(StateConditionedModel { params, n, d, m, horizon })
    }

    pub fn predict_row(&self, state: usize, features: &[f64]) -> Result<Vec<f64>> {
        if state >= self.n {
            return Err(Error::invalid(alloc::format!("state {state} outside 0..{}", self.n)));
        }
        ensure_len(self.d, features.len())?;
        let x = Matrix::from_vec(1, self.n + self.d, state_input(state, self.n, features))?;
        Ok(predict_proba(&self.params, &x)?.into_vec())
    }
}

impl OperatorModel for StateConditionedModel {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn feature_dim(&self) -> usize {
        self.d
    }
    fn horizon(&self) -> usize {
        self.horizon
    }

    /// Row `i` is `predict_row(i, features)`; all rows share one batch.
    fn assemble(&self, features: &[f64], t: usize) -> Result<OperatorSnapshot> {
        ensure_len(self.d, features.len())?;
        let mut x = Vec::with_capacity(self.n * (self.n + self.d));
        for i in 0..self.n {
            x.extend(state_input(i, self.n, features));
        }
        let inputs = Matrix::from_vec(self.n, self.n + self.d, x)?;
        Ok(OperatorSnapshot { t, h: self.horizon, matrix: predict_proba(&self.params, &inputs)? })
    }
}

impl StateFreeModel {
    pub fn new(params: MlpParams, n: usize, d: usize, m: usize, horizon: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("state count must be positive"));
        }
        check_io(&params, d, m)?;
        Ok(StateFreeModel { params, n, d, m, horizon })
    }

    pub fn predict_row(&self, features: &[f64]) -> Result<Vec<f64>> {
        ensure_len(self.d, features.len())?;
        let x = Matrix::from_vec(1, self.d, features.to_vec())?;
        Ok(predict_proba(&self.params, &x)?.into_vec())
    }
}

impl OperatorModel for StateFreeModel {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn feature_dim(&self) -> usize {
        self.d
    }
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn assemble(&self, features: &[f64], t: usize) -> Result<OperatorSnapshot> {
        let row = self.predict_row(features)?;
        Ok(OperatorSnapshot { t, h: self.horizon, matrix: Matrix::replicate_row(&row, self.n) })
    }
}

pub fn assemble_operator(model: &StateConditionedModel, features: &[f64], t: usize) -> Result<OperatorSnapshot> {
    model.assemble(features, t)
}

pub fn assemble_statefree_operator(model: &StateFreeModel, features: &[f64], t: usize) -> Result<OperatorSnapshot> {
    model.assemble(features, t)
}

/// One snapshot per `t` in `range`, using row `t` of `features`.
pub fn operator_series<M: OperatorModel + ?Sized>(
    model: &M,
    features: &Matrix,
    range: Range<usize>,
) -> Result<Vec<OperatorSnapshot>> {
    if range.end > features.rows() {
        return Err(Error::invalid(alloc::format!(
            "range end {} exceeds {} feature rows",
            range.end,
            features.rows()
        )));
    }
    range.map(|t| model.assemble(features.row(t), t)).collect()
}

fn labelled(range: Range<usize>, labels: &LabelSeries, rows: usize) -> Range<usize> {
    range.start..range.end.min(labels.len()).min(rows)
}

/// Inputs `[one_hot(states[t]); features[t]]` with label `labels[t]`, for
/// every labelled `t` in `range`.
pub fn state_conditioned_dataset(
    states: &StateSeries,
    labels: &LabelSeries,
    features: &Matrix,
    range: Range<usize>,
) -> Result<Dataset> {
    let n = states.n;
    let d = features.cols();
    let range = labelled(range, labels, features.rows().min(states.len()));
    let mut x = Vec::with_capacity(range.len() * (n + d));
    for t in range.clone() {
        x.extend(state_input(states.states[t], n, features.row(t)));
    }
    Dataset::new(Matrix::from_vec(range.len(), n + d, x)?, labels.labels[range].to_vec(), labels.m)
}

/// Inputs `features[t]` with label `labels[t]`.
pub fn state_free_dataset(labels: &LabelSeries, features: &Matrix, range: Range<usize>) -> Result<Dataset> {
    let d = features.cols();
    let range = labelled(range, labels, features.rows());
    let x = features.as_slice()[range.start * d..range.end * d].to_vec();
    Dataset::new(Matrix::from_vec(range.len(), d, x)?, labels.labels[range].to_vec(), labels.m)
}

/// Trains a state-conditioned model on `train` and early-stops on `val`.
pub fn fit_state_conditioned(
    states: &StateSeries,
    labels: &LabelSeries,
    features: &Matrix,
    train_range: Range<usize>,
    val_range: Range<usize>,
    cfg: &TrainConfig,
) -> Result<(StateConditionedModel, TrainOutcome)> {
    let tr = state_conditioned_dataset(states, labels, features, train_range)?;
    let va = state_conditioned_dataset(states, labels, features, val_range)?;
    let widths = operator_widths(states.n + features.cols(), labels.m);
    let out = train(&widths, &tr, &va, cfg)?;
    let model = StateConditionedModel::new(out.params.clone(), states.n, features.cols(), labels.m, labels.horizon)?;
    Ok((model, out))
}

pub fn fit_state_free(
    n: usize,
    labels: &LabelSeries,
    features: &Matrix,
    train_range: Range<usize>,
    val_range: Range<usize>,
    cfg: &TrainConfig,
) -> Result<(StateFreeModel, TrainOutcome)> {
    let tr = state_free_dataset(labels, features, train_range)?;
    let va = state_free_dataset(labels, features, val_range)?;
    let widths = operator_widths(features.cols(), labels.m);
    let out = train(&widths, &tr, &va, cfg)?;
    let model = StateFreeModel::new(out.params.clone(), n, features.cols(), labels.m, labels.horizon)?;
    Ok((model, out))
}
