use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::mlp::{backward, forward_batch, init_params, predict_proba, smoothed_targets, MlpParams, Mode};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::PROB_FLOOR;

/// Validation NLL must drop by more than this to count as progress.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Mass moved to each neighbouring bin; 0 trains on hard labels.
    pub label_smoothing_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip_norm: 5.0,
            dropout_p: 0.2,
            batch_size: 64,
            max_epochs: 500,
            patience: 20,
            seed: 0,
            label_smoothing_eps: 0.0,
        }
    }
}

/// Smoothing mass used when smoothing is switched on without a value.
pub const DEFAULT_SMOOTHING_EPS: f64 = 0.05;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip_norm >= 0.0) {
            return Err(Error::invalid("adam_eps must be positive; weight_decay and grad_clip_norm non-negative"));
        }
        if !unit(self.dropout_p) {
            return Err(Error::invalid("dropout_p must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("batch_size, max_epochs and patience must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.label_smoothing_eps) {
            return Err(Error::invalid("label_smoothing_eps must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Network inputs with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub m: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, m: usize) -> Result<Self> {
        crate::error::ensure_len(inputs.rows(), labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&j| j >= m) {
            return Err(Error::invalid(alloc::format!("label {bad} outside 0..{m}")));
        }
        Ok(Dataset { inputs, labels, m })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Eval-mode NLL on the training set after the epoch.
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Eval-mode mean negative log-likelihood of the labels.
pub fn dataset_nll(params: &MlpParams, data: &Dataset) -> Result<f64> {
    let probs = predict_proba(params, &data.inputs)?;
    let total: f64 = data
        .labels
        .iter()
        .enumerate()
        .map(|(r, &j)| -libm::log(probs.get(r, j).max(PROB_FLOOR)))
        .sum();
    Ok(total / data.len() as f64)
}

/// Mini-batch Adam from a Glorot start seeded by `cfg.seed`, keeping the
/// parameters of the epoch with the lowest validation NLL.
pub fn train(widths: &[usize], train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = init_params(widths, cfg.seed)?;
    train_from(params, train_set, val_set, cfg)
}

pub fn train_from(
    mut params: MlpParams,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    for d in [train_set, val_set] {
        crate::error::ensure_len(params.input_dim(), d.inputs.cols())?;
        crate::error::ensure_len(params.output_dim(), d.m)?;
    }
    let m = train_set.m;
    let d = train_set.inputs.cols();
    let eps = cfg.label_smoothing_eps;
    let targets: Vec<Vec<f64>> = if eps > 0.0 {
        (0..m).map(|j| smoothed_targets(j, m, eps)).collect::<Result<_>>()?
    } else {
        (0..m).map(|j| (0..m).map(|k| if k == j { 1.0 } else { 0.0 }).collect()).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut x = Vec::with_capacity(cfg.batch_size * d);
    let mut q = Vec::with_capacity(cfg.batch_size * m);

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            x.clear();
            q.clear();
            for &r in batch {
                x.extend_from_slice(train_set.inputs.row(r));
                q.extend_from_slice(&targets[train_set.labels[r]]);
            }
            let cache = forward_batch(&params, &x, batch.len(), Mode::Train { dropout: cfg.dropout_p, rng: &mut rng })?;
            let (_, grads) = backward(&params, &cache, &q)?;
            if let Err(e) = adam_step(&mut params, &grads, &mut adam, cfg) {
                return Err(match e {
                    Error::NonFiniteGradient { .. } => Error::Diverged { epoch, history },
                    other => other,
                });
            }
        }
        let train_nll = dataset_nll(&params, train_set)?;
        let val_nll = dataset_nll(&params, val_set)?;
        history.push(EpochRecord { epoch, train_nll, val_nll });
        if !val_nll.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch, history });
        }
        if val_nll < best.0 - IMPROVEMENT_THRESHOLD {
            best = (val_nll, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { params: best.1, history, best_epoch: best.2 })
}
