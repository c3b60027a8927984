//! Run configuration, loaded from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use inhomarkov_core::counts::TuningGrid;
use inhomarkov_core::evaluation::BootstrapConfig;
use inhomarkov_core::ingest::{AlignConfig, FillMode};
use inhomarkov_core::matrix::Matrix;
use inhomarkov_core::nn::{TrainConfig, DEFAULT_SMOOTHING_EPS};
use inhomarkov_core::synthetic::SyntheticSpec;
use serde::{Deserialize, Serialize};

use crate::InputError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: Option<DataConfig>,
    pub synthetic: Option<SyntheticConfig>,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub baselines: BaselineConfig,
    pub bootstrap: BootstrapSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: None,
            synthetic: None,
            model: ModelConfig::default(),
            train: TrainSection::default(),
            baselines: BaselineConfig::default(),
            bootstrap: BootstrapSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub default_fill: FillMode,
    /// Per-column overrides of `default_fill`.
    pub fill: BTreeMap<String, FillMode>,
    pub max_interp_gap: usize,
    pub max_leading_missing: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let align = AlignConfig::default();
        DataConfig {
            path: PathBuf::new(),
            default_fill: FillMode::ForwardFill,
            fill: BTreeMap::new(),
            max_interp_gap: align.max_interp_gap,
            max_leading_missing: align.max_leading_missing,
        }
    }
}

impl DataConfig {
    pub fn align(&self) -> AlignConfig {
        AlignConfig { max_interp_gap: self.max_interp_gap, max_leading_missing: self.max_leading_missing }
    }

    pub fn fill_mode(&self, column: &str) -> FillMode {
        self.fill.get(column).copied().unwrap_or(self.default_fill)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub len: usize,
    /// Width of the return band attached to each true state.
    pub band_width: f64,
    pub start_price: f64,
    pub regime_persistence: f64,
    pub feature_noise_sigma: f64,
    /// Explicit regime operators; the two headline regimes when absent.
    pub regimes: Option<Vec<Vec<Vec<f64>>>>,
    pub start_date: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let h = SyntheticSpec::headline(0);
        SyntheticConfig {
            len: 20_000,
            band_width: 0.01,
            start_price: 100.0,
            regime_persistence: h.regime_persistence,
            feature_noise_sigma: h.feature_noise_sigma,
            regimes: None,
            start_date: "2000-01-01".into(),
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self, seed: u64) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::headline(seed);
        spec.regime_persistence = self.regime_persistence;
        spec.feature_noise_sigma = self.feature_noise_sigma;
        if let Some(regimes) = &self.regimes {
            spec.regimes = regimes.iter().map(|r| Matrix::from_rows(r)).collect::<Result<_, _>>()?;
            spec.n = spec.regimes.first().map_or(0, Matrix::rows);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of Markov states.
    pub n: usize,
    pub horizons: Vec<usize>,
    /// Forward-return bins per horizon; a single value applies to all.
    pub forward_bins: Vec<usize>,
    /// Keep the k features with the highest training MI; all when absent.
    pub feature_top_k: Option<usize>,
    /// Train on neighbour-smoothed targets.
    pub label_smoothing: bool,
    pub ck_horizon: usize,
    pub rv_window: usize,
    pub stratify_tail: f64,
    /// Also write every operator snapshot as JSON lines (large).
    pub export_snapshots: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 55,
            horizons: vec![1, 2, 5, 10],
            forward_bins: vec![10, 20, 35, 55],
            feature_top_k: None,
            label_smoothing: false,
            ck_horizon: 5,
            rv_window: 21,
            stratify_tail: 0.2,
            export_snapshots: false,
        }
    }
}

impl ModelConfig {
    pub fn forward_bins_for(&self, h: usize) -> usize {
        match self.forward_bins.as_slice() {
            [single] => *single,
            bins => self.horizons.iter().position(|&x| x == h).map_or(self.n, |i| bins[i]),
        }
    }
}

/// Network training settings; the seed comes from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
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
    pub label_smoothing_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            weight_decay: d.weight_decay,
            grad_clip_norm: d.grad_clip_norm,
            dropout_p: d.dropout_p,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            label_smoothing_eps: DEFAULT_SMOOTHING_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Pseudo-count of the marginal that ΔNLL is measured against.
    pub marginal_alpha: f64,
    pub degeneracy_threshold: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let g = TuningGrid::default();
        BaselineConfig { alphas: g.alphas, lambdas: g.lambdas, marginal_alpha: 1.0, degeneracy_threshold: 5 }
    }
}

impl BaselineConfig {
    pub fn grid(&self) -> TuningGrid {
        TuningGrid { alphas: self.alphas.clone(), lambdas: self.lambdas.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub block_len: usize,
    pub reps: usize,
    pub level: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let b = BootstrapConfig::default();
        BootstrapSection { block_len: b.block_len, reps: b.reps, level: b.level }
    }
}

/// Fixed offsets from the master seed, one per consumer.
pub mod seeds {
    pub const SYNTHETIC: u64 = 0;
    pub const BOOTSTRAP: u64 = 7;

    /// Seed for the network of `(horizon, target, model)`.
    pub fn network(master: u64, horizon: usize, target: u64, model: u64) -> u64 {
        master.wrapping_add(1000 * horizon as u64 + 10 * target + model + 100)
    }
}

impl RunConfig {
    /// Reads and validates `path`; relative paths inside resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| InputError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(data) = &mut cfg.data {
            if data.path.is_relative() {
                data.path = base.join(&data.path);
            }
        }
        cfg.validate().map_err(|e| InputError(format!("invalid config {}: {e:#}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        ensure!(m.n >= 2, "model.n must be at least 2");
        ensure!(!m.horizons.is_empty(), "model.horizons must not be empty");
        ensure!(m.horizons.iter().all(|&h| h >= 1), "horizons must be at least 1");
        ensure!(m.horizons.contains(&1), "model.horizons must include 1 (needed by diagnose and ck)");
        let mut sorted = m.horizons.clone();
        sorted.dedup();
        ensure!(sorted.len() == m.horizons.len(), "model.horizons contains duplicates");
        ensure!(
            m.forward_bins.len() == 1 || m.forward_bins.len() == m.horizons.len(),
            "model.forward_bins needs one value or one per horizon"
        );
        ensure!(m.forward_bins.iter().all(|&b| b >= 2), "forward_bins must be at least 2");
        ensure!(m.ck_horizon >= 1, "model.ck_horizon must be at least 1");
        ensure!(m.feature_top_k != Some(0), "model.feature_top_k must be positive");
        ensure!(m.stratify_tail > 0.0 && m.stratify_tail <= 0.5, "model.stratify_tail must lie in (0, 0.5]");
        self.train_config(0).validate()?;
        ensure!(!self.baselines.alphas.is_empty() && !self.baselines.lambdas.is_empty(), "baseline grid is empty");
        ensure!(self.baselines.marginal_alpha > 0.0, "baselines.marginal_alpha must be positive");
        ensure!(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0, "bootstrap.level must lie in (0, 1)");
        match (&self.data, &self.synthetic) {
            (Some(d), _) if !d.path.exists() => bail!("data file {} does not exist", d.path.display()),
            (None, None) => bail!("config needs a [data] or a [synthetic] section"),
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            s.spec(self.seed).context("invalid [synthetic] section")?;
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            grad_clip_norm: t.grad_clip_norm,
            dropout_p: t.dropout_p,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed,
            label_smoothing_eps: if self.model.label_smoothing { t.label_smoothing_eps } else { 0.0 },
        }
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig {
            block_len: self.bootstrap.block_len,
            reps: self.bootstrap.reps,
            seed: self.seed.wrapping_add(seeds::BOOTSTRAP),
            level: self.bootstrap.level,
        }
    }

    /// Where the price/feature CSV comes from: the configured file, or the
    /// output of the `synth` stage.
    pub fn data_path(&self) -> PathBuf {
        match &self.data {
            Some(d) => d.path.clone(),
            None => self.out_dir.join("synthetic").join("data.csv"),
        }
    }
}
