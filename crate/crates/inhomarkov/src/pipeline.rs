//! The pipeline stages behind each subcommand.
//!
//! Layout of the output directory:
//!
//! ```text
//! synthetic/  data.csv truth.json
//! ingest/     dataset.json report.json features.csv states.csv bin_edges.json
//! train/      h{h}_{target}_{model}.json h{h}_{target}_{model}_history.csv
//! diagnose/   diagnostics_{model}.csv rv.csv stratification.json [snapshots_{model}.jsonl]
//! ck/         ck_h{h}_{model}.csv summary_h{h}.json
//! eval/       report.json table.txt degeneracy.json counts_h{h}.csv
//! ```
//!
//! Time index `t` is the position of a one-day return: return `t` is dated
//! `dates[t]`, closes at `prices[t + 1]`, and is paired with the feature row
//! observed on that date.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{Days, NaiveDate};
use inhomarkov_core::counts::{
    backoff_estimator, conditional_estimator, count_transitions, degeneracy_metrics, marginal_estimator,
    tune_backoff, DegeneracyMetrics, SmoothingParams, TuningGrid,
};
use inhomarkov_core::diagnostics::{
    ck_series, diagnostics_series, pearson, regime_stratify, CkRecord, CkReport, DiagnosticsSeries,
    StratificationReport,
};
use inhomarkov_core::discretization::{
    discretize, fit_quantile_bins, forward_return_labels, state_labels, BinEdges, LabelKind, LabelSeries,
    StateSeries,
};
use inhomarkov_core::evaluation::{evaluate, mean, EvalReport};
use inhomarkov_core::ingest::{
    align_features, chronological_split, compute_returns, rank_features_mi, realized_variance, standardize,
    DroppedColumn, FeatureMatrix, RawColumn, SplitFractions, SplitIndex,
};
use inhomarkov_core::matrix::Matrix;
use inhomarkov_core::nn::{predict_proba, TrainOutcome};
use inhomarkov_core::operator::{
    fit_state_conditioned, fit_state_free, operator_series, state_conditioned_dataset, state_free_dataset,
    OperatorModel, OperatorSnapshot,
};
use inhomarkov_core::synthetic::{generate, synthetic_prices, SyntheticSpec};
use inhomarkov_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::config::{seeds, RunConfig};
use crate::formats::{
    self, read_json, read_series, write_ck_csv, write_counts_csv, write_diagnostics_csv, write_history_csv,
    write_json, Checkpoint, LoadedModel, ModelKind, RawSeries, SnapshotWriter, DATE_FORMAT,
};
use crate::InputError;

/// Snapshots assembled per batch when sweeping a whole series.
const SWEEP_CHUNK: usize = 256;

fn stage(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn target_tag(kind: LabelKind) -> &'static str {
    match kind {
        LabelKind::StateToState => "state",
        LabelKind::ForwardReturn => "forward",
    }
}

pub fn checkpoint_path(cfg: &RunConfig, h: usize, target: LabelKind, model: ModelKind) -> PathBuf {
    stage(cfg, "train").join(format!("h{h}_{}_{}.json", target_tag(target), model.tag()))
}

fn history_path(cfg: &RunConfig, h: usize, target: LabelKind, model: ModelKind) -> PathBuf {
    stage(cfg, "train").join(format!("h{h}_{}_{}_history.csv", target_tag(target), model.tag()))
}

// ---------------------------------------------------------------- synth

#[derive(Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    pub band_width: f64,
    /// Regime and state in force at each return `t`.
    pub regime_path: Vec<usize>,
    pub states: Vec<usize>,
}

/// Writes a synthetic dataset in the input CSV schema plus its ground truth.
///
/// Price row `p + 1` closes return `p`, whose band is set by the true state
/// at `p`, and carries the features `F_p`. Price row 0 has no features.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let Some(syn) = &cfg.synthetic else {
        bail!(InputError("`synth` needs a [synthetic] section in the config".into()));
    };
    let spec = syn.spec(cfg.seed.wrapping_add(seeds::SYNTHETIC)).map_err(|e| InputError(format!("{e:#}")))?;
    let start = NaiveDate::parse_from_str(&syn.start_date, DATE_FORMAT)
        .map_err(|_| InputError(format!("synthetic.start_date {:?} is not YYYY-MM-DD", syn.start_date)))?;
    let truth = generate(&spec, syn.len)?;
    let prices = synthetic_prices(&truth.states, syn.band_width, syn.start_price, spec.seed)?;

    let k = truth.features.cols();
    let dates = (0..prices.len() as u64)
        .map(|i| start.checked_add_days(Days::new(i)).context("synthetic dates overflow the calendar"))
        .collect::<Result<Vec<_>>>()?;
    let features = (0..k)
        .map(|j| std::iter::once(None).chain((0..syn.len).map(|p| Some(truth.features.get(p, j)))).collect())
        .collect();
    let series = RawSeries {
        dates,
        prices,
        feature_names: (0..k).map(|j| format!("regime_{j}")).collect(),
        features,
    };
    let dir = stage(cfg, "synthetic");
    formats::write_series(&dir.join("data.csv"), &series)?;
    write_json(
        &dir.join("truth.json"),
        &SyntheticTruth {
            spec,
            band_width: syn.band_width,
            regime_path: truth.regime_path,
            states: truth.states.states,
        },
    )?;
    println!("synth: {} days, {k} regimes -> {}", syn.len, dir.display());
    Ok(())
}

// ---------------------------------------------------------------- ingest

/// Everything later stages need, aligned on the return grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    /// Date of each return.
    pub dates: Vec<String>,
    /// One more entry than `returns`; `prices[t + 1]` closes return `t`.
    pub prices: Vec<f64>,
    pub returns: Vec<f64>,
    pub n: usize,
    pub state_edges: BinEdges,
    pub states: Vec<usize>,
    pub split: SplitIndex,
    pub features: FeatureMatrix,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn state_series(&self) -> Result<StateSeries> {
        Ok(StateSeries::new(self.states.clone(), self.n)?)
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = stage(cfg, "ingest").join("dataset.json");
        if !path.exists() {
            bail!(InputError(format!("missing {}; run `inhomarkov ingest` first", path.display())));
        }
        read_json(&path)
    }

    /// Labels for `target` at horizon `h`, indexed by `t`.
    pub fn labels(&self, cfg: &RunConfig, target: LabelKind, h: usize) -> Result<LabelSeries> {
        Ok(match target {
            LabelKind::StateToState => state_labels(&self.state_series()?, h)?,
            LabelKind::ForwardReturn => self.forward_labels(cfg, h)?.0,
        })
    }

    /// Forward-return labels and their bin edges. The return from `t + 1`
    /// to `t + 1 + h` starts one day after the close of return `t`.
    pub fn forward_labels(&self, cfg: &RunConfig, h: usize) -> Result<(LabelSeries, BinEdges)> {
        let m = cfg.model.forward_bins_for(h);
        let fl = forward_return_labels(&self.prices, h, m, &self.split)?;
        Ok((fl.labels.shifted(1), fl.edges))
    }
}

#[derive(Serialize)]
struct IngestReport {
    source: String,
    input_rows: usize,
    first_date: String,
    last_date: String,
    /// Leading returns discarded because some feature had not started yet.
    trimmed_leading: usize,
    timesteps: usize,
    split: SplitIndex,
    n: usize,
    features_retained: usize,
    retained: Vec<String>,
    dropped: Vec<DroppedColumn>,
    not_selected: Vec<String>,
    train_state_counts: Vec<usize>,
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let path = cfg.data_path();
    if !path.exists() {
        bail!(InputError(format!(
            "input data {} not found (run `inhomarkov synth` for a synthetic config)",
            path.display()
        )));
    }
    let raw = read_series(&path)?;
    let prep = prepare(cfg, &raw)?;
    let source = path.file_name().map_or(String::new(), |f| f.to_string_lossy().into_owned());
    let (prep, report) = (prep.0, IngestReport { source, ..prep.1 });
    write_ingest(cfg, &prep, &report)?;
    println!(
        "ingest: {} timesteps, {} features retained, {} dropped, split {}/{}/{}",
        prep.len(),
        report.features_retained,
        report.dropped.len(),
        prep.split.train().len(),
        prep.split.validation().len(),
        prep.split.test().len()
    );
    Ok(())
}

fn prepare(cfg: &RunConfig, raw: &RawSeries) -> Result<(Prepared, IngestReport)> {
    if raw.feature_names.is_empty() {
        bail!(InputError("input has no feature columns".into()));
    }
    let data = cfg.data.clone().unwrap_or_default();
    let returns = compute_returns(&raw.prices)?;
    let columns: Vec<RawColumn> = raw
        .feature_names
        .iter()
        .zip(&raw.features)
        .map(|(name, values)| RawColumn { name: name.clone(), values: values.clone(), fill_mode: data.fill_mode(name) })
        .collect();
    let aligned = align_features(&columns, &data.align())?;
    if aligned.names.is_empty() {
        bail!(InputError("every feature column was dropped during alignment".into()));
    }

    // Return k pairs with price row k + 1; aligned row r is price row first_row + r.
    let k0 = aligned.first_row.saturating_sub(1);
    let len = returns.len() - k0;
    let offset = k0 + 1 - aligned.first_row;
    let d = aligned.names.len();
    let mut features = Matrix::zeros(len, d);
    for t in 0..len {
        features.row_mut(t).copy_from_slice(aligned.values.row(t + offset));
    }
    let returns = returns[k0..].to_vec();
    let split = chronological_split(len, SplitFractions::default())?;
    let n = cfg.model.n;
    let edges = fit_quantile_bins(&returns[split.train()], n)?;
    let states = discretize(&returns, &edges)?;

    let mut fm = standardize(&features, &aligned.names, split.train_end)?;
    if fm.dim() == 0 {
        bail!(InputError("every feature column is constant on the training segment".into()));
    }
    let mut not_selected = Vec::new();
    if let Some(k) = cfg.model.feature_top_k {
        if k > fm.dim() {
            bail!(InputError(format!("feature_top_k = {k} exceeds the {} usable features", fm.dim())));
        }
        let ranking = rank_features_mi(&fm.values, &state_labels(&states, 1)?, &split, k)?;
        not_selected =
            (0..fm.dim()).filter(|j| !ranking.contains(j)).map(|j| fm.column_names[j].clone()).collect();
        fm = fm.select(&ranking);
    }

    let mut train_state_counts = vec![0; edges.n];
    for &s in &states.states[split.train()] {
        train_state_counts[s] += 1;
    }
    let mut dropped = aligned.dropped;
    dropped.extend(fm.dropped.iter().cloned());
    let dates: Vec<String> = raw.dates[k0 + 1..].iter().map(|d| d.format(DATE_FORMAT).to_string()).collect();
    let report = IngestReport {
        source: String::new(),
        input_rows: raw.prices.len(),
        first_date: dates[0].clone(),
        last_date: dates[len - 1].clone(),
        trimmed_leading: k0,
        timesteps: len,
        split,
        n: edges.n,
        features_retained: fm.dim(),
        retained: fm.column_names.clone(),
        dropped,
        not_selected,
        train_state_counts,
    };
    let prep = Prepared {
        dates,
        prices: raw.prices[k0..].to_vec(),
        returns,
        n: edges.n,
        state_edges: edges,
        states: states.states,
        split,
        features: fm,
    };
    Ok((prep, report))
}

fn write_ingest(cfg: &RunConfig, prep: &Prepared, report: &IngestReport) -> Result<()> {
    let dir = stage(cfg, "ingest");
    write_json(&dir.join("dataset.json"), prep)?;
    write_json(&dir.join("report.json"), report)?;
    write_json(&dir.join("bin_edges.json"), &prep.state_edges)?;

    let mut w = formats::csv_writer(&dir.join("features.csv"))?;
    let mut header = vec!["t".to_owned(), "date".to_owned()];
    header.extend(prep.features.column_names.iter().cloned());
    w.write_record(&header)?;
    for t in 0..prep.len() {
        let mut row = vec![t.to_string(), prep.dates[t].clone()];
        row.extend(prep.features.row(t).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = formats::csv_writer(&dir.join("states.csv"))?;
    w.write_record(["t", "date", "return", "state", "segment"])?;
    for t in 0..prep.len() {
        let segment = match t {
            t if t < prep.split.train_end => "train",
            t if t < prep.split.val_end => "validation",
            _ => "test",
        };
        w.write_record([
            t.to_string(),
            prep.dates[t].clone(),
            prep.returns[t].to_string(),
            prep.states[t].to_string(),
            segment.to_owned(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- train

const TARGETS: [LabelKind; 2] = [LabelKind::StateToState, LabelKind::ForwardReturn];

fn target_index(kind: LabelKind) -> u64 {
    match kind {
        LabelKind::StateToState => 0,
        LabelKind::ForwardReturn => 1,
    }
}

fn model_index(kind: ModelKind) -> u64 {
    match kind {
        ModelKind::StateConditioned => 0,
        ModelKind::StateFree => 1,
    }
}

/// Trains both models on both targets for every horizon.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let states = prep.state_series()?;
    let features = &prep.features.values;
    let split = prep.split;
    for &h in &cfg.model.horizons {
        for target in TARGETS {
            let labels = prep.labels(cfg, target, h)?;
            for kind in ModelKind::ALL {
                let seed = seeds::network(cfg.seed, h, target_index(target), model_index(kind));
                let tc = cfg.train_config(seed);
                let fitted = match kind {
                    ModelKind::StateConditioned => {
                        fit_state_conditioned(&states, &labels, features, split.train(), split.validation(), &tc)
                            .map(|(_, o)| o)
                    }
                    ModelKind::StateFree => {
                        fit_state_free(states.n, &labels, features, split.train(), split.validation(), &tc)
                            .map(|(_, o)| o)
                    }
                };
                let history = history_path(cfg, h, target, kind);
                let outcome: TrainOutcome = match fitted {
                    Ok(o) => o,
                    Err(CoreError::Diverged { epoch, history: partial }) => {
                        write_history_csv(&history, &partial)?;
                        return Err(CoreError::Diverged { epoch, history: partial }).with_context(|| {
                            format!(
                                "h={h} {} {}: partial history saved to {}",
                                target_tag(target),
                                kind.tag(),
                                history.display()
                            )
                        });
                    }
                    Err(e) => return Err(e.into()),
                };
                write_history_csv(&history, &outcome.history)?;
                let best = &outcome.history[outcome.best_epoch - 1];
                Checkpoint {
                    kind,
                    target,
                    n: states.n,
                    d: features.cols(),
                    m: labels.m,
                    horizon: h,
                    feature_names: prep.features.column_names.clone(),
                    config: tc,
                    best_epoch: outcome.best_epoch,
                    params: outcome.params,
                }
                .save(&checkpoint_path(cfg, h, target, kind))?;
                println!(
                    "train: h={h} {:<7} {:<17} best epoch {:>3} of {:>3}, val NLL {:.6}",
                    target_tag(target),
                    kind.tag(),
                    best.epoch,
                    outcome.history.len(),
                    best.val_nll
                );
            }
        }
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, prep: &Prepared, h: usize, target: LabelKind, kind: ModelKind) -> Result<LoadedModel> {
    let path = checkpoint_path(cfg, h, target, kind);
    let ck = Checkpoint::load(&path)?;
    if ck.kind != kind || ck.target != target || ck.horizon != h {
        bail!(InputError(format!("{} does not hold the expected model", path.display())));
    }
    if ck.feature_names != prep.features.column_names || ck.n != prep.n {
        bail!(InputError(format!("{} was trained on different ingested data", path.display())));
    }
    ck.model()
}

fn as_operator(model: &LoadedModel) -> &dyn OperatorModel {
    match model {
        LoadedModel::StateConditioned(m) => m,
        LoadedModel::StateFree(m) => m,
    }
}

// ---------------------------------------------------------------- diagnose

#[derive(Serialize)]
struct CorrelationSummary {
    r: f64,
    p: f64,
}

#[derive(Serialize)]
struct ModelDiagnostics {
    model: String,
    mean_rho: f64,
    mean_entropy: f64,
    mean_dobrushin: f64,
    /// Pearson correlation of mean row entropy with realized variance.
    entropy_rv: Option<CorrelationSummary>,
    note: Option<String>,
    stratification: StratificationReport,
}

#[derive(Serialize)]
struct DiagnoseSummary {
    rv_window: usize,
    /// Timesteps with a realized variance, i.e. those used below.
    aligned_timesteps: usize,
    models: Vec<ModelDiagnostics>,
}

/// Per-timestep diagnostics of the one-step state-to-state operators over
/// the whole series, their link to realized variance, and a high/low
/// variance stratification.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let dir = stage(cfg, "diagnose");
    let window = cfg.model.rv_window;
    let rv = realized_variance(&prep.returns, window)
        .map_err(|e| InputError(format!("realized variance: {e}")))?;
    let mut w = formats::csv_writer(&dir.join("rv.csv"))?;
    w.write_record(["t", "rv"])?;
    for (t, v) in rv.iter().enumerate() {
        if let Some(v) = v {
            w.write_record([t.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    let start = window - 1;
    let rv_aligned: Vec<f64> = rv[start..].iter().map(|v| v.expect("window filled")).collect();

    let mut models = Vec::new();
    for kind in ModelKind::ALL {
        let model = load_model(cfg, &prep, 1, LabelKind::StateToState, kind)?;
        let mut exporter = if cfg.model.export_snapshots {
            Some(SnapshotWriter::create(&dir.join(format!("snapshots_{}.jsonl", kind.tag())))?)
        } else {
            None
        };
        let diag = sweep_diagnostics(as_operator(&model), &prep.features.values, kind.tag(), exporter.as_mut())?;
        if let Some(e) = exporter {
            e.finish()?;
        }
        write_diagnostics_csv(&dir.join(format!("diagnostics_{}.csv", kind.tag())), &diag)?;

        let tail = DiagnosticsSeries { model: diag.model.clone(), records: diag.records[start..].to_vec() };
        let (entropy_rv, note) = match pearson(&tail.entropy(), &rv_aligned) {
            Ok((r, p)) => (Some(CorrelationSummary { r, p }), None),
            Err(e @ CoreError::Degenerate(_)) => (None, Some(format!("entropy/RV correlation undefined: {e}"))),
            Err(e) => return Err(e.into()),
        };
        let stratification = regime_stratify(&tail, &rv_aligned, cfg.model.stratify_tail)?;
        let summary = ModelDiagnostics {
            model: kind.tag().into(),
            mean_rho: mean(&diag.rho()),
            mean_entropy: mean(&diag.entropy()),
            mean_dobrushin: mean(&diag.dobrushin()),
            entropy_rv,
            note,
            stratification,
        };
        println!(
            "diagnose: {:<17} mean rho {:.4}  H {:.4}  delta {:.4}  r(H,RV) {}",
            summary.model,
            summary.mean_rho,
            summary.mean_entropy,
            summary.mean_dobrushin,
            summary.entropy_rv.as_ref().map_or("n/a".into(), |c| format!("{:+.3} (p={:.2e})", c.r, c.p)),
        );
        models.push(summary);
    }
    write_json(
        &dir.join("stratification.json"),
        &DiagnoseSummary { rv_window: window, aligned_timesteps: rv_aligned.len(), models },
    )?;
    Ok(())
}

fn sweep_diagnostics(
    model: &dyn OperatorModel,
    features: &Matrix,
    tag: &str,
    mut export: Option<&mut SnapshotWriter>,
) -> Result<DiagnosticsSeries> {
    let mut records = Vec::with_capacity(features.rows());
    let mut t = 0;
    while t < features.rows() {
        let end = (t + SWEEP_CHUNK).min(features.rows());
        let snaps = operator_series(model, features, t..end)?;
        records.extend(diagnostics_series(&snaps, tag)?.records);
        if let Some(w) = export.as_deref_mut() {
            w.write(&snaps)?;
        }
        t = end;
    }
    Ok(DiagnosticsSeries { model: tag.into(), records })
}

// ---------------------------------------------------------------- ck

#[derive(Serialize)]
struct CkModelSummary {
    model: String,
    timesteps: usize,
    mean_kl: f64,
    mean_tv: f64,
}

#[derive(Serialize)]
struct CkSummary {
    horizon: usize,
    test_start: usize,
    models: Vec<CkModelSummary>,
    notice: Option<String>,
}

/// Chapman-Kolmogorov check on the test segment: the direct `h`-step
/// operator at `t` against the product of one-step operators at `t..t+h`.
pub fn cmd_ck(cfg: &RunConfig, horizon: Option<usize>) -> Result<()> {
    let h = horizon.unwrap_or(cfg.model.ck_horizon);
    if h == 0 {
        bail!(InputError("CK horizon must be at least 1".into()));
    }
    let prep = Prepared::load(cfg)?;
    let test = prep.split.test();
    let notice = (h == 1).then(|| "h = 1: the composition is the one-step operator itself; discrepancies are zero".to_owned());
    if let Some(n) = &notice {
        eprintln!("ck: {n}");
    }
    let dir = stage(cfg, "ck");
    let mut models = Vec::new();
    for kind in ModelKind::ALL {
        let report = if h == 1 {
            let records = test.clone().map(|t| CkRecord { t, kl: 0.0, tv: 0.0 }).collect();
            CkReport { model: kind.tag().into(), horizon: 1, records }
        } else {
            let one = load_model(cfg, &prep, 1, LabelKind::StateToState, kind)?;
            let direct = load_model(cfg, &prep, h, LabelKind::StateToState, kind)?;
            let features = &prep.features.values;
            let one_step = operator_series(as_operator(&one), features, test.clone())?;
            let last = test.end.saturating_sub(h - 1).max(test.start);
            let direct_snaps: Vec<OperatorSnapshot> = operator_series(as_operator(&direct), features, test.start..last)?;
            ck_series(&one_step, &direct_snaps, h, kind.tag())?
        };
        write_ck_csv(&dir.join(format!("ck_h{h}_{}.csv", kind.tag())), &report)?;
        let s = CkModelSummary {
            model: kind.tag().into(),
            timesteps: report.records.len(),
            mean_kl: report.mean_kl(),
            mean_tv: report.mean_tv(),
        };
        println!("ck: h={h} {:<17} mean KL {:.6}  mean TV {:.6}  ({} timesteps)", s.model, s.mean_kl, s.mean_tv, s.timesteps);
        models.push(s);
    }
    write_json(&dir.join(format!("summary_h{h}.json")), &CkSummary { horizon: h, test_start: test.start, models, notice })?;
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Serialize)]
struct TunedBaselines {
    horizon: usize,
    conditional: SmoothingParams,
    backoff: SmoothingParams,
}

#[derive(Serialize)]
struct EvalDocument {
    reports: Vec<EvalReport>,
    tuned: Vec<TunedBaselines>,
}

#[derive(Serialize)]
struct DegeneracyEntry {
    horizon: usize,
    n: usize,
    m: usize,
    train_pairs: u64,
    threshold: u64,
    metrics: DegeneracyMetrics,
}

/// Test-segment forward-return scores for the count baselines and both
/// networks at every horizon, with block-bootstrap intervals on ΔNLL
/// against the marginal.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let states = prep.state_series()?;
    let split = prep.split;
    let features = &prep.features.values;
    let bootstrap = cfg.bootstrap_config();
    let dir = stage(cfg, "eval");
    let mut doc = EvalDocument { reports: Vec::new(), tuned: Vec::new() };
    let mut degeneracy = Vec::new();

    for &h in &cfg.model.horizons {
        let (labels, edges) = prep.forward_labels(cfg, h)?;
        let event = edges.negative_bins();
        let test = split.val_end..split.len.min(labels.len());
        if test.is_empty() {
            bail!(InputError(format!("horizon {h} leaves no labelled test timesteps")));
        }
        let y = &labels.labels[test.clone()];
        let s = &states.states[test.clone()];

        let counts = count_transitions(&states, &labels, split.train())?;
        write_counts_csv(&dir.join(format!("counts_h{h}.csv")), &counts)?;
        degeneracy.push(DegeneracyEntry {
            horizon: h,
            n: counts.n,
            m: counts.m,
            train_pairs: counts.total,
            threshold: cfg.baselines.degeneracy_threshold,
            metrics: degeneracy_metrics(&counts, cfg.baselines.degeneracy_threshold),
        });

        let val_end = split.val_end.min(labels.len());
        let val_pairs: Vec<(usize, usize)> =
            (split.train_end..val_end).map(|t| (states.states[t], labels.labels[t])).collect();
        let grid = cfg.baselines.grid();
        let cond_grid = TuningGrid { alphas: grid.alphas.clone(), lambdas: vec![1.0] };
        let cond = tune_backoff(&counts, &val_pairs, &cond_grid)?;
        let backoff = tune_backoff(&counts, &val_pairs, &grid)?;
        doc.tuned.push(TunedBaselines { horizon: h, conditional: cond, backoff });

        let marginal = marginal_estimator(&counts, cfg.baselines.marginal_alpha)?;
        let by_state = |a: &Matrix| -> Result<Matrix> {
            let rows: Vec<&[f64]> = s.iter().map(|&i| a.row(i)).collect();
            Ok(Matrix::from_rows(&rows)?)
        };
        let mut rows: Vec<(String, Matrix)> = vec![
            ("marginal".into(), Matrix::replicate_row(&marginal, y.len())),
            ("conditional".into(), by_state(&conditional_estimator(&counts, cond.alpha)?)?),
            ("backoff".into(), by_state(&backoff_estimator(&counts, backoff)?)?),
        ];
        for kind in ModelKind::ALL {
            let model = load_model(cfg, &prep, h, LabelKind::ForwardReturn, kind)?;
            let (params, data) = match &model {
                LoadedModel::StateConditioned(m) => {
                    (&m.params, state_conditioned_dataset(&states, &labels, features, test.clone())?)
                }
                LoadedModel::StateFree(m) => (&m.params, state_free_dataset(&labels, features, test.clone())?),
            };
            if data.labels != y {
                bail!("internal error: test labels misaligned for {}", kind.tag());
            }
            rows.push((kind.tag().into(), predict_proba(params, &data.inputs)?));
        }
        for (name, probs) in &rows {
            doc.reports.push(evaluate(name, h, probs, &marginal, y, &event, &bootstrap)?);
        }
    }

    let table = render_table(&doc.reports);
    print!("{table}");
    std::fs::write(dir.join("table.txt"), &table).with_context(|| format!("cannot write {}", dir.display()))?;
    write_json(&dir.join("report.json"), &doc)?;
    write_json(&dir.join("degeneracy.json"), &degeneracy)?;
    Ok(())
}

pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let level = reports.first().map_or(0.95, |r| r.bootstrap.level);
    let _ = writeln!(
        out,
        "{:>3}  {:<17} {:>4} {:>7}  {:>10} {:>10}  {:>23}  {:>8}",
        "h",
        "model",
        "m",
        "samples",
        "NLL",
        "dNLL",
        format!("{:.0}% CI", level * 100.0),
        "ECE"
    );
    for r in reports {
        let ece = r.ece.map_or("-".to_owned(), |e| format!("{e:.4}"));
        let _ = writeln!(
            out,
            "{:>3}  {:<17} {:>4} {:>7}  {:>10.5} {:>+10.5}  [{:>+10.5}, {:>+10.5}]  {:>8}",
            r.horizon, r.model, r.m, r.samples, r.mean_nll, r.delta_nll_vs_marginal, r.ci_low, r.ci_high, ece
        );
    }
    out
}

/// Applies `--out` and `--seed` overrides.
pub fn with_overrides(mut cfg: RunConfig, out: Option<&Path>, seed: Option<u64>) -> RunConfig {
    if let Some(out) = out {
        cfg.out_dir = out.to_path_buf();
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticConfig;

    fn raw(prices: &[f64], feature: Vec<Option<f64>>) -> RawSeries {
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        RawSeries {
            dates: (0..prices.len() as u64).map(|i| start.checked_add_days(Days::new(i)).unwrap()).collect(),
            prices: prices.to_vec(),
            feature_names: vec!["x".into()],
            features: vec![feature],
        }
    }

    fn small_config(n: usize) -> RunConfig {
        let mut cfg: RunConfig = toml::from_str("[synthetic]\n").unwrap();
        cfg.model.n = n;
        cfg
    }

    #[test]
    fn returns_pair_with_the_features_of_their_date() {
        let prices: Vec<f64> = (0..40).map(|i| 100.0 + (i as f64 * 0.7).sin()).collect();
        let feature: Vec<Option<f64>> =
            (0..40).map(|i| if i < 3 { None } else { Some(i as f64 + (i as f64).cos()) }).collect();
        let (prep, report) = prepare(&small_config(3), &raw(&prices, feature)).unwrap();
        // First feature observation at price row 3 pairs with return 2.
        assert_eq!(report.trimmed_leading, 2);
        assert_eq!(prep.len(), 37);
        assert_eq!(prep.prices.len(), 38);
        assert_eq!(prep.returns[0], (prices[3] - prices[2]) / prices[2]);
        assert_eq!(prep.dates[0], "2021-03-04");
        let fm = &prep.features;
        let unscaled = fm.row(0)[0] * fm.train_std[0] + fm.train_mean[0];
        assert!((unscaled - (3.0 + 3f64.cos())).abs() < 1e-12);
    }

    #[test]
    fn features_complete_from_the_start_skip_the_first_price_row() {
        let prices: Vec<f64> = (0..30).map(|i| 50.0 + i as f64).collect();
        let feature: Vec<Option<f64>> = (0..30).map(|i| Some((i * i) as f64)).collect();
        let (prep, _) = prepare(&small_config(2), &raw(&prices, feature)).unwrap();
        assert_eq!(prep.len(), 29);
        let fm = &prep.features;
        assert!((fm.row(0)[0] * fm.train_std[0] + fm.train_mean[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_labels_start_one_day_after_the_state() {
        let prices: Vec<f64> = (0..60).map(|i| 100.0 * (1.0 + 0.01 * ((i * 7 % 11) as f64 - 5.0) / 5.0)).collect();
        let feature: Vec<Option<f64>> = (0..60).map(|i| Some(i as f64)).collect();
        let mut cfg = small_config(3);
        cfg.model.forward_bins = vec![4];
        let (prep, _) = prepare(&cfg, &raw(&prices, feature)).unwrap();
        let h = 2;
        let (labels, edges) = prep.forward_labels(&cfg, h).unwrap();
        // Return t closes at prices[t + 1]; its target runs from t + 2 to t + 2 + h.
        for t in 0..labels.len() {
            let r = (prep.prices[t + 2 + h] - prep.prices[t + 2]) / prep.prices[t + 2];
            assert_eq!(labels.labels[t], edges.bin_of(r));
        }
        assert_eq!(labels.len(), prep.prices.len() - h - 2);
    }

    #[test]
    fn table_lists_every_report() {
        let r = EvalReport {
            model: "marginal".into(),
            horizon: 5,
            m: 10,
            samples: 100,
            mean_nll: 2.3,
            delta_nll_vs_marginal: 0.0,
            ece: None,
            ci_low: 0.0,
            ci_high: 0.0,
            bootstrap: Default::default(),
        };
        let t = render_table(&[r.clone(), EvalReport { model: "backoff".into(), ece: Some(0.01), ..r }]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("backoff") && t.contains("0.0100"));
    }

    #[test]
    fn synth_rejects_missing_section() {
        let cfg: RunConfig = toml::from_str("[model]\nn = 5\n").unwrap();
        let err = cmd_synth(&cfg).unwrap_err();
        assert_eq!(crate::exit_code(&err), 2);
        let _ = SyntheticConfig::default();
    }
}
