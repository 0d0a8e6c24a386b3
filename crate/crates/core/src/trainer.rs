//! Losses, metrics, optimization, the historical-average baseline, and the
//! granularity ablation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    chronological_split, eligible_samples, extract_windows, interpolate_missing, GranularityMask, NormStats, SplitKind,
    Splits, SpeedSeries, WindowSpec, WindowedSample,
};
use crate::diffcore::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphspec::SpectralOperator;
use crate::model::{forward_sample, init_model, model_forward, GacanModel, ModelConfig};

/// Number of trailing slices averaged by the historical-average baseline.
pub const HA_WINDOW: usize = 9;

fn same_shape(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "prediction shape {:?} differs from truth shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

/// `sqrt(mean((pred − truth)²))` on the tape. Its gradient at an exact fit
/// is zero.
pub fn rmse_loss(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let m = mse_loss(g, pred, truth)?;
    g.sqrt(m)
}

pub fn mse_loss(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let d = g.sub(pred, truth)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape(pred, truth)?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.len().max(1) as f64)
}

pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape(pred, truth)?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / pred.len().max(1) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    Rmse,
    Mse,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(Self::Rmse),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Validation(format!("unknown loss '{s}' (expected rmse or mse)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rmse => "rmse",
            Self::Mse => "mse",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Evaluations without a new best validation RMSE before stopping.
    pub patience: usize,
    pub eval_every: usize,
    /// Validation windows used per evaluation, evenly spaced; 0 uses all.
    pub val_limit: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            max_steps: 5000,
            patience: 10,
            eval_every: 100,
            val_limit: 0,
            loss: LossKind::Rmse,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings paired with [`ModelConfig::toy`]: larger batches and
    /// sparser, subsampled validation.
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 16,
            eval_every: 250,
            val_limit: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            bad.push("epsilon must be > 0");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1");
        }
        if self.patience == 0 {
            bad.push("patience must be >= 1");
        }
        if self.eval_every == 0 {
            bad.push("eval_every must be >= 1");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid train config: {}", bad.join("; "))))
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, value, grad) in store.iter_mut_with_grad() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// How a series becomes a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataOptions {
    pub ratios: (f64, f64, f64),
    pub standardize: bool,
    /// Granularities whose history every eligible sample must have. Wider
    /// than the model mask in ablations, so all modes see the same samples.
    pub eligibility: Option<GranularityMask>,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            ratios: (0.7, 0.1, 0.2),
            standardize: false,
            eligibility: None,
        }
    }
}

/// A cleaned, normalized series cut into chronological splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// (T, N) in original units.
    pub raw: Tensor,
    /// (T, N) after normalization.
    pub values: Tensor,
    pub norm: NormStats,
    pub spec: WindowSpec,
    pub splits: Splits,
    /// Eligible origins per split, indexed train/val/test.
    pub samples: [Vec<usize>; 3],
}

impl Dataset {
    /// Interpolates gaps, splits chronologically, and normalizes with
    /// training-split statistics.
    pub fn prepare(series: &SpeedSeries, spec: WindowSpec, opts: &DataOptions) -> Result<Self> {
        let clean = interpolate_missing(series)?;
        let splits = chronological_split(clean.len(), opts.ratios)?;
        let norm = NormStats::from_rows(&clean.values, splits.train.clone(), opts.standardize)?;
        Self::assemble(clean.values, norm, spec, splits, opts.eligibility)
    }

    /// As [`Dataset::prepare`] with given statistics (from a checkpoint).
    pub fn with_norm(series: &SpeedSeries, spec: WindowSpec, opts: &DataOptions, norm: NormStats) -> Result<Self> {
        let clean = interpolate_missing(series)?;
        if norm.mean.len() != clean.n_nodes() {
            return Err(Error::Validation(format!(
                "normalization covers {} nodes, series has {}",
                norm.mean.len(),
                clean.n_nodes()
            )));
        }
        let splits = chronological_split(clean.len(), opts.ratios)?;
        Self::assemble(clean.values, norm, spec, splits, opts.eligibility)
    }

    fn assemble(
        raw: Tensor,
        norm: NormStats,
        spec: WindowSpec,
        splits: Splits,
        eligibility: Option<GranularityMask>,
    ) -> Result<Self> {
        let gate = match eligibility {
            Some(m) => spec.clone().with_mask(m)?,
            None => spec.clone(),
        };
        let samples = eligible_samples(&splits, &gate)?;
        Ok(Dataset {
            values: norm.apply(&raw),
            raw,
            norm,
            spec,
            splits,
            samples,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn samples(&self, kind: SplitKind) -> &[usize] {
        &self.samples[kind as usize]
    }

    /// Normalized model input for the sample ending at `t0`.
    pub fn window(&self, t0: usize) -> Result<WindowedSample> {
        extract_windows(&self.values, t0, &self.spec)
    }

    /// (H, N) ground truth in original units.
    pub fn truth(&self, t0: usize) -> Result<Tensor> {
        if t0 + self.spec.horizon >= self.raw.shape()[0] {
            return Err(Error::InsufficientHistory {
                t0,
                reason: "target runs past the end of the series".into(),
            });
        }
        self.raw.narrow(0, t0 + 1, self.spec.horizon)
    }
}

/// Anything producing (H, N) forecasts in original units.
pub trait Forecaster {
    fn forecast(&self, data: &Dataset, t0: usize) -> Result<Tensor>;
}

pub struct ModelForecaster<'a> {
    pub model: &'a GacanModel,
    pub graph: &'a SpectralOperator,
}

impl Forecaster for ModelForecaster<'_> {
    fn forecast(&self, data: &Dataset, t0: usize) -> Result<Tensor> {
        let sample = data.window(t0)?;
        let y = model_forward(&sample, self.model, self.graph)?;
        Ok(data.norm.invert(&y))
    }
}

pub struct HistoricalAverage;

impl Forecaster for HistoricalAverage {
    fn forecast(&self, data: &Dataset, t0: usize) -> Result<Tensor> {
        ha_baseline(&data.raw, t0, data.spec.horizon)
    }
}

/// Every step of the horizon predicted as the per-node mean of slices
/// `t0−8 ..= t0` of a (T, N) series.
pub fn ha_baseline(values: &Tensor, t0: usize, horizon: usize) -> Result<Tensor> {
    let (t_len, n) = (values.shape()[0], values.shape()[1]);
    if t0 + 1 < HA_WINDOW || t0 >= t_len {
        return Err(Error::Validation(format!(
            "historical average at t0={t0} needs slices {}..={t0} of a {t_len}-slice series",
            t0 as i64 + 1 - HA_WINDOW as i64
        )));
    }
    let mut mean = vec![0.0; n];
    for t in t0 + 1 - HA_WINDOW..=t0 {
        for (m, v) in mean.iter_mut().zip(&values.data()[t * n..(t + 1) * n]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= HA_WINDOW as f64);
    let data = (0..horizon).flat_map(|_| mean.iter().copied()).collect();
    Tensor::new(&[horizon, n], data)
}

/// One forecast with its ground truth, both (H, N) in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub t0: usize,
    pub pred: Tensor,
    pub truth: Tensor,
}

pub fn forecast_split(f: &dyn Forecaster, data: &Dataset, kind: SplitKind) -> Result<Vec<Forecast>> {
    let origins = data.samples(kind);
    if origins.is_empty() {
        return Err(Error::Validation(format!("{kind:?} split has no eligible samples")));
    }
    origins
        .iter()
        .map(|&t0| {
            Ok(Forecast {
                t0,
                pred: f.forecast(data, t0)?,
                truth: data.truth(t0)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon_minutes: Vec<usize>,
    pub mae: Vec<f64>,
    pub rmse: Vec<f64>,
    pub meta: BTreeMap<String, String>,
}

impl MetricsReport {
    /// Metrics at each horizon step in `buckets` (1-based), computed from
    /// that step alone over every forecast and node.
    pub fn from_forecasts(forecasts: &[Forecast], buckets: &[usize], p_minutes: usize) -> Result<Self> {
        let first = forecasts
            .first()
            .ok_or_else(|| Error::Validation("no forecasts to score".into()))?;
        let (h, n) = (first.pred.shape()[0], first.pred.shape()[1]);
        let mut mae_out = Vec::new();
        let mut rmse_out = Vec::new();
        for &b in buckets {
            if b == 0 || b > h {
                return Err(Error::Validation(format!("horizon bucket {b} outside 1..={h}")));
            }
            let (mut abs, mut sq) = (0.0, 0.0);
            for f in forecasts {
                same_shape(&f.pred, &f.truth)?;
                let row = (b - 1) * n..b * n;
                for (p, t) in f.pred.data()[row.clone()].iter().zip(&f.truth.data()[row]) {
                    abs += (p - t).abs();
                    sq += (p - t).powi(2);
                }
            }
            let count = (forecasts.len() * n) as f64;
            mae_out.push(abs / count);
            rmse_out.push((sq / count).sqrt());
        }
        Ok(MetricsReport {
            horizon_minutes: buckets.iter().map(|b| b * p_minutes).collect(),
            mae: mae_out,
            rmse: rmse_out,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn rmse_at(&self, minutes: usize) -> Option<f64> {
        self.horizon_minutes.iter().position(|&m| m == minutes).map(|i| self.rmse[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Scores `f` on one split of `data`.
pub fn evaluate(f: &dyn Forecaster, data: &Dataset, kind: SplitKind, buckets: &[usize]) -> Result<MetricsReport> {
    let forecasts = forecast_split(f, data, kind)?;
    MetricsReport::from_forecasts(&forecasts, buckets, data.spec.p_minutes)
}

/// Default buckets: 15, 30 and 60 minutes where the horizon allows.
pub fn default_buckets(p_minutes: usize, horizon: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [15, 30, 60]
        .iter()
        .filter(|m| *m % p_minutes == 0)
        .map(|m| m / p_minutes)
        .filter(|&b| b >= 1 && b <= horizon)
        .collect();
    if out.is_empty() {
        out.push(horizon);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    /// Mean batch loss since the previous evaluation.
    pub train_loss: f64,
    /// Validation RMSE in original units.
    pub val_rmse: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::from("step,train_loss,val_rmse\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e}\n", r.step, r.train_loss, r.val_rmse));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation RMSE.
    pub model: GacanModel,
    pub history: Vec<HistoryRow>,
    pub best_step: usize,
    pub best_val_rmse: f64,
    pub steps_run: usize,
}

fn evenly_spaced(v: &[usize], limit: usize) -> Vec<usize> {
    if limit == 0 || v.len() <= limit {
        return v.to_vec();
    }
    (0..limit).map(|i| v[i * v.len() / limit]).collect()
}

/// Validation RMSE over all horizon steps, in original units.
fn validation_rmse(model: &GacanModel, graph: &SpectralOperator, data: &Dataset, origins: &[usize]) -> Result<f64> {
    let f = ModelForecaster { model, graph };
    let mut sq = 0.0;
    let mut count = 0usize;
    for &t0 in origins {
        let pred = f.forecast(data, t0)?;
        let truth = data.truth(t0)?;
        sq += pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += pred.len();
    }
    Ok((sq / count as f64).sqrt())
}

/// Mean loss over `batch` on one tape, with gradients written into the
/// store.
pub fn batch_step(
    params: &mut ParameterStore,
    config: &ModelConfig,
    graph: &SpectralOperator,
    data: &Dataset,
    batch: &[usize],
    loss: LossKind,
) -> Result<f64> {
    let mut g = Graph::new();
    let scaled = g.constant(graph.scaled_laplacian.clone());
    let mut terms = Vec::with_capacity(batch.len());
    for &t0 in batch {
        let sample = data.window(t0)?;
        let y = forward_sample(&mut g, config, params, &sample, scaled)?;
        let t = g.constant(sample.target);
        terms.push(match loss {
            LossKind::Rmse => rmse_loss(&mut g, y, t)?,
            LossKind::Mse => mse_loss(&mut g, y, t)?,
        });
    }
    let stacked = g.concat(&terms, 0)?;
    let total = g.mean(stacked);
    let value = g.value(total).data()[0];
    let grads = g.backward(total)?;
    params.set_grads(&grads)?;
    Ok(value)
}

/// Adam on shuffled training batches with early stopping on validation
/// RMSE. Deterministic given the configs.
pub fn train(model: &GacanModel, data: &Dataset, graph: &SpectralOperator, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graph.n_nodes() != data.n_nodes() || model.config.n_nodes != data.n_nodes() {
        return Err(Error::Validation(format!(
            "model has {} nodes, graph {}, data {}",
            model.config.n_nodes,
            graph.n_nodes(),
            data.n_nodes()
        )));
    }
    let train_set = data.samples(SplitKind::Train).to_vec();
    let val_set = evenly_spaced(data.samples(SplitKind::Val), cfg.val_limit);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("training needs nonempty train and validation splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_set.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut current = model.clone();
    let mut adam = Adam::new(cfg);
    let mut best = current.clone();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut steps_run = 0;
    let diverged = |step: usize, reason: String, last: &GacanModel| Error::Divergence {
        step,
        reason,
        last_good: Box::new(last.to_checkpoint(Some(&data.norm))),
    };
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let before = current.params.clone();
        let loss = batch_step(&mut current.params, &current.config, graph, data, &batch, cfg.loss)?;
        if !loss.is_finite() {
            current.params = before;
            return Err(diverged(step, format!("loss is {loss}"), &current));
        }
        adam.step(&mut current.params);
        if !current.params.is_finite() {
            current.params = before;
            return Err(diverged(step, "non-finite parameters after update".into(), &current));
        }
        steps_run = step;
        loss_sum += loss;
        loss_count += 1;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val = validation_rmse(&current, graph, data, &val_set)?;
            if !val.is_finite() {
                return Err(diverged(step, format!("validation RMSE is {val}"), &best));
            }
            history.push(HistoryRow {
                step,
                train_loss: loss_sum / loss_count as f64,
                val_rmse: val,
            });
            loss_sum = 0.0;
            loss_count = 0;
            if val < best_val {
                best_val = val;
                best_step = step;
                best = current.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_step,
        best_val_rmse: best_val,
        steps_run,
    })
}

/// One trained model and its test report per ablation mode.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub mode: char,
    pub report: MetricsReport,
    pub outcome: TrainOutcome,
}

/// Trains one model per mode (`a` = minute stream only, up to `d` = all
/// four granularities) from the same seeds and the same samples, and
/// scores each on the test split.
pub fn ablate(
    series: &SpeedSeries,
    graph: &SpectralOperator,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &DataOptions,
    modes: &[char],
    buckets: &[usize],
) -> Result<Vec<AblationRun>> {
    if modes.is_empty() {
        return Err(Error::Validation("no ablation modes given".into()));
    }
    let masks = modes
        .iter()
        .map(|&m| GranularityMask::for_mode(m))
        .collect::<Result<Vec<_>>>()?;
    let gate = masks.iter().fold(masks[0], |acc, m| acc.union(*m));
    let opts = DataOptions {
        eligibility: Some(opts.eligibility.map_or(gate, |e| e.union(gate))),
        ..opts.clone()
    };
    let mut runs = Vec::new();
    for (&mode, &mask) in modes.iter().zip(&masks) {
        let cfg = ModelConfig {
            mask,
            ..model_cfg.clone()
        };
        let data = Dataset::prepare(series, cfg.window_spec()?, &opts)?;
        let model = init_model(&cfg, cfg.seed)?;
        let outcome = train(&model, &data, graph, train_cfg)?;
        let f = ModelForecaster {
            model: &outcome.model,
            graph,
        };
        let report = evaluate(&f, &data, SplitKind::Test, buckets)?
            .with_meta("mode", mode.to_string())
            .with_meta("config_hash", cfg.hash())
            .with_meta("seed", cfg.seed.to_string());
        runs.push(AblationRun { mode, report, outcome });
    }
    Ok(runs)
}
