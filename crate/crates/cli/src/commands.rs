//! Subcommand implementations. Each returns a short summary for stdout or
//! a classified error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gacan::data::{
    extract_windows, interpolate_missing, load_speeds, synth_generate, write_speeds, write_synth, SpeedSeries, SplitKind,
    SynthConfig,
};
use gacan::diffcore::{primitive_suite, Checkpoint, Fault, Tensor, PRIMITIVE_TOLERANCE};
use gacan::graphspec::{build_adjacency, load_distances, SpectralOperator, TrafficGraph};
use gacan::model::{
    block_grad_check, init_model, model_forward, network_grad_check, GacanModel, BLOCK_TOLERANCE, NETWORK_TOLERANCE,
};
use gacan::trainer::{
    ablate, forecast_split, train, write_history, Dataset, Forecast, ModelForecaster, MetricsReport,
};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Classify};

/// Keys that fix a checkpoint's tensor shapes and output layout.
pub const STRUCTURAL_KEYS: [&str; 4] = ["n_nodes", "horizon", "heads", "cheb_order"];

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn hash_line(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

/// Prepends the config-hash comment to a file written by a library helper.
fn stamp(path: &Path, hash: &str) -> Result<(), CliError> {
    let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    write_file(path, &(hash_line(hash) + &body))
}

/// Short content hash of the speed file.
fn dataset_id(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

struct Inputs {
    series: SpeedSeries,
    graph: SpectralOperator,
    dataset_id: String,
}

/// Loads speeds and distances and builds the spectral operator. Fills in
/// `n_nodes` from the data unless the config sets it, in which case the
/// two must agree.
fn load_inputs(cfg: &mut RunConfig) -> Result<Inputs, CliError> {
    let speeds = cfg.speeds_path();
    let series = load_speeds(&speeds).data()?;
    let n = series.n_nodes();
    if cfg.is_explicit("n_nodes") && cfg.model.n_nodes != n {
        return Err(CliError::Config(format!(
            "n_nodes = {} but {} has {n} nodes",
            cfg.model.n_nodes,
            speeds.display()
        )));
    }
    cfg.model.n_nodes = n;
    let distances = load_distances(&cfg.distances_path(), Some(n)).data()?;
    let graph = TrafficGraph::from_distances(distances, cfg.graph_sigma2, cfg.graph_epsilon).config()?;
    let graph = SpectralOperator::from_graph(&graph).data()?;
    Ok(Inputs {
        series,
        graph,
        dataset_id: dataset_id(&speeds)?,
    })
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub nodes: usize,
    pub days: usize,
    pub p_minutes: usize,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

pub fn cmd_synth(args: &SynthArgs, out: &Path) -> Result<String, CliError> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_nodes: args.nodes,
        days: args.days,
        p_minutes: args.p_minutes,
        seed: args.seed.unwrap_or(defaults.seed),
        noise_std: args.noise.unwrap_or(defaults.noise_std),
        ..defaults
    };
    // Bad generator parameters are config errors; write failures are data errors.
    synth_generate(&SynthConfig { days: cfg.days.min(1), ..cfg.clone() }).config()?;
    write_synth(out, &cfg).data()?;
    Ok(format!(
        "wrote {} slices x {} nodes to {}",
        cfg.days * 24 * 60 / cfg.p_minutes,
        cfg.n_nodes,
        out.display()
    ))
}

/// Interpolates gaps and writes the cleaned series, the thresholded
/// adjacency, and a JSON summary.
pub fn cmd_preprocess(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let mut cfg = cfg.clone();
    let inputs = load_inputs(&mut cfg)?;
    let clean = interpolate_missing(&inputs.series).data()?;
    let filled = clean.len() * clean.n_nodes() - inputs.series.missing.iter().filter(|m| !**m).count();
    ensure_dir(out)?;
    let hash = cfg.hash();
    let speeds = out.join("speeds.csv");
    write_speeds(&speeds, &clean).data()?;
    stamp(&speeds, &hash)?;
    let distances = load_distances(&cfg.distances_path(), Some(clean.n_nodes())).data()?;
    let adj = build_adjacency(&distances, cfg.graph_sigma2, cfg.graph_epsilon).config()?;
    let n = clean.n_nodes();
    let mut text = hash_line(&hash) + "from,to,weight\n";
    let mut edges = 0;
    for i in 0..n {
        for j in 0..n {
            let w = adj.get(&[i, j]);
            if w != 0.0 {
                let _ = writeln!(text, "{i},{j},{w:e}");
                if i < j {
                    edges += 1;
                }
            }
        }
    }
    write_file(&out.join("adjacency.csv"), &text)?;
    let summary = serde_json::json!({
        "config_hash": hash,
        "dataset_id": inputs.dataset_id,
        "nodes": n,
        "slices": clean.len(),
        "filled_readings": filled,
        "edges": edges,
        "lambda_max": inputs.graph.lambda_max,
    });
    write_file(
        &out.join("preprocess.json"),
        &(serde_json::to_string_pretty(&summary).unwrap() + "\n"),
    )?;
    Ok(format!("{n} nodes, {} slices, {filled} readings filled, {edges} edges", clean.len()))
}

fn checkpoint_text(model: &GacanModel, data: &Dataset, cfg: &RunConfig, dataset: &str) -> String {
    let mut ck = model.to_checkpoint(Some(&data.norm));
    ck.meta.push(("run_config_hash".into(), cfg.hash()));
    ck.meta.push(("run_dataset_id".into(), dataset.to_string()));
    ck.to_text()
}

/// Trains from scratch and writes `checkpoint.txt`, `history.csv` and
/// `config.txt` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let inputs = load_inputs(&mut cfg)?;
    cfg.validate()?;
    let spec = cfg.model.window_spec().config()?;
    let data = Dataset::prepare(&inputs.series, spec, &cfg.data).data()?;
    let model = init_model(&cfg.model, cfg.model.seed).config()?;
    ensure_dir(out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let outcome = match train(&model, &data, &inputs.graph, &cfg.train) {
        Ok(o) => o,
        Err(gacan::Error::Divergence {
            step,
            reason,
            last_good,
        }) => {
            let path = out.join("diverged.ckpt");
            write_file(&path, &last_good.to_text())?;
            return Err(CliError::Divergence(format!(
                "step {step}: {reason}; last finite parameters in {}",
                path.display()
            )));
        }
        Err(e) => return Err(e).data(),
    };
    write_file(
        &out.join("checkpoint.txt"),
        &checkpoint_text(&outcome.model, &data, &cfg, &inputs.dataset_id),
    )?;
    let history = out.join("history.csv");
    write_history(&history, &outcome.history).data()?;
    stamp(&history, &cfg.hash())?;
    Ok(format!(
        "{} steps, best validation RMSE {:.4} at step {}",
        outcome.steps_run, outcome.best_val_rmse, outcome.best_step
    ))
}

/// Loads a checkpoint and checks it against any structural keys the config
/// sets explicitly.
fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<(GacanModel, gacan::data::NormStats), CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let ck = Checkpoint::parse(&text, &path.display().to_string()).config()?;
    let (model, norm) = GacanModel::from_checkpoint(&ck).config()?;
    let norm = norm.ok_or_else(|| CliError::Config(format!("{} lacks normalization statistics", path.display())))?;
    let theirs = model.config.to_pairs();
    let ours = cfg.model.to_pairs();
    for key in STRUCTURAL_KEYS {
        if !cfg.is_explicit(key) {
            continue;
        }
        let get = |pairs: &[(String, String)]| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        if get(&theirs) != get(&ours) {
            return Err(CliError::Config(format!(
                "checkpoint {} has {key} = {}, config says {}",
                path.display(),
                get(&theirs).unwrap_or_default(),
                get(&ours).unwrap_or_default()
            )));
        }
    }
    Ok((model, norm))
}

/// Data as the checkpointed model sees it. A node-count mismatch between
/// checkpoint and data is a config error.
fn checkpoint_inputs(cfg: &RunConfig, model: &GacanModel) -> Result<(RunConfig, Inputs), CliError> {
    let mut run = cfg.clone();
    run.model = model.config.clone();
    let mut probe = run.clone();
    let inputs = load_inputs(&mut probe)?;
    if inputs.series.n_nodes() != model.config.n_nodes {
        return Err(CliError::Config(format!(
            "checkpoint expects {} nodes, data has {}",
            model.config.n_nodes,
            inputs.series.n_nodes()
        )));
    }
    Ok((run, inputs))
}

fn predictions_csv(forecasts: &[Forecast], hash: &str) -> String {
    let mut s = hash_line(hash) + "t0,horizon,node,pred,truth\n";
    for f in forecasts {
        let (h, n) = (f.pred.shape()[0], f.pred.shape()[1]);
        for step in 0..h {
            for node in 0..n {
                let _ = writeln!(
                    s,
                    "{},{},{node},{:e},{:e}",
                    f.t0,
                    step + 1,
                    f.pred.get(&[step, node]),
                    f.truth.get(&[step, node])
                );
            }
        }
    }
    s
}

/// Scores a checkpoint and the historical average on one split; writes
/// `metrics.json`, `ha_metrics.json` and `predictions.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: SplitKind, out: &Path) -> Result<String, CliError> {
    let (model, norm) = load_checkpoint(checkpoint, cfg)?;
    let (run, inputs) = checkpoint_inputs(cfg, &model)?;
    let buckets = run.buckets();
    run.validate()?;
    let spec = model.config.window_spec().config()?;
    let data = Dataset::with_norm(&inputs.series, spec, &run.data, norm).data()?;
    let f = ModelForecaster {
        model: &model,
        graph: &inputs.graph,
    };
    let forecasts = forecast_split(&f, &data, split).data()?;
    let hash = run.hash();
    let meta = |r: MetricsReport, name: &str| {
        r.with_meta("config_hash", hash.clone())
            .with_meta("model_config_hash", model.config.hash())
            .with_meta("seed", model.config.seed.to_string())
            .with_meta("dataset_id", inputs.dataset_id.clone())
            .with_meta("split", format!("{split:?}").to_lowercase())
            .with_meta("forecaster", name)
    };
    let report = meta(
        MetricsReport::from_forecasts(&forecasts, &buckets, model.config.p_minutes).config()?,
        "gacan",
    );
    let ha = forecast_split(&gacan::trainer::HistoricalAverage, &data, split).data()?;
    let ha_report = meta(
        MetricsReport::from_forecasts(&ha, &buckets, model.config.p_minutes).config()?,
        "historical-average",
    );
    ensure_dir(out)?;
    write_file(&out.join("metrics.json"), &(report.to_json() + "\n"))?;
    write_file(&out.join("ha_metrics.json"), &(ha_report.to_json() + "\n"))?;
    write_file(&out.join("predictions.csv"), &predictions_csv(&forecasts, &hash))?;
    let mut s = String::new();
    for (i, m) in report.horizon_minutes.iter().enumerate() {
        let _ = writeln!(
            s,
            "{m:>4} min  MAE {:.4}  RMSE {:.4}  (HA {:.4} / {:.4})",
            report.mae[i], report.rmse[i], ha_report.mae[i], ha_report.rmse[i]
        );
    }
    Ok(s.trim_end().to_string())
}

/// Forecasts the `horizon` slices after `t0`; writes `predict.csv` with one
/// row per step and one column per node.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, t0: usize, out: &Path) -> Result<String, CliError> {
    let (model, norm) = load_checkpoint(checkpoint, cfg)?;
    let (run, inputs) = checkpoint_inputs(cfg, &model)?;
    let clean = interpolate_missing(&inputs.series).data()?;
    let (t_len, n) = (clean.len(), clean.n_nodes());
    if t0 >= t_len {
        return Err(CliError::Data(format!("t0 = {t0} is past the last slice {}", t_len - 1)));
    }
    let h = model.config.horizon;
    // Targets are never read as inputs, so zero rows stand in for the future.
    let mut padded = norm.apply(&clean.values).into_data();
    padded.resize((t_len + h) * n, 0.0);
    let padded = Tensor::new(&[t_len + h, n], padded).data()?;
    let spec = model.config.window_spec().config()?;
    let sample = extract_windows(&padded, t0, &spec).data()?;
    let pred = norm.invert(&model_forward(&sample, &model, &inputs.graph).data()?);
    let mut s = hash_line(&run.hash());
    s.push_str("horizon");
    for i in 0..n {
        let _ = write!(s, ",node_{i}");
    }
    s.push('\n');
    for step in 0..h {
        s.push_str(&(step + 1).to_string());
        for node in 0..n {
            let _ = write!(s, ",{:e}", pred.get(&[step, node]));
        }
        s.push('\n');
    }
    ensure_dir(out)?;
    write_file(&out.join("predict.csv"), &s)?;
    Ok(format!("{h} steps x {n} nodes from t0 = {t0}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Block,
    Model,
    All,
}

impl std::str::FromStr for Scope {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            _ => Err(CliError::Config(format!("unknown scope '{s}' (primitives, block, model, all)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckArgs {
    pub scope: Scope,
    pub trials: usize,
    pub seed: Option<u64>,
    /// Corrupts one backward rule (sigmoid for primitives, layer-norm gain
    /// for the network scopes); the check must then fail.
    pub inject_fault: bool,
}

/// Runs the finite-difference checks. Fails with exit class "check" if any
/// entry exceeds its tolerance; the report lists worst offenders first.
pub fn cmd_gradcheck(cfg: &RunConfig, args: &GradcheckArgs, out: Option<&Path>) -> Result<String, CliError> {
    cfg.model.validate().config()?;
    let mut report = String::new();
    let mut failed = false;
    let run_prims = matches!(args.scope, Scope::Primitives | Scope::All);
    let run_block = matches!(args.scope, Scope::Block | Scope::All);
    let run_model = matches!(args.scope, Scope::Model | Scope::All);
    if run_prims {
        let fault = args.inject_fault.then_some(Fault::SigmoidBackward);
        let mut checks = primitive_suite(args.trials, args.seed.unwrap_or(0), fault).config()?;
        checks.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        for c in &checks {
            failed |= !c.passed;
            let _ = writeln!(
                report,
                "primitive {:<18} trials {:>4}  max rel err {:.3e}  tol {:.0e}  {}",
                c.primitive,
                c.trials,
                c.max_rel_error,
                PRIMITIVE_TOLERANCE,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
    }
    let fault = args.inject_fault.then_some(Fault::LayerNormGain);
    let mut network = |label: &str, r: gacan::diffcore::GradCheckReport, tol: f64| {
        failed |= !r.passed();
        let _ = writeln!(
            report,
            "{label:<28} max rel err {:.3e}  tol {tol:.0e}  {}",
            r.max_rel_error(),
            if r.passed() { "pass" } else { "FAIL" }
        );
        for e in r.worst(3) {
            let _ = writeln!(report, "    {:<24} {:.3e} at {}", e.name, e.max_rel_error, e.worst_index);
        }
    };
    if run_block {
        let seed = args.seed.unwrap_or(11);
        let r = block_grad_check(&cfg.model, seed, fault).config()?;
        network(&format!("block (seed {seed})"), r, BLOCK_TOLERANCE);
    }
    if run_model {
        let base = args.seed.unwrap_or(30);
        for seed in base..base + 3 {
            let r = network_grad_check(&cfg.model, seed, fault).config()?;
            network(&format!("network (seed {seed})"), r, NETWORK_TOLERANCE);
        }
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join("gradcheck.txt"), &(hash_line(&cfg.hash()) + &report))?;
    }
    let report = report.trim_end().to_string();
    if failed {
        Err(CliError::Check(report))
    } else {
        Ok(report)
    }
}

/// One model per mode, scored on the test split; writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, modes: Option<&[char]>, out: &Path) -> Result<String, CliError> {
    let mut cfg = cfg.clone();
    if let Some(m) = modes {
        cfg.modes = m.to_vec();
    }
    cfg.validate()?;
    let inputs = load_inputs(&mut cfg)?;
    cfg.validate()?;
    let buckets = cfg.buckets();
    let runs = ablate(
        &inputs.series,
        &inputs.graph,
        &cfg.model,
        &cfg.train,
        &cfg.data,
        &cfg.modes,
        &buckets,
    )
    .data()?;
    let hash = cfg.hash();
    let mut csv = hash_line(&hash) + "mode,horizon_minutes,mae,rmse\n";
    let mut summary = String::new();
    for run in &runs {
        let r = &run.report;
        for i in 0..r.horizon_minutes.len() {
            let _ = writeln!(csv, "{},{},{:e},{:e}", run.mode, r.horizon_minutes[i], r.mae[i], r.rmse[i]);
        }
        let _ = writeln!(
            summary,
            "mode {}: RMSE {} ({} steps)",
            run.mode,
            r.rmse.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" / "),
            run.outcome.steps_run
        );
    }
    ensure_dir(out)?;
    write_file(&out.join("ablation.csv"), &csv)?;
    Ok(summary.trim_end().to_string())
}

/// Resolves `--config`, falling back to preset defaults in the working
/// directory.
pub fn load_config(path: Option<&PathBuf>, default_preset: crate::config::Preset) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::preset(default_preset)),
    }
}
