//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gacan::model::{config_hash, ModelConfig};
use gacan::trainer::{default_buckets, DataOptions, LossKind, TrainConfig};

use crate::error::CliError;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "base settings: toy (default), standard or gradcheck"),
    ("speeds", "speed CSV, relative to the config file"),
    ("distances", "distance CSV (from,to,distance), relative to the config file"),
    ("graph_sigma2", "Gaussian kernel width for edge weights"),
    ("graph_epsilon", "edge weight threshold"),
    ("split", "train,val,test fractions"),
    ("standardize", "divide by the per-node training deviation (true/false)"),
    ("buckets", "horizon steps reported by eval and ablate, comma separated"),
    ("modes", "ablation modes, subset of a,b,c,d"),
    ("seed", "parameter initialization and batch shuffling seed"),
    ("n_nodes", "number of sensors; defaults to the speed file width"),
    ("p_minutes", "minutes per slice"),
    ("q", "recent-window length in slices"),
    ("horizon", "forecast steps H"),
    ("heads", "attention heads K"),
    ("cheb_order", "Chebyshev terms r"),
    ("blocks", "number of Att-Conv-Att blocks"),
    ("channels", "output width of each block, comma separated"),
    ("head_dim", "width of each attention head, or auto for the block width"),
    ("t_align", "common time length the granularity streams are aligned to"),
    ("leaky_slope", "negative slope of the leaky activations"),
    ("second_attention", "fused-dilated or single"),
    ("score_sharing", "per-node or node-mean attention scores"),
    ("granularities", "model input streams, subset of m,h,d,w"),
    ("layout", "periodic stream layout: blocks or strided"),
    ("t_h", "hourly blocks"),
    ("t_d", "daily blocks"),
    ("t_w", "weekly blocks"),
    ("learning_rate", "Adam step size"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_epsilon", "Adam denominator offset"),
    ("batch_size", "windows per step"),
    ("max_steps", "optimizer step limit"),
    ("patience", "evaluations without improvement before stopping"),
    ("eval_every", "steps between validation passes"),
    ("val_limit", "validation windows per pass, 0 for all"),
    ("loss", "rmse or mse"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Standard,
    Gradcheck,
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "toy" => Ok(Preset::Toy),
            "standard" => Ok(Preset::Standard),
            "gradcheck" => Ok(Preset::Gradcheck),
            _ => Err(CliError::Config(format!("unknown preset '{s}'"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Toy => "toy",
            Preset::Standard => "standard",
            Preset::Gradcheck => "gradcheck",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: Preset,
    pub speeds: String,
    pub distances: String,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub graph_sigma2: f64,
    pub graph_epsilon: f64,
    pub data: DataOptions,
    pub buckets: Option<Vec<usize>>,
    pub modes: Vec<char>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    explicit: BTreeSet<String>,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train, standardize) = match preset {
            Preset::Toy => (ModelConfig::toy(1), TrainConfig::toy(), true),
            Preset::Standard => (ModelConfig::standard(1), TrainConfig::default(), false),
            Preset::Gradcheck => (ModelConfig::gradcheck(4), TrainConfig::default(), false),
        };
        RunConfig {
            preset,
            speeds: "speeds.csv".into(),
            distances: "distances.csv".into(),
            base_dir: PathBuf::from("."),
            graph_sigma2: gacan::graphspec::DEFAULT_SIGMA2,
            graph_epsilon: gacan::graphspec::DEFAULT_EPSILON,
            data: DataOptions {
                standardize,
                ..DataOptions::default()
            },
            buckets: None,
            modes: vec!['a', 'b', 'c', 'd'],
            model,
            train,
            explicit: BTreeSet::new(),
        }
    }

    /// Parses config text. `preset` is applied first wherever it appears;
    /// the remaining keys override it in order. Unknown and repeated keys
    /// are errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(CliError::Config(format!("{origin}:{}: unknown key '{k}'", i + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("{origin}:{}: duplicate key '{k}'", i + 1)));
            }
            pairs.push((i + 1, k.to_string(), v.to_string()));
        }
        let preset = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((_, _, v)) => v.parse()?,
            None => Preset::Toy,
        };
        let mut cfg = RunConfig::preset(preset);
        for (line, k, v) in &pairs {
            cfg.set(k, v)
                .map_err(|e| CliError::Config(format!("{origin}:{line}: {}", e.message())))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let model_err = |e: gacan::Error| CliError::Config(e.to_string());
        match key {
            "preset" => {}
            "speeds" => self.speeds = value.to_string(),
            "distances" => self.distances = value.to_string(),
            "graph_sigma2" => self.graph_sigma2 = parse(key, value)?,
            "graph_epsilon" => self.graph_epsilon = parse(key, value)?,
            "split" => {
                let v: Vec<f64> = value.split(',').map(|x| parse(key, x.trim())).collect::<Result<_, _>>()?;
                if v.len() != 3 {
                    return Err(CliError::Config(format!("split: expected three fractions, got '{value}'")));
                }
                self.data.ratios = (v[0], v[1], v[2]);
            }
            "standardize" => self.data.standardize = parse_bool(key, value)?,
            "buckets" => {
                self.buckets = Some(value.split(',').map(|x| parse(key, x.trim())).collect::<Result<_, _>>()?)
            }
            "modes" => self.modes = parse_modes(value)?,
            "seed" => {
                let s: u64 = parse(key, value)?;
                self.set_seed(s);
            }
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "adam_epsilon" => self.train.epsilon = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "max_steps" => self.train.max_steps = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "eval_every" => self.train.eval_every = parse(key, value)?,
            "val_limit" => self.train.val_limit = parse(key, value)?,
            "loss" => self.train.loss = value.parse::<LossKind>().map_err(model_err)?,
            _ => {
                if !self.model.set(key, value).map_err(model_err)? {
                    return Err(CliError::Config(format!("unknown key '{key}'")));
                }
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.explicit.insert("seed".into());
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn speeds_path(&self) -> PathBuf {
        self.base_dir.join(&self.speeds)
    }

    pub fn distances_path(&self) -> PathBuf {
        self.base_dir.join(&self.distances)
    }

    pub fn buckets(&self) -> Vec<usize> {
        self.buckets
            .clone()
            .unwrap_or_else(|| default_buckets(self.model.p_minutes, self.model.horizon))
    }

    /// Checks the model and training sections.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for &b in &self.buckets() {
            if b == 0 || b > self.model.horizon {
                return Err(CliError::Config(format!(
                    "bucket {b} outside 1..={}",
                    self.model.horizon
                )));
            }
        }
        Ok(())
    }

    /// The complete effective configuration, one pair per key, in a fixed
    /// order. Parsing these pairs back gives the same configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (a, b, c) = self.data.ratios;
        let mut out: Vec<(String, String)> = vec![
            ("preset".into(), self.preset.to_string()),
            ("speeds".into(), self.speeds.clone()),
            ("distances".into(), self.distances.clone()),
            ("graph_sigma2".into(), self.graph_sigma2.to_string()),
            ("graph_epsilon".into(), self.graph_epsilon.to_string()),
            ("split".into(), format!("{a},{b},{c}")),
            ("standardize".into(), self.data.standardize.to_string()),
            ("buckets".into(), join(&self.buckets())),
            ("modes".into(), join(&self.modes)),
        ];
        out.extend(self.model.to_pairs());
        let t = &self.train;
        out.extend([
            ("learning_rate".into(), t.learning_rate.to_string()),
            ("beta1".into(), t.beta1.to_string()),
            ("beta2".into(), t.beta2.to_string()),
            ("adam_epsilon".into(), t.epsilon.to_string()),
            ("batch_size".into(), t.batch_size.to_string()),
            ("max_steps".into(), t.max_steps.to_string()),
            ("patience".into(), t.patience.to_string()),
            ("eval_every".into(), t.eval_every.to_string()),
            ("val_limit".into(), t.val_limit.to_string()),
            ("loss".into(), t.loss.to_string()),
        ]);
        out
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_pairs())
    }

    /// `key = value` text followed by the hash as a comment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("# config_hash = {}\n", self.hash()));
        s
    }
}

pub fn parse_modes(value: &str) -> Result<Vec<char>, CliError> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let mut chars = part.chars();
        match (chars.next(), chars.next()) {
            (Some(c @ 'a'..='d'), None) if !out.contains(&c) => out.push(c),
            _ => return Err(CliError::Config(format!("modes: bad entry '{part}'"))),
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("modes: empty".into()));
    }
    Ok(out)
}
