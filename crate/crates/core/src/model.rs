//! The full network: stacked Att-Conv-Att blocks and a single-head
//! temporal attention output head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attention::{
    align_name, align_time, dilations_for, init_align, AttentionParams, FusionParams, ScoreSharing,
};
use crate::data::{
    extract_windows, Granularity, GranularityMask, NormStats, WindowLayout, WindowSpec, WindowedSample,
};
use crate::diffcore::{
    grad_check_on, Checkpoint, Fault, GradCheckReport, Graph, ParameterStore, Stencil, Tensor, Var, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::graphspec::{cheb_conv, SpectralOperator, TrafficGraph};

/// Finite-difference steps for block- and network-level gradient checks.
/// Attention-score gradients sit several orders below the loss, so small
/// steps drown in round-off, while large ones can straddle a leaky kink.
pub const MODEL_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// How the second attention set of a block (and the first set of every
/// later block) reads its single input map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SecondAttention {
    /// Four attentions over the same map with lag dilations 1, 2, 4, 8.
    #[default]
    FusedDilated,
    /// One attention with lag stride 1.
    Single,
}

impl FromStr for SecondAttention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused-dilated" => Ok(Self::FusedDilated),
            "single" => Ok(Self::Single),
            _ => Err(Error::Validation(format!("unknown second-attention mode '{s}'"))),
        }
    }
}

impl fmt::Display for SecondAttention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FusedDilated => "fused-dilated",
            Self::Single => "single",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub p_minutes: usize,
    pub q: usize,
    pub horizon: usize,
    pub heads: usize,
    pub cheb_order: usize,
    pub blocks: usize,
    /// Output width of each block.
    pub channels: Vec<usize>,
    /// Width of every attention head; `None` uses the block width.
    pub head_dim: Option<usize>,
    pub t_align: usize,
    pub leaky_slope: f64,
    pub second_attention: SecondAttention,
    pub score_sharing: ScoreSharing,
    pub mask: GranularityMask,
    pub layout: WindowLayout,
    /// `[t_h, t_d, t_w]`.
    pub periods: [usize; 3],
    pub seed: u64,
}

impl ModelConfig {
    /// Two blocks of width 16, four heads, third-order filters, and two
    /// weeks of original-granularity history.
    pub fn standard(n_nodes: usize) -> Self {
        let q = 2 * 7 * 24 * 12;
        ModelConfig {
            n_nodes,
            p_minutes: 5,
            q,
            horizon: 12,
            heads: 4,
            cheb_order: 3,
            blocks: 2,
            channels: vec![16, 16],
            head_dim: None,
            t_align: 12,
            leaky_slope: 0.2,
            second_attention: SecondAttention::FusedDilated,
            score_sharing: ScoreSharing::PerNode,
            mask: GranularityMask::FULL,
            layout: WindowLayout::Blocks,
            periods: [q / 12, q / 288, q / 2016],
            seed: 0,
        }
    }

    /// Small single-block network for desk-scale training on 5-minute data.
    pub fn toy(n_nodes: usize) -> Self {
        ModelConfig {
            n_nodes,
            p_minutes: 5,
            q: 12,
            horizon: 12,
            heads: 2,
            cheb_order: 2,
            blocks: 1,
            channels: vec![32],
            head_dim: Some(16),
            t_align: 12,
            leaky_slope: 0.2,
            second_attention: SecondAttention::Single,
            score_sharing: ScoreSharing::PerNode,
            mask: GranularityMask::FULL,
            layout: WindowLayout::Blocks,
            periods: [2, 2, 1],
            seed: 0,
        }
    }

    /// Tiny network for finite-difference checks: 4 nodes, H = 2, three
    /// positions per stream, two heads, second-order filters, one block.
    pub fn gradcheck(n_nodes: usize) -> Self {
        ModelConfig {
            n_nodes,
            p_minutes: 5,
            q: 3,
            horizon: 2,
            heads: 2,
            cheb_order: 2,
            blocks: 1,
            channels: vec![3],
            head_dim: Some(2),
            t_align: 2,
            leaky_slope: 0.2,
            second_attention: SecondAttention::FusedDilated,
            score_sharing: ScoreSharing::PerNode,
            mask: GranularityMask::FULL,
            layout: WindowLayout::Blocks,
            periods: [3, 3, 3],
            seed: 0,
        }
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::build(self.p_minutes, self.q, self.horizon, self.periods, self.mask, self.layout)
    }

    pub fn head_dim_for(&self, block: usize) -> usize {
        self.head_dim.unwrap_or(self.channels[block])
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let positive = [
            ("n_nodes", self.n_nodes),
            ("q", self.q),
            ("horizon", self.horizon),
            ("heads", self.heads),
            ("cheb_order", self.cheb_order),
            ("blocks", self.blocks),
            ("t_align", self.t_align),
            ("t_h", self.periods[0]),
            ("t_d", self.periods[1]),
            ("t_w", self.periods[2]),
        ];
        for (k, v) in positive {
            if v == 0 {
                bad.push(format!("{k} must be >= 1"));
            }
        }
        if self.channels.len() != self.blocks {
            bad.push(format!(
                "channels lists {} widths for {} blocks",
                self.channels.len(),
                self.blocks
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            bad.push("channels must be >= 1".into());
        }
        if self.head_dim == Some(0) {
            bad.push("head_dim must be >= 1".into());
        }
        if !self.leaky_slope.is_finite() {
            bad.push("leaky_slope must be finite".into());
        }
        if bad.is_empty() {
            if let Err(e) = self.window_spec() {
                bad.push(e.to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid model config: {}", bad.join("; "))))
        }
    }

    /// Canonical `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let channels: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        [
            ("n_nodes", self.n_nodes.to_string()),
            ("p_minutes", self.p_minutes.to_string()),
            ("q", self.q.to_string()),
            ("horizon", self.horizon.to_string()),
            ("heads", self.heads.to_string()),
            ("cheb_order", self.cheb_order.to_string()),
            ("blocks", self.blocks.to_string()),
            ("channels", channels.join(",")),
            ("head_dim", self.head_dim.map_or("auto".into(), |d| d.to_string())),
            ("t_align", self.t_align.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("second_attention", self.second_attention.to_string()),
            ("score_sharing", self.score_sharing.to_string()),
            ("granularities", self.mask.to_string()),
            ("layout", self.layout.to_string()),
            ("t_h", self.periods[0].to_string()),
            ("t_d", self.periods[1].to_string()),
            ("t_w", self.periods[2].to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// that are not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Validation(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "n_nodes" => self.n_nodes = num(key, value)?,
            "p_minutes" => self.p_minutes = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "cheb_order" => self.cheb_order = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|c| num(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "head_dim" => {
                self.head_dim = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "t_align" => self.t_align = num(key, value)?,
            "leaky_slope" => self.leaky_slope = num(key, value)?,
            "second_attention" => self.second_attention = value.parse()?,
            "score_sharing" => self.score_sharing = value.parse()?,
            "granularities" => self.mask = value.parse()?,
            "layout" => self.layout = value.parse()?,
            "t_h" => self.periods[0] = num(key, value)?,
            "t_d" => self.periods[1] = num(key, value)?,
            "t_w" => self.periods[2] = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Rebuilds a config from a complete set of pairs (as written by
    /// [`ModelConfig::to_pairs`]); unknown keys are rejected.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::toy(1);
        let mut seen = Vec::new();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Validation(format!("unknown model config key '{k}'")));
            }
            seen.push(k.to_string());
        }
        let missing: Vec<String> = cfg
            .to_pairs()
            .into_iter()
            .map(|(k, _)| k)
            .filter(|k| !seen.contains(k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!("missing model config keys: {}", missing.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical pairs.
    pub fn hash(&self) -> String {
        config_hash(&self.to_pairs())
    }
}

pub fn config_hash(pairs: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in pairs {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GacanModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

fn block_prefix(b: usize) -> String {
    format!("b{b}")
}

fn first_set(cfg: &ModelConfig, b: usize, spec: &WindowSpec) -> Result<Vec<AttentionParams>> {
    let (k, d) = (cfg.heads, cfg.head_dim_for(b));
    let pre = block_prefix(b);
    if b == 0 {
        Granularity::ALL
            .iter()
            .map(|g| {
                let c = spec.stream_shape(*g).1;
                AttentionParams::new(format!("{pre}.att1.{}", g.tag()), c, k, d)
                    .map(|a| a.with_sharing(cfg.score_sharing))
            })
            .collect()
    } else {
        let c = cfg.channels[b - 1];
        (0..4)
            .map(|i| AttentionParams::new(format!("{pre}.att1.{i}"), c, k, d).map(|a| a.with_sharing(cfg.score_sharing)))
            .collect()
    }
}

fn second_set(cfg: &ModelConfig, b: usize) -> Result<Vec<AttentionParams>> {
    let n = match cfg.second_attention {
        SecondAttention::FusedDilated => 4,
        SecondAttention::Single => 1,
    };
    let pre = block_prefix(b);
    (0..n)
        .map(|i| {
            AttentionParams::new(format!("{pre}.att2.{i}"), cfg.channels[b], cfg.heads, cfg.head_dim_for(b))
                .map(|a| a.with_sharing(cfg.score_sharing))
        })
        .collect()
}

fn fusion(cfg: &ModelConfig, b: usize, which: usize, streams: usize) -> Result<FusionParams> {
    FusionParams::new(
        format!("{}.fuse{which}", block_prefix(b)),
        streams,
        cfg.heads * cfg.head_dim_for(b),
        cfg.channels[b],
    )
}

fn cheb_name(b: usize, k: usize) -> String {
    format!("{}.cheb.{k}", block_prefix(b))
}

fn output_attention(cfg: &ModelConfig) -> Result<AttentionParams> {
    let p = *cfg.channels.last().unwrap();
    Ok(AttentionParams::new("out.att", p, 1, cfg.head_dim.unwrap_or(p))?.with_sharing(cfg.score_sharing))
}

/// Deterministic Glorot-uniform initialization from `seed`; biases and
/// layer-norm offsets start at 0, layer-norm gains at 1. Parameters for
/// all four granularities are created whatever the mask, so networks that
/// differ only in their mask start from identical tensors.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<GacanModel> {
    config.validate()?;
    let spec = config.window_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for b in 0..config.blocks {
        let pre = block_prefix(b);
        let p = config.channels[b];
        for att in first_set(config, b, &spec)? {
            att.init(&mut store, &mut rng)?;
        }
        if b == 0 {
            for g in Granularity::ALL {
                let len = spec.stream_shape(g).0;
                init_align(&mut store, align_name(&pre, g), config.t_align, len, &mut rng)?;
            }
        }
        fusion(config, b, 1, 4)?.init(&mut store, &mut rng)?;
        for k in 0..config.cheb_order {
            store.insert_glorot(cheb_name(b, k), &[p, p], config.cheb_order * p, p, &mut rng)?;
        }
        let second = second_set(config, b)?;
        for att in &second {
            att.init(&mut store, &mut rng)?;
        }
        fusion(config, b, 2, second.len())?.init(&mut store, &mut rng)?;
        store.insert_glorot(format!("{pre}.fc.w"), &[p, p], p, p, &mut rng)?;
        store.insert(format!("{pre}.fc.b"), Tensor::zeros(&[p]))?;
        store.insert(format!("{pre}.ln.gain"), Tensor::ones(&[p]))?;
        store.insert(format!("{pre}.ln.bias"), Tensor::zeros(&[p]))?;
    }
    let out = output_attention(config)?;
    out.init(&mut store, &mut rng)?;
    let width = config.t_align * out.out_channels();
    store.insert_glorot("out.fc.w", &[width, config.horizon], width, config.horizon, &mut rng)?;
    store.insert("out.fc.b", Tensor::zeros(&[config.horizon]))?;
    Ok(GacanModel {
        config: config.clone(),
        params: store,
    })
}

/// Input to one block: the raw granularity streams (first block) or the
/// previous block's map.
#[derive(Clone, Copy, Debug)]
pub enum BlockInput<'a> {
    Streams(&'a [Option<Var>; 4]),
    Map(Var),
}

fn dilated_attention(
    g: &mut Graph,
    store: &ParameterStore,
    atts: &[AttentionParams],
    x: Var,
    slope: f64,
) -> Result<Vec<Option<Var>>> {
    let len = g.shape(x)[0];
    let dil = if atts.len() == 1 { [1; 4] } else { dilations_for(len) };
    atts.iter()
        .zip(dil)
        .map(|(a, s)| a.forward(g, store, x, s, slope, true).map(Some))
        .collect()
}

/// `layer_norm(FC(Att₂(ReLU(cheb_conv(Att₁(input))))))`, returning
/// (T_align, N, channels[b]).
pub fn aca_forward(
    g: &mut Graph,
    config: &ModelConfig,
    store: &ParameterStore,
    b: usize,
    input: BlockInput<'_>,
    scaled: Var,
) -> Result<Var> {
    let slope = config.leaky_slope;
    let spec = config.window_spec()?;
    let pre = block_prefix(b);
    let first = first_set(config, b, &spec)?;
    let streams: Vec<Option<Var>> = match input {
        BlockInput::Streams(inputs) => {
            let mut out = Vec::with_capacity(4);
            for (gran, att) in Granularity::ALL.into_iter().zip(&first) {
                if !config.mask.contains(gran) {
                    out.push(None);
                    continue;
                }
                let x = inputs[gran.index()].ok_or_else(|| {
                    Error::Validation(format!("granularity '{}' is enabled but its stream is missing", gran.tag()))
                })?;
                let y = att.forward(g, store, x, 1, slope, true)?;
                out.push(Some(align_time(g, store, &align_name(&pre, gran), y)?));
            }
            out
        }
        BlockInput::Map(x) => dilated_attention(g, store, &first, x, slope)?,
    };
    let fused = fusion(config, b, 1, 4)?.forward(g, store, &streams, slope)?;

    let theta: Vec<Var> = (0..config.cheb_order)
        .map(|k| g.param(store, &cheb_name(b, k)))
        .collect::<Result<_>>()?;
    let conv = cheb_conv(g, scaled, fused, &theta)?;
    let act = g.relu(conv);

    let second = second_set(config, b)?;
    let streams = dilated_attention(g, store, &second, act, slope)?;
    let fused = fusion(config, b, 2, second.len())?.forward(g, store, &streams, slope)?;

    let w = g.param(store, &format!("{pre}.fc.w"))?;
    let bias = g.param(store, &format!("{pre}.fc.b"))?;
    let y = g.fully_connected(fused, w, bias, slope)?;
    let gain = g.param(store, &format!("{pre}.ln.gain"))?;
    let beta = g.param(store, &format!("{pre}.ln.bias"))?;
    g.layer_norm(y, gain, beta, LAYER_NORM_EPS)
}

/// Full forward pass on graph nodes; returns the (H, N) prediction.
pub fn forward_graph(
    g: &mut Graph,
    config: &ModelConfig,
    store: &ParameterStore,
    inputs: &[Option<Var>; 4],
    scaled: Var,
) -> Result<Var> {
    let mut x = aca_forward(g, config, store, 0, BlockInput::Streams(inputs), scaled)?;
    for b in 1..config.blocks {
        x = aca_forward(g, config, store, b, BlockInput::Map(x), scaled)?;
    }
    let out = output_attention(config)?;
    let y = out.forward(g, store, x, 1, config.leaky_slope, true)?;
    let s = g.shape(y).to_vec();
    let node_major = g.swap01(y)?;
    let flat = g.reshape(node_major, &[s[1], s[0] * s[2]])?;
    let w = g.param(store, "out.fc.w")?;
    let bias = g.param(store, "out.fc.b")?;
    let z = g.linear(flat, w, bias)?;
    g.transpose(z)
}

/// Registers the sample's streams as constants and runs [`forward_graph`].
pub fn forward_sample(
    g: &mut Graph,
    config: &ModelConfig,
    store: &ParameterStore,
    sample: &WindowedSample,
    scaled: Var,
) -> Result<Var> {
    let mut inputs = [None; 4];
    for gran in config.mask.iter() {
        let t = sample.streams[gran.index()].as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "sample at t0={} lacks the '{}' stream required by the model",
                sample.t0,
                gran.tag()
            ))
        })?;
        inputs[gran.index()] = Some(g.constant(t.clone()));
    }
    forward_graph(g, config, store, &inputs, scaled)
}

impl GacanModel {
    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_graph(&self, graph: &SpectralOperator) -> Result<()> {
        if graph.n_nodes() != self.config.n_nodes {
            return Err(Error::Validation(format!(
                "model expects {} nodes, graph has {}",
                self.config.n_nodes,
                graph.n_nodes()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, norm: Option<&NormStats>) -> Checkpoint {
        let mut meta = self.config.to_pairs();
        meta.push(("config_hash".into(), self.config.hash()));
        let mut ck = self.params.to_checkpoint(meta);
        if let Some(ns) = norm {
            let n = ns.mean.len();
            ck.tensors.insert("norm.mean".into(), Tensor::new(&[n], ns.mean.clone()).unwrap());
            if let Some(sd) = &ns.std {
                ck.tensors.insert("norm.std".into(), Tensor::new(&[n], sd.clone()).unwrap());
            }
        }
        ck
    }

    /// Restores a model (and normalization statistics, if stored). The
    /// embedded hash must match the embedded config and every tensor must
    /// have the shape a fresh initialization would give it. Metadata keys
    /// starting with `run_` are informational and ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<NormStats>)> {
        let pairs = ck
            .meta
            .iter()
            .filter(|(k, _)| k != "config_hash" && !k.starts_with("run_"))
            .map(|(k, v)| (k.as_str(), v.as_str()));
        let config = ModelConfig::from_pairs(pairs)?;
        match ck.meta_value("config_hash") {
            Some(h) if h == config.hash() => {}
            Some(h) => {
                return Err(Error::Validation(format!(
                    "checkpoint config hash {h} does not match its config ({})",
                    config.hash()
                )))
            }
            None => return Err(Error::Validation("checkpoint lacks config_hash".into())),
        }
        let params = ParameterStore::from_tensors(ck.tensors.iter().filter(|(k, _)| !k.starts_with("norm.")))?;
        let fresh = init_model(&config, 0)?;
        let names_match = fresh.params.names().eq(params.names());
        let shapes_match = names_match
            && fresh
                .params
                .iter()
                .all(|(k, t)| params.get(k).map(|p| p.shape()) == Some(t.shape()));
        if !shapes_match {
            return Err(Error::Validation("checkpoint tensors do not match the model config".into()));
        }
        if !params.is_finite() {
            return Err(Error::Validation("checkpoint holds non-finite parameters".into()));
        }
        let norm = match ck.tensors.get("norm.mean") {
            Some(m) => Some(NormStats {
                mean: m.data().to_vec(),
                std: ck.tensors.get("norm.std").map(|s| s.data().to_vec()),
            }),
            None => None,
        };
        Ok((GacanModel { config, params }, norm))
    }
}

/// Evaluates the network on one sample: (H, N), in the units the model was
/// trained on.
pub fn model_forward(sample: &WindowedSample, model: &GacanModel, graph: &SpectralOperator) -> Result<Tensor> {
    model.check_graph(graph)?;
    let mut g = Graph::new();
    let scaled = g.constant(graph.scaled_laplacian.clone());
    let y = forward_sample(&mut g, &model.config, &model.params, sample, scaled)?;
    Ok(g.value(y).clone())
}

/// Tolerance for the single-block gradient check.
pub const BLOCK_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end gradient check.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Ring graph over `n` nodes with unit distances.
pub fn ring_operator(n: usize) -> Result<SpectralOperator> {
    let mut d = Tensor::filled(&[n, n], f64::INFINITY);
    for i in 0..n {
        d.set(&[i, i], 0.0);
        d.set(&[i, (i + 1) % n], 1.0);
        d.set(&[(i + 1) % n, i], 1.0);
    }
    SpectralOperator::from_graph(&TrafficGraph::from_distances(d, 10.0, 0.5)?)
}

/// The earliest full window of a series of uniform noise on [-1, 1).
pub fn noise_sample(cfg: &ModelConfig, seed: u64) -> Result<WindowedSample> {
    let spec = cfg.window_spec()?;
    let t_len = spec.min_t0() + cfg.horizon + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Tensor::new(
        &[t_len, cfg.n_nodes],
        (0..t_len * cfg.n_nodes).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    extract_windows(&values, spec.min_t0(), &spec)
}

fn check_graph_for(fault: Option<Fault>) -> impl Fn() -> Graph {
    move || fault.map_or_else(Graph::new, Graph::with_fault)
}

/// Finite-difference check of the first block alone on a ring graph, with
/// the loss a fixed random projection of the block output. Uses seeds
/// `seed` (parameters), `seed + 1` (input) and `seed + 2` (projection).
pub fn block_grad_check(cfg: &ModelConfig, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let m = init_model(cfg, seed)?;
    let mut full = cfg.clone();
    full.mask = GranularityMask::FULL;
    let s = noise_sample(&full, seed + 1)?;
    let lt = ring_operator(cfg.n_nodes)?.scaled_laplacian;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let (t_align, p) = (cfg.t_align, cfg.channels[0]);
    let proj = Tensor::new(
        &[t_align, cfg.n_nodes, p],
        (0..t_align * cfg.n_nodes * p).map(|_| rng.gen_range(0.5..1.5)).collect(),
    )?;
    grad_check_on(
        check_graph_for(fault),
        |g, store| {
            let scaled = g.constant(lt.clone());
            let mut inputs = [None; 4];
            for gr in cfg.mask.iter() {
                inputs[gr.index()] = s.streams[gr.index()].clone().map(|t| g.constant(t));
            }
            let y = aca_forward(g, cfg, store, 0, BlockInput::Streams(&inputs), scaled)?;
            let pv = g.constant(proj.clone());
            let prod = g.mul(y, pv)?;
            Ok(g.sum(prod))
        },
        &m.params,
        &MODEL_STEPS,
        Stencil::Central,
        BLOCK_TOLERANCE,
    )
}

/// Finite-difference check of the whole network under the mean squared
/// error on a ring graph. Uses seeds `seed` (parameters) and `seed + 10`
/// (input window).
pub fn network_grad_check(cfg: &ModelConfig, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let m = init_model(cfg, seed)?;
    let s = noise_sample(cfg, seed + 10)?;
    let lt = ring_operator(cfg.n_nodes)?.scaled_laplacian;
    grad_check_on(
        check_graph_for(fault),
        |g, store| {
            let scaled = g.constant(lt.clone());
            let y = forward_sample(g, cfg, store, &s, scaled)?;
            let t = g.constant(s.target.clone());
            let d = g.sub(y, t)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        },
        &m.params,
        &MODEL_STEPS,
        Stencil::Central,
        NETWORK_TOLERANCE,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphspec::TrafficGraph;
    use rand::Rng;

    fn edgeless(n: usize) -> SpectralOperator {
        SpectralOperator::from_graph(&TrafficGraph::edgeless(n)).unwrap()
    }

    /// Parameter count from layer shapes alone.
    fn expected_count(cfg: &ModelConfig) -> usize {
        let spec = cfg.window_spec().unwrap();
        let k = cfg.heads;
        let att = |c: usize, heads: usize, d: usize| 2 * c + 1 + c * heads * d;
        let mut total = 0;
        for b in 0..cfg.blocks {
            let p = cfg.channels[b];
            let d = cfg.head_dim.unwrap_or(p);
            if b == 0 {
                for g in Granularity::ALL {
                    let (len, c) = spec.stream_shape(g);
                    total += att(c, k, d) + cfg.t_align * len;
                }
            } else {
                total += 4 * att(cfg.channels[b - 1], k, d);
            }
            total += 4 * k * d * p + p;
            total += cfg.cheb_order * p * p;
            let n2 = if cfg.second_attention == SecondAttention::Single { 1 } else { 4 };
            total += n2 * att(p, k, d) + n2 * k * d * p + p;
            total += p * p + p + 2 * p;
        }
        let p = *cfg.channels.last().unwrap();
        let d = cfg.head_dim.unwrap_or(p);
        total + att(p, 1, d) + cfg.t_align * d * cfg.horizon + cfg.horizon
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        for cfg in [ModelConfig::standard(8), ModelConfig::toy(8), ModelConfig::gradcheck(4)] {
            let m = init_model(&cfg, 1).unwrap();
            assert_eq!(m.num_scalars(), expected_count(&cfg));
        }
        let mut single = ModelConfig::standard(8);
        single.second_attention = SecondAttention::Single;
        single.head_dim = Some(5);
        assert_eq!(init_model(&single, 1).unwrap().num_scalars(), expected_count(&single));
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let cfg = ModelConfig::toy(5);
        let a = init_model(&cfg, 3).unwrap().to_checkpoint(None).to_text();
        let b = init_model(&cfg, 3).unwrap().to_checkpoint(None).to_text();
        assert_eq!(a, b);
        assert_ne!(a, init_model(&cfg, 4).unwrap().to_checkpoint(None).to_text());
        let mut bad = cfg.clone();
        bad.blocks = 0;
        bad.channels.clear();
        bad.heads = 0;
        match init_model(&bad, 0) {
            Err(Error::Validation(m)) => assert!(m.contains("blocks") && m.contains("heads")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn masks_share_initial_tensors() {
        let full = init_model(&ModelConfig::toy(4), 9).unwrap();
        let mut cfg = ModelConfig::toy(4);
        cfg.mask = GranularityMask::for_mode('a').unwrap();
        let a = init_model(&cfg, 9).unwrap();
        assert_eq!(full.params, a.params);
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut two = ModelConfig::toy(5);
        two.blocks = 2;
        two.channels = vec![6, 4];
        two.second_attention = SecondAttention::FusedDilated;
        for cfg in [ModelConfig::toy(5), ModelConfig::gradcheck(5), two] {
            let m = init_model(&cfg, 2).unwrap();
            let s = noise_sample(&cfg, 3).unwrap();
            let graph = ring_operator(5).unwrap();
            let y = model_forward(&s, &m, &graph).unwrap();
            assert_eq!(y.shape(), &[cfg.horizon, 5]);
            assert!(y.is_finite());
            assert_eq!(y, model_forward(&s, &m, &graph).unwrap());
        }
    }

    #[test]
    fn missing_stream_is_rejected() {
        let cfg = ModelConfig::gradcheck(4);
        let m = init_model(&cfg, 1).unwrap();
        let mut s = noise_sample(&cfg, 1).unwrap();
        s.streams[3] = None;
        assert!(matches!(model_forward(&s, &m, &ring_operator(4).unwrap()), Err(Error::Validation(_))));
    }

    #[test]
    fn masked_model_ignores_other_streams() {
        let mut cfg = ModelConfig::gradcheck(4);
        cfg.mask = GranularityMask::for_mode('a').unwrap();
        let m = init_model(&cfg, 1).unwrap();
        let full = noise_sample(&ModelConfig::gradcheck(4), 5).unwrap();
        let mut only_m = full.clone();
        for k in 1..4 {
            only_m.streams[k] = None;
        }
        let graph = ring_operator(4).unwrap();
        assert_eq!(model_forward(&full, &m, &graph).unwrap(), model_forward(&only_m, &m, &graph).unwrap());
    }

    #[test]
    fn zero_input_gives_time_constant_block_output() {
        let cfg = ModelConfig::gradcheck(4);
        let m = init_model(&cfg, 6).unwrap();
        let mut g = Graph::new();
        let scaled = g.constant(ring_operator(4).unwrap().scaled_laplacian);
        let spec = cfg.window_spec().unwrap();
        let mut inputs = [None; 4];
        for gr in Granularity::ALL {
            let (l, c) = spec.stream_shape(gr);
            inputs[gr.index()] = Some(g.constant(Tensor::zeros(&[l, 4, c])));
        }
        let y = aca_forward(&mut g, &cfg, &m.params, 0, BlockInput::Streams(&inputs), scaled).unwrap();
        let y = g.value(y);
        let per_t = 4 * cfg.channels[0];
        for t in 1..cfg.t_align {
            for k in 0..per_t {
                assert!((y.data()[t * per_t + k] - y.data()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_edges_no_cross_node_sensitivity() {
        let cfg = ModelConfig::gradcheck(4);
        let m = init_model(&cfg, 7).unwrap();
        let graph = edgeless(4);
        let base_s = noise_sample(&cfg, 8).unwrap();
        let base = model_forward(&base_s, &m, &graph).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let j = rng.gen_range(0..4);
            let mut s = base_s.clone();
            for t in s.streams.iter_mut().flatten() {
                let (l, c) = (t.shape()[0], t.shape()[2]);
                for p in 0..l {
                    for k in 0..c {
                        let v = t.get(&[p, j, k]);
                        t.set(&[p, j, k], v + 1.0);
                    }
                }
            }
            let y = model_forward(&s, &m, &graph).unwrap();
            for i in (0..4).filter(|&i| i != j) {
                for h in 0..cfg.horizon {
                    assert!((y.get(&[h, i]) - base.get(&[h, i])).abs() <= 1e-9);
                }
            }
            assert!((0..cfg.horizon).any(|h| y.get(&[h, j]) != base.get(&[h, j])));
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let report = block_grad_check(&ModelConfig::gradcheck(4), 11, None).unwrap();
        assert!(report.passed(), "{:?}", report.worst(3));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        for seed in 30..33 {
            let report = network_grad_check(&ModelConfig::gradcheck(4), seed, None).unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.worst(3));
        }
    }

    #[test]
    fn corrupted_backward_rule_fails_the_network_check() {
        let report = network_grad_check(&ModelConfig::gradcheck(4), 30, Some(Fault::LayerNormGain)).unwrap();
        assert!(!report.passed());
        assert!(report.worst(1)[0].name.ends_with("ln.gain"));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = ModelConfig::toy(3);
        let m = init_model(&cfg, 21).unwrap();
        let norm = NormStats {
            mean: vec![1.0, 2.5, -3.0],
            std: Some(vec![0.5, 1.0, 2.0]),
        };
        let text = m.to_checkpoint(Some(&norm)).to_text();
        let ck = Checkpoint::parse(&text, "mem").unwrap();
        let (back, ns) = GacanModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back, m);
        assert_eq!(ns, Some(norm));

        let tampered = text.replace("heads=2", "heads=3");
        let ck = Checkpoint::parse(&tampered, "mem").unwrap();
        assert!(GacanModel::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn config_pairs_roundtrip() {
        let mut cfg = ModelConfig::standard(9);
        cfg.head_dim = Some(7);
        cfg.leaky_slope = 0.15;
        let pairs = cfg.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
        let mut extra = pairs.clone();
        extra.push(("bogus".into(), "1".into()));
        assert!(ModelConfig::from_pairs(extra.iter().map(|(k, v)| (k.as_str(), v.as_str()))).is_err());
    }
}
