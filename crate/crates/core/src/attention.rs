//! Temporal multi-head attention over a node's own past slices, and the
//! fusion layer that merges the four granularity streams.
//!
//! Parameters live in a [`ParameterStore`]; the structs here only carry
//! names and shapes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::Granularity;
use crate::diffcore::{Graph, ParameterStore, Tensor, Var};
use crate::error::{dim_err, Error, Result};

pub const DEFAULT_SLOPE: f64 = 0.2;

/// Lag dilations used when re-deriving four streams from one fused map.
pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Whether attention weights are computed separately for every node or
/// shared across nodes by averaging the per-node scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreSharing {
    /// Keeps nodes independent inside the temporal layers.
    #[default]
    PerNode,
    NodeMean,
}

impl FromStr for ScoreSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-node" => Ok(Self::PerNode),
            "node-mean" => Ok(Self::NodeMean),
            _ => Err(Error::Validation(format!("unknown score sharing '{s}'"))),
        }
    }
}

impl fmt::Display for ScoreSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerNode => "per-node",
            Self::NodeMean => "node-mean",
        })
    }
}

/// One stream: `data` is (positions, N, C), attended with lags that are
/// multiples of `lag_stride` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct GranularityWindow {
    pub granularity: Granularity,
    pub lag_stride: usize,
    pub data: Tensor,
}

impl GranularityWindow {
    pub fn new(granularity: Granularity, lag_stride: usize, data: Tensor) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] == 0 {
            return Err(Error::Validation(format!(
                "window must be (t >= 1, N, C), got {:?}",
                data.shape()
            )));
        }
        if lag_stride == 0 {
            return Err(Error::Validation("lag stride must be positive".into()));
        }
        if !data.is_finite() {
            return Err(Error::Validation("window contains non-finite values".into()));
        }
        Ok(GranularityWindow {
            granularity,
            lag_stride,
            data,
        })
    }
}

/// Scoring FC (2C → 1) shared across heads, plus `heads` transforms of
/// C → `head_dim` stored side by side in one (C, heads·head_dim) matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub prefix: String,
    pub in_channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub sharing: ScoreSharing,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, in_channels: usize, heads: usize, head_dim: usize) -> Result<Self> {
        if in_channels == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::Validation(format!(
                "attention needs C, K, C_head >= 1 (got {in_channels}, {heads}, {head_dim})"
            )));
        }
        Ok(AttentionParams {
            prefix: prefix.into(),
            in_channels,
            heads,
            head_dim,
            sharing: ScoreSharing::default(),
        })
    }

    pub fn with_sharing(mut self, sharing: ScoreSharing) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn score_weight(&self) -> String {
        format!("{}.score.w", self.prefix)
    }

    pub fn score_bias(&self) -> String {
        format!("{}.score.b", self.prefix)
    }

    pub fn heads_name(&self) -> String {
        format!("{}.heads", self.prefix)
    }

    pub fn out_channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn num_scalars(&self) -> usize {
        2 * self.in_channels + 1 + self.in_channels * self.out_channels()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let c = self.in_channels;
        store.insert_glorot(self.score_weight(), &[2 * c, 1], 2 * c, 1, rng)?;
        store.insert(self.score_bias(), Tensor::zeros(&[1]))?;
        store.insert_glorot(self.heads_name(), &[c, self.out_channels()], c, self.head_dim, rng)
    }

    /// Attention weights, (N, L, L) per node or (L, L) when shared; row `t`
    /// is a distribution over the lags `i` with `i * stride <= t`.
    pub fn coeffs(&self, g: &mut Graph, store: &ParameterStore, x: Var, stride: usize, slope: f64) -> Result<Var> {
        self.check_input(g, x)?;
        let w = g.param(store, &self.score_weight())?;
        let b = g.param(store, &self.score_bias())?;
        let scores = g.lag_scores(x, w, b, stride, slope, self.sharing == ScoreSharing::PerNode)?;
        g.lag_softmax(scores, stride)
    }

    /// (L, N, heads·head_dim): per head `σ(Σ_i α[t,i] · x[t − i·stride] W_k)`,
    /// heads concatenated on channels. `activate = false` drops the σ.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        stride: usize,
        slope: f64,
        activate: bool,
    ) -> Result<Var> {
        let alpha = self.coeffs(g, store, x, stride, slope)?;
        self.forward_with_alpha(g, store, x, alpha, stride, activate)
    }

    pub fn forward_with_alpha(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        alpha: Var,
        stride: usize,
        activate: bool,
    ) -> Result<Var> {
        let w = g.param(store, &self.heads_name())?;
        let z = g.matmul_last(x, w)?;
        let mixed = g.lag_mix(alpha, z, stride)?;
        Ok(if activate { g.sigmoid(mixed) } else { mixed })
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.in_channels {
            return Err(dim_err(format!(
                "{}: expected (L, N, {}), got {s:?}",
                self.prefix, self.in_channels
            )));
        }
        Ok(())
    }
}

/// Evaluates the attention weights of one window.
pub fn attention_coeffs(window: &GranularityWindow, params: &AttentionParams, store: &ParameterStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(window.data.clone());
    let a = params.coeffs(&mut g, store, x, window.lag_stride, DEFAULT_SLOPE)?;
    Ok(g.value(a).clone())
}

/// Evaluates the multi-head output of one window.
pub fn temporal_ma(window: &GranularityWindow, params: &AttentionParams, store: &ParameterStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(window.data.clone());
    let y = params.forward(&mut g, store, x, window.lag_stride, DEFAULT_SLOPE, true)?;
    Ok(g.value(y).clone())
}

/// Learned map from a stream's `len` positions onto `t_align` positions.
/// Each aligned position is a convex combination (row softmax of the
/// stored logits) of the stream's positions, so time-constant streams stay
/// time-constant.
pub fn align_name(prefix: &str, g: Granularity) -> String {
    format!("{prefix}.align.{}", g.tag())
}

pub fn init_align<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: String,
    t_align: usize,
    len: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert_glorot(name, &[t_align, len], len, t_align, rng)
}

/// (L, N, C) → (T_align, N, C) via softmax rows of a (T_align, L) logit
/// matrix.
pub fn align_time(g: &mut Graph, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(dim_err(format!("align expects (L, N, C), got {s:?}")));
    }
    let logits = g.param(store, name)?;
    let a = g.softmax(logits, 1)?;
    let t_align = g.shape(a)[0];
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let y = g.matmul(a, flat)?;
    g.reshape(y, &[t_align, s[1], s[2]])
}

/// FC over the channel-concatenation of a fixed number of streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub prefix: String,
    pub streams: usize,
    pub stream_channels: usize,
    pub out_channels: usize,
}

impl FusionParams {
    pub fn new(prefix: impl Into<String>, streams: usize, stream_channels: usize, out_channels: usize) -> Result<Self> {
        if streams == 0 || stream_channels == 0 || out_channels == 0 {
            return Err(Error::Validation("fusion widths must be positive".into()));
        }
        Ok(FusionParams {
            prefix: prefix.into(),
            streams,
            stream_channels,
            out_channels,
        })
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn in_channels(&self) -> usize {
        self.streams * self.stream_channels
    }

    pub fn num_scalars(&self) -> usize {
        (self.in_channels() + 1) * self.out_channels
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let (i, o) = (self.in_channels(), self.out_channels);
        store.insert_glorot(self.weight(), &[i, o], i, o, rng)?;
        store.insert(self.bias(), Tensor::zeros(&[o]))
    }

    /// Pre-activation fusion output. `None` streams are zero-padded; every
    /// present stream must already be (T_align, N, stream_channels).
    pub fn linear(&self, g: &mut Graph, store: &ParameterStore, streams: &[Option<Var>]) -> Result<Var> {
        if streams.len() != self.streams {
            return Err(dim_err(format!(
                "{}: expected {} streams, got {}",
                self.prefix,
                self.streams,
                streams.len()
            )));
        }
        let first = streams
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::Validation("fusion needs at least one stream".into()))?;
        let shape = g.shape(*first).to_vec();
        if shape.len() != 3 || shape[2] != self.stream_channels {
            return Err(dim_err(format!(
                "{}: stream shape {shape:?} does not carry {} channels",
                self.prefix, self.stream_channels
            )));
        }
        let mut parts = Vec::with_capacity(streams.len());
        for s in streams {
            let v = match s {
                Some(v) => {
                    if g.shape(*v) != shape.as_slice() {
                        return Err(dim_err(format!(
                            "{}: stream shapes differ ({:?} vs {shape:?})",
                            self.prefix,
                            g.shape(*v)
                        )));
                    }
                    *v
                }
                None => g.constant(Tensor::zeros(&shape)),
            };
            parts.push(v);
        }
        let cat = g.concat(&parts, 2)?;
        let w = g.param(store, &self.weight())?;
        let b = g.param(store, &self.bias())?;
        g.linear(cat, w, b)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, streams: &[Option<Var>], slope: f64) -> Result<Var> {
        let pre = self.linear(g, store, streams)?;
        Ok(g.leaky_relu(pre, slope))
    }
}

/// Dilations capped so every stream has at least one non-trivial lag.
pub fn dilations_for(len: usize) -> [usize; 4] {
    DILATIONS.map(|s| s.min(len.saturating_sub(1)).max(1))
}
