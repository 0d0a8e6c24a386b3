//! Speed series ingestion, cleaning, normalization, multi-granularity
//! windowing, chronological splitting and synthetic data generation.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graphspec::{build_adjacency, csv_err, write_distances, DEFAULT_EPSILON, DEFAULT_SIGMA2};

/// Time granularity of an input stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Granularity {
    /// Original sampling interval.
    Minute,
    Hour,
    Day,
    Week,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [Self::Minute, Self::Hour, Self::Day, Self::Week];

    pub fn tag(self) -> char {
        match self {
            Self::Minute => 'm',
            Self::Hour => 'h',
            Self::Day => 'd',
            Self::Week => 'w',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_tag(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.tag() == c)
    }
}

/// Subset of granularities fed to the model. Disabled streams are
/// zero-padded at fusion time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GranularityMask([bool; 4]);

impl GranularityMask {
    pub const FULL: GranularityMask = GranularityMask([true; 4]);

    pub fn new(enabled: &[Granularity]) -> Result<Self> {
        let mut m = [false; 4];
        for g in enabled {
            m[g.index()] = true;
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::Validation("granularity mask must not be empty".into()));
        }
        Ok(GranularityMask(m))
    }

    /// Ablation modes: a = {m}, b = {m,h}, c = {m,h,d}, d = {m,h,d,w}.
    pub fn for_mode(mode: char) -> Result<Self> {
        let n = match mode {
            'a' => 1,
            'b' => 2,
            'c' => 3,
            'd' => 4,
            _ => return Err(Error::Validation(format!("unknown ablation mode '{mode}'"))),
        };
        Self::new(&Granularity::ALL[..n])
    }

    pub fn contains(self, g: Granularity) -> bool {
        self.0[g.index()]
    }

    pub fn iter(self) -> impl Iterator<Item = Granularity> {
        Granularity::ALL.into_iter().filter(move |g| self.contains(*g))
    }

    pub fn union(self, other: GranularityMask) -> GranularityMask {
        let mut m = self.0;
        for (a, b) in m.iter_mut().zip(other.0) {
            *a |= b;
        }
        GranularityMask(m)
    }
}

impl fmt::Display for GranularityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<String> = self.iter().map(|g| g.tag().to_string()).collect();
        f.write_str(&tags.join(","))
    }
}

impl FromStr for GranularityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut gs = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let mut chars = part.chars();
            let g = match (chars.next(), chars.next()) {
                (Some(c), None) => Granularity::from_tag(c),
                _ => None,
            }
            .ok_or_else(|| Error::Validation(format!("unknown granularity '{part}'")))?;
            gs.push(g);
        }
        Self::new(&gs)
    }
}

/// Slices per hour, day and week for a sampling interval of `p` minutes.
pub fn granularity_strides(p_minutes: usize) -> Result<(usize, usize, usize)> {
    if p_minutes == 0 || 60 % p_minutes != 0 {
        return Err(Error::Validation(format!(
            "sampling interval {p_minutes} min does not divide an hour"
        )));
    }
    let s_h = 60 / p_minutes;
    let s_d = 24 * s_h;
    Ok((s_h, s_d, 7 * s_d))
}

/// How the periodic (h/d/w) streams are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WindowLayout {
    /// `t_♯` blocks of `H` consecutive slices, one block per period back;
    /// each block becomes one time position with `H` channels.
    #[default]
    Blocks,
    /// `t_♯ + 1` single slices `t0 − j·s_♯`, `j = t_♯..0`.
    Strided,
}

impl FromStr for WindowLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blocks" => Ok(Self::Blocks),
            "strided" => Ok(Self::Strided),
            _ => Err(Error::Validation(format!("unknown window layout '{s}'"))),
        }
    }
}

impl fmt::Display for WindowLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blocks => "blocks",
            Self::Strided => "strided",
        })
    }
}

/// Everything needed to cut one sample out of a series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSpec {
    pub p_minutes: usize,
    /// Length of the original-granularity window.
    pub q: usize,
    pub horizon: usize,
    /// Strides `[1, s_h, s_d, s_w]`.
    pub strides: [usize; 4],
    /// Period counts `[Q, t_h, t_d, t_w]`.
    pub counts: [usize; 4],
    pub mask: GranularityMask,
    pub layout: WindowLayout,
}

impl WindowSpec {
    /// Period counts derived as `t_♯ = Q / s_♯`, which requires `Q` to be a
    /// multiple of every enabled stride.
    pub fn from_q(p_minutes: usize, q: usize, horizon: usize, mask: GranularityMask) -> Result<Self> {
        let (s_h, s_d, s_w) = granularity_strides(p_minutes)?;
        let strides = [1, s_h, s_d, s_w];
        let mut counts = [q, 0, 0, 0];
        for g in mask.iter().filter(|g| *g != Granularity::Minute) {
            let s = strides[g.index()];
            if q % s != 0 || q < s {
                return Err(Error::Validation(format!(
                    "Q={q} is not a positive multiple of s_{}={s}",
                    g.tag()
                )));
            }
            counts[g.index()] = q / s;
        }
        Self::with_counts(p_minutes, q, horizon, [counts[1], counts[2], counts[3]], mask)
    }

    /// Explicit `(t_h, t_d, t_w)`; counts for disabled streams are ignored.
    pub fn with_counts(
        p_minutes: usize,
        q: usize,
        horizon: usize,
        periods: [usize; 3],
        mask: GranularityMask,
    ) -> Result<Self> {
        Self::build(p_minutes, q, horizon, periods, mask, WindowLayout::Blocks)
    }

    pub fn build(
        p_minutes: usize,
        q: usize,
        horizon: usize,
        periods: [usize; 3],
        mask: GranularityMask,
        layout: WindowLayout,
    ) -> Result<Self> {
        let (s_h, s_d, s_w) = granularity_strides(p_minutes)?;
        let spec = WindowSpec {
            p_minutes,
            q,
            horizon,
            strides: [1, s_h, s_d, s_w],
            counts: [q, periods[0], periods[1], periods[2]],
            mask,
            layout,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Switching to the strided layout always stays valid.
    pub fn with_layout(mut self, layout: WindowLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn with_mask(mut self, mask: GranularityMask) -> Result<Self> {
        self.mask = mask;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.q == 0 || self.horizon == 0 {
            return Err(Error::Validation("Q and H must be positive".into()));
        }
        for g in self.mask.iter().filter(|g| *g != Granularity::Minute) {
            let (s, t) = (self.strides[g.index()], self.counts[g.index()]);
            if t == 0 {
                return Err(Error::Validation(format!("t_{} must be positive", g.tag())));
            }
            if self.layout == WindowLayout::Blocks && self.horizon > s {
                return Err(Error::Validation(format!(
                    "H={} exceeds s_{}={s}: the newest block would reach past t0",
                    self.horizon,
                    g.tag()
                )));
            }
        }
        Ok(())
    }

    /// (positions, channels) of the stream tensor for `g`.
    pub fn stream_shape(&self, g: Granularity) -> (usize, usize) {
        match (g, self.layout) {
            (Granularity::Minute, _) => (self.q, 1),
            (_, WindowLayout::Blocks) => (self.counts[g.index()], self.horizon),
            (_, WindowLayout::Strided) => (self.counts[g.index()] + 1, 1),
        }
    }

    /// Slice indices feeding stream `g`, one inner list per time position
    /// (oldest first). `None` if some index would be negative.
    pub fn stream_indices(&self, g: Granularity, t0: usize) -> Option<Vec<Vec<usize>>> {
        let t0 = t0 as i64;
        let s = self.strides[g.index()] as i64;
        let t = self.counts[g.index()] as i64;
        let h = self.horizon as i64;
        let positions: Vec<Vec<i64>> = match (g, self.layout) {
            (Granularity::Minute, _) => (0..self.q as i64).map(|k| vec![t0 - self.q as i64 + 1 + k]).collect(),
            (_, WindowLayout::Blocks) => (1..=t)
                .rev()
                .map(|b| (1..=h).map(|o| t0 - b * s + o).collect())
                .collect(),
            (_, WindowLayout::Strided) => (0..=t).rev().map(|j| vec![t0 - j * s]).collect(),
        };
        positions
            .into_iter()
            .map(|p| p.into_iter().map(|i| usize::try_from(i).ok()).collect())
            .collect()
    }

    /// Oldest slice referenced by any enabled stream, if non-negative.
    pub fn earliest_input(&self, t0: usize) -> Option<usize> {
        let mut earliest = t0;
        for g in self.mask.iter() {
            let idx = self.stream_indices(g, t0)?;
            earliest = earliest.min(*idx.iter().flatten().min()?);
        }
        Some(earliest)
    }

    /// Smallest `t0` with full history for every enabled stream.
    pub fn min_t0(&self) -> usize {
        self.mask
            .iter()
            .map(|g| {
                let (s, t) = (self.strides[g.index()], self.counts[g.index()]);
                match (g, self.layout) {
                    (Granularity::Minute, _) => self.q - 1,
                    (_, WindowLayout::Blocks) => t * s - 1,
                    (_, WindowLayout::Strided) => t * s,
                }
            })
            .max()
            .unwrap_or(0)
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub t0: usize,
    /// Indexed by [`Granularity::index`]; `None` for disabled streams.
    /// Each tensor is (positions, N, channels).
    pub streams: [Option<Tensor>; 4],
    /// (H, N) values at `t0+1 ..= t0+H`.
    pub target: Tensor,
}

/// Cuts the sample ending at `t0` out of a (T, N) value matrix.
/// Fails with [`Error::InsufficientHistory`] when inputs would start before
/// slice 0 or the target would run past the end; callers iterating a
/// dataset treat that as "skip".
pub fn extract_windows(values: &Tensor, t0: usize, spec: &WindowSpec) -> Result<WindowedSample> {
    let (t_len, n) = (values.shape()[0], values.shape()[1]);
    if t0 + spec.horizon >= t_len {
        return Err(Error::InsufficientHistory {
            t0,
            reason: format!("target runs past the last slice {}", t_len - 1),
        });
    }
    let mut streams: [Option<Tensor>; 4] = Default::default();
    for g in spec.mask.iter() {
        let positions = spec.stream_indices(g, t0).ok_or_else(|| Error::InsufficientHistory {
            t0,
            reason: format!("stream '{}' reaches before slice 0", g.tag()),
        })?;
        let (len, ch) = spec.stream_shape(g);
        debug_assert_eq!(positions.len(), len);
        let mut data = Vec::with_capacity(len * n * ch);
        for slices in &positions {
            for node in 0..n {
                data.extend(slices.iter().map(|&i| values.data()[i * n + node]));
            }
        }
        streams[g.index()] = Some(Tensor::new(&[len, n, ch], data)?);
    }
    let target = values.narrow(0, t0 + 1, spec.horizon)?;
    Ok(WindowedSample { t0, streams, target })
}

/// Speed readings on a slice grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedSeries {
    /// Strictly increasing slice indices.
    pub timestamps: Vec<i64>,
    /// (T, N)
    pub values: Tensor,
    /// Row-major (T, N); `true` where the reading is missing.
    pub missing: Vec<bool>,
}

impl SpeedSeries {
    pub fn from_values(values: Tensor) -> Self {
        let t = values.shape()[0];
        SpeedSeries {
            timestamps: (0..t as i64).collect(),
            missing: vec![false; values.len()],
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn node_series(&self, node: usize) -> Vec<f64> {
        let n = self.n_nodes();
        (0..self.len()).map(|t| self.values.data()[t * n + node]).collect()
    }
}

fn parse_timestamp(raw: &str) -> Option<(bool, i64)> {
    if let Ok(v) = raw.parse::<i64>() {
        return Some((false, v));
    }
    use chrono::{DateTime, NaiveDateTime};
    let minutes = |secs: i64| secs.div_euclid(60);
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some((true, minutes(dt.timestamp())));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some((true, minutes(dt.and_utc().timestamp())));
        }
    }
    None
}

/// Reads `timestamp,node_0,…,node_{N-1}`. Timestamps are either all integer
/// slice indices or all ISO-8601; ISO times are mapped onto slice indices
/// using the smallest spacing present. Empty fields are missing readings;
/// lines starting with `#` are ignored.
pub fn load_speeds(path: &Path) -> Result<SpeedSeries> {
    let origin = path.display().to_string();
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.clone(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(&origin, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(&origin, e))?.clone();
    let n = headers.len().saturating_sub(1);
    let header_ok = headers.get(0).map(str::trim) == Some("timestamp")
        && n > 0
        && headers.iter().skip(1).enumerate().all(|(i, h)| h.trim() == format!("node_{i}"));
    if !header_ok {
        return Err(perr(1, "expected header timestamp,node_0,…,node_{N-1}".into()));
    }
    let mut stamps = Vec::new();
    let mut iso_flags = Vec::new();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&origin, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != n + 1 {
            return Err(perr(line, format!("expected {} fields, got {}", n + 1, rec.len())));
        }
        let (iso, ts) = parse_timestamp(rec[0].trim())
            .ok_or_else(|| perr(line, format!("unparseable timestamp '{}'", &rec[0])))?;
        iso_flags.push(iso);
        stamps.push((ts, line));
        for field in rec.iter().skip(1) {
            let f = field.trim();
            if f.is_empty() {
                values.push(0.0);
                missing.push(true);
            } else {
                let v: f64 = f.parse().map_err(|e| perr(line, format!("bad value '{f}': {e}")))?;
                if !v.is_finite() {
                    return Err(perr(line, format!("non-finite value '{f}'")));
                }
                values.push(v);
                missing.push(false);
            }
        }
    }
    if stamps.is_empty() {
        return Err(Error::Validation(format!("{origin}: no data rows")));
    }
    if iso_flags.iter().any(|&f| f != iso_flags[0]) {
        return Err(Error::Validation(format!("{origin}: mixed timestamp formats")));
    }
    for w in stamps.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::Validation(format!(
                "{origin}:{}: timestamps must be strictly increasing",
                w[1].1
            )));
        }
    }
    let mut timestamps: Vec<i64> = stamps.iter().map(|s| s.0).collect();
    if iso_flags[0] && timestamps.len() > 1 {
        let spacing = timestamps.windows(2).map(|w| w[1] - w[0]).min().unwrap();
        let first = timestamps[0];
        for (ts, line) in &stamps {
            if (ts - first) % spacing != 0 {
                return Err(Error::Validation(format!(
                    "{origin}:{line}: timestamp off the {spacing}-minute grid"
                )));
            }
        }
        timestamps = timestamps.iter().map(|t| (t - first) / spacing).collect();
    } else if iso_flags[0] {
        timestamps = vec![0];
    }
    let t = timestamps.len();
    Ok(SpeedSeries {
        timestamps,
        values: Tensor::new(&[t, n], values)?,
        missing,
    })
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

pub fn write_speeds(path: &Path, series: &SpeedSeries) -> Result<()> {
    let origin = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(&origin, e))?;
    let n = series.n_nodes();
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..n).map(|i| format!("node_{i}")));
    w.write_record(&header).map_err(|e| csv_err(&origin, e))?;
    for (t, ts) in series.timestamps.iter().enumerate() {
        let mut row = vec![ts.to_string()];
        for i in 0..n {
            let k = t * n + i;
            row.push(if series.missing[k] {
                String::new()
            } else {
                fmt_value(series.values.data()[k])
            });
        }
        w.write_record(&row).map_err(|e| csv_err(&origin, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Regularizes the time grid (inserting all-missing rows for skipped slice
/// indices) and fills every missing reading by linear interpolation between
/// the nearest present neighbours; leading and trailing gaps take the
/// nearest present value.
pub fn interpolate_missing(series: &SpeedSeries) -> Result<SpeedSeries> {
    let n = series.n_nodes();
    let first = series.timestamps[0];
    let last = *series.timestamps.last().unwrap();
    let t_len = (last - first + 1) as usize;
    let mut values = vec![0.0; t_len * n];
    let mut present = vec![false; t_len * n];
    for (row, &ts) in series.timestamps.iter().enumerate() {
        let t = (ts - first) as usize;
        for i in 0..n {
            let k = row * n + i;
            if !series.missing[k] {
                values[t * n + i] = series.values.data()[k];
                present[t * n + i] = true;
            }
        }
    }
    for i in 0..n {
        let anchors: Vec<usize> = (0..t_len).filter(|&t| present[t * n + i]).collect();
        let (Some(&lo), Some(&hi)) = (anchors.first(), anchors.last()) else {
            return Err(Error::Validation(format!("node {i} has no present readings")));
        };
        for t in 0..lo {
            values[t * n + i] = values[lo * n + i];
        }
        for t in hi + 1..t_len {
            values[t * n + i] = values[hi * n + i];
        }
        for w in anchors.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (va, vb) = (values[a * n + i], values[b * n + i]);
            for t in a + 1..b {
                let frac = (t - a) as f64 / (b - a) as f64;
                values[t * n + i] = va + (vb - va) * frac;
            }
        }
    }
    Ok(SpeedSeries {
        timestamps: (first..=last).collect(),
        values: Tensor::new(&[t_len, n], values)?,
        missing: vec![false; t_len * n],
    })
}

/// Per-node statistics from the training range.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Present only when standardizing. Zero deviations are stored as 1.
    pub std: Option<Vec<f64>>,
}

impl NormStats {
    pub fn from_rows(values: &Tensor, rows: Range<usize>, standardize: bool) -> Result<Self> {
        let n = values.shape()[1];
        let count = rows.len();
        if count == 0 || rows.end > values.shape()[0] {
            return Err(Error::Validation(format!(
                "invalid statistics range {rows:?} for {} slices",
                values.shape()[0]
            )));
        }
        let mut mean = vec![0.0; n];
        for t in rows.clone() {
            for (m, v) in mean.iter_mut().zip(&values.data()[t * n..(t + 1) * n]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let std = standardize.then(|| {
            let mut var = vec![0.0; n];
            for t in rows.clone() {
                for i in 0..n {
                    var[i] += (values.data()[t * n + i] - mean[i]).powi(2);
                }
            }
            var.into_iter()
                .map(|v| {
                    let s = (v / count as f64).sqrt();
                    if s > 1e-12 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect()
        });
        Ok(NormStats { mean, std })
    }

    pub fn scale(&self, node: usize) -> f64 {
        self.std.as_ref().map_or(1.0, |s| s[node])
    }

    /// Normalizes a (.., N) tensor whose last axis is nodes.
    pub fn apply(&self, t: &Tensor) -> Tensor {
        self.transform(t, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        self.transform(t, |v, m, s| v * s + m)
    }

    fn transform(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let n = self.mean.len();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = f(*v, self.mean[i], self.scale(i));
            }
        }
        out
    }
}

/// Subtracts the per-node mean (and divides by the per-node deviation when
/// `standardize` is set and `stats` carries one).
pub fn zero_mean(series: &SpeedSeries, stats: &NormStats, standardize: bool) -> SpeedSeries {
    let stats = if standardize {
        stats.clone()
    } else {
        NormStats {
            mean: stats.mean.clone(),
            std: None,
        }
    };
    SpeedSeries {
        timestamps: series.timestamps.clone(),
        values: stats.apply(&series.values),
        missing: series.missing.clone(),
    }
}

/// Contiguous chronological partition of `[0, T)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Validation(format!("unknown split '{s}'"))),
        }
    }
}

impl Splits {
    pub fn range(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.train.clone(),
            SplitKind::Val => self.val.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }

    /// Sample origins whose recent window `t0−Q+1 ..= t0+H` lies entirely
    /// inside the split and whose periodic history starts at or after
    /// slice 0. Longer-period history may reach into earlier splits, which
    /// are always in the past.
    pub fn eligible(&self, kind: SplitKind, spec: &WindowSpec) -> Vec<usize> {
        let r = self.range(kind);
        let lo = r.start.max(spec.min_t0()).max(r.start + spec.q - 1);
        if r.end < spec.horizon + 1 {
            return Vec::new();
        }
        let hi = r.end - spec.horizon; // exclusive bound on t0
        (lo..hi).collect()
    }
}

/// Splits `T` slices at `round(T·train)` and `round(T·(train+val))`.
pub fn chronological_split(total: usize, ratios: (f64, f64, f64)) -> Result<Splits> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let b1 = (total as f64 * a).round() as usize;
    let b2 = (total as f64 * (a + b)).round() as usize;
    if b1 == 0 || b2 <= b1 || b2 >= total {
        return Err(Error::Validation(format!("series of {total} slices is too short to split")));
    }
    Ok(Splits {
        train: 0..b1,
        val: b1..b2,
        test: b2..total,
    })
}

/// Like [`Splits::eligible`] for all three splits, failing if any is empty.
pub fn eligible_samples(splits: &Splits, spec: &WindowSpec) -> Result<[Vec<usize>; 3]> {
    let out = [
        splits.eligible(SplitKind::Train, spec),
        splits.eligible(SplitKind::Val, spec),
        splits.eligible(SplitKind::Test, spec),
    ];
    for (name, v) in ["train", "val", "test"].iter().zip(&out) {
        if v.is_empty() {
            return Err(Error::Validation(format!(
                "{name} split has no eligible windows (needs {} slices of history)",
                spec.min_t0() + 1
            )));
        }
    }
    Ok(out)
}

/// Parameters of the synthetic traffic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub days: usize,
    pub p_minutes: usize,
    pub seed: u64,
    /// Amplitude of the daily sinusoid.
    pub daily_amp: f64,
    /// Weekday/weekend square-wave amplitude.
    pub weekly_amp: f64,
    /// Depth of the weekday morning and evening rush-hour dips.
    pub rush_amp: f64,
    pub noise_std: f64,
    /// Weight of the neighbour average mixed into each node's noise.
    pub spatial_coupling: f64,
    pub base_speed: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 8,
            days: 21,
            p_minutes: 5,
            seed: 7,
            daily_amp: 10.0,
            weekly_amp: 4.0,
            rush_amp: 15.0,
            noise_std: 0.5,
            spatial_coupling: 0.5,
            base_speed: 60.0,
        }
    }
}

/// Per-node base speed plus daily sinusoid, weekday/weekend square wave,
/// weekday rush-hour dips around 08:00 and 17:30, and noise averaged with
/// graph neighbours. Returns the series and a distance
/// matrix for points scattered in a square.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(SpeedSeries, Tensor)> {
    if cfg.n_nodes == 0 || cfg.days == 0 {
        return Err(Error::Validation("synthetic data needs nodes > 0 and days > 0".into()));
    }
    let (_, s_d, _) = granularity_strides(cfg.p_minutes)?;
    let n = cfg.n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let side = (n as f64).sqrt() * 1.5;
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..side), rng.gen_range(0.0..side))).collect();
    let mut dist = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (pts[i], pts[j]);
            dist.set(&[i, j], ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
        }
    }
    let w = build_adjacency(&dist, DEFAULT_SIGMA2, DEFAULT_EPSILON)?;
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w.get(&[i, j])).sum()).collect();

    let base: Vec<f64> = (0..n).map(|_| cfg.base_speed + rng.gen_range(-5.0..5.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();

    let t_len = cfg.days * s_d;
    let mut values = Vec::with_capacity(t_len * n);
    let mut eps = vec![0.0; n];
    for t in 0..t_len {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(&mut rng);
        }
        let day = t / s_d;
        let frac = (t % s_d) as f64 / s_d as f64;
        let weekday = day % 7 < 5;
        let weekly = if weekday { -cfg.weekly_amp } else { cfg.weekly_amp };
        let hour = 24.0 * frac;
        let rush = if weekday {
            let dip = |centre: f64| (-0.5 * ((hour - centre) / 0.5).powi(2)).exp();
            -cfg.rush_amp * (dip(8.0) + dip(17.5))
        } else {
            0.0
        };
        for i in 0..n {
            let neigh = if deg[i] > 0.0 {
                (0..n).map(|j| w.get(&[i, j]) * eps[j]).sum::<f64>() / deg[i]
            } else {
                0.0
            };
            let noise = cfg.noise_std * (eps[i] + cfg.spatial_coupling * neigh) / (1.0 + cfg.spatial_coupling);
            let daily = cfg.daily_amp * (2.0 * std::f64::consts::PI * frac + phase[i]).sin();
            values.push(base[i] + daily + weekly + rush + noise);
        }
    }
    Ok((SpeedSeries::from_values(Tensor::new(&[t_len, n], values)?), dist))
}

/// Writes `speeds.csv`, `distances.csv` and `truth.json` into `dir`.
pub fn write_synth(dir: &Path, cfg: &SynthConfig) -> Result<()> {
    let (series, dist) = synth_generate(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_speeds(&dir.join("speeds.csv"), &series)?;
    write_distances(&dir.join("distances.csv"), &dist)?;
    let truth = serde_json::to_string_pretty(cfg).map_err(|e| Error::Numeric(e.to_string()))?;
    let path = dir.join("truth.json");
    fs::write(&path, truth + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("gacan-data-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn strides_examples() {
        assert_eq!(granularity_strides(5).unwrap(), (12, 288, 2016));
        assert_eq!(granularity_strides(60).unwrap(), (1, 24, 168));
        assert!(granularity_strides(7).is_err());
    }

    #[test]
    fn load_examples() {
        let d = tmpdir("load");
        let p = d.join("s.csv");
        fs::write(&p, "timestamp,node_0,node_1\n0,60,55\n1,,54\n2,61.5,53\n").unwrap();
        let s = load_speeds(&p).unwrap();
        assert_eq!((s.len(), s.n_nodes()), (3, 2));
        assert!(s.missing[2] && !s.missing[3]);
        fs::write(&p, "timestamp,node_0\n0,60\n0,61\n").unwrap();
        assert!(matches!(load_speeds(&p), Err(Error::Validation(_))));
        fs::write(&p, "timestamp,node_0\n0,60\n1,abc\n").unwrap();
        assert!(matches!(load_speeds(&p), Err(Error::Parse { line: 3, .. })));
        fs::write(&p, "time,node_0\n0,60\n").unwrap();
        assert!(matches!(load_speeds(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(
            &p,
            "timestamp,node_0\n2018-01-01T00:00:00,60\n2018-01-01T00:05:00,61\n2018-01-01T00:15:00,62\n",
        )
        .unwrap();
        let s = load_speeds(&p).unwrap();
        assert_eq!(s.timestamps, vec![0, 1, 3]);
        fs::remove_dir_all(d).unwrap();
    }

    #[test]
    fn speeds_roundtrip_through_csv() {
        let d = tmpdir("rt");
        let p = d.join("s.csv");
        let mut s = SpeedSeries::from_values(Tensor::new(&[3, 2], vec![1.5, 2.0, 3.25, 4.0, 5.0, 6.125]).unwrap());
        s.missing[3] = true;
        write_speeds(&p, &s).unwrap();
        let back = load_speeds(&p).unwrap();
        assert_eq!(back.missing, s.missing);
        assert_eq!(back.values.data()[0], 1.5);
        assert_eq!(back.values.data()[5], 6.125);
        fs::remove_dir_all(d).unwrap();
    }

    fn series(col: &[Option<f64>]) -> SpeedSeries {
        let v: Vec<f64> = col.iter().map(|c| c.unwrap_or(0.0)).collect();
        let mut s = SpeedSeries::from_values(Tensor::new(&[col.len(), 1], v).unwrap());
        s.missing = col.iter().map(Option::is_none).collect();
        s
    }

    #[test]
    fn interpolation_examples() {
        let s = interpolate_missing(&series(&[Some(4.0), None, Some(8.0)])).unwrap();
        assert_eq!(s.values.data(), &[4.0, 6.0, 8.0]);
        let s = interpolate_missing(&series(&[None, Some(5.0), Some(5.0)])).unwrap();
        assert_eq!(s.values.data(), &[5.0, 5.0, 5.0]);
        let full = series(&[Some(1.0), Some(2.0)]);
        assert_eq!(interpolate_missing(&full).unwrap(), full);
        assert!(matches!(interpolate_missing(&series(&[None, None])), Err(Error::Validation(_))));
    }

    #[test]
    fn interpolation_fills_timestamp_gaps() {
        let mut s = series(&[Some(0.0), Some(6.0)]);
        s.timestamps = vec![10, 13];
        let f = interpolate_missing(&s).unwrap();
        assert_eq!(f.timestamps, vec![10, 11, 12, 13]);
        assert_eq!(f.values.data(), &[0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_mean_examples() {
        let values = Tensor::new(&[4, 2], vec![60.0, 1.0, 60.0, 2.0, 60.0, 3.0, 60.0, 10.0]).unwrap();
        let s = SpeedSeries::from_values(values.clone());
        let stats = NormStats::from_rows(&values, 0..3, true).unwrap();
        let z = zero_mean(&s, &stats, false);
        assert!(z.node_series(0).iter().all(|&v| v == 0.0));
        let train_mean: f64 = z.node_series(1)[..3].iter().sum::<f64>() / 3.0;
        assert!(train_mean.abs() < 1e-10);
        let zs = zero_mean(&s, &stats, true);
        assert!(stats.invert(&zs.values).max_abs_diff(&values) < 1e-12);
    }

    #[test]
    fn window_examples() {
        // s=2, t=2, H=1, t0=10 -> hourly indices {7, 9}
        let spec = WindowSpec {
            p_minutes: 30,
            q: 4,
            horizon: 1,
            strides: [1, 2, 48, 336],
            counts: [4, 2, 0, 0],
            mask: "m,h".parse().unwrap(),
            layout: WindowLayout::Blocks,
        };
        let idx = spec.stream_indices(Granularity::Hour, 10).unwrap();
        assert_eq!(idx, vec![vec![7], vec![9]]);

        let spec = WindowSpec::with_counts(5, 12, 12, [3, 1, 1], GranularityMask::FULL).unwrap();
        let flat: Vec<usize> = spec.stream_indices(Granularity::Hour, 100).unwrap().concat();
        assert_eq!(flat, (100 - 36 + 1..=100).collect::<Vec<_>>());

        let values = Tensor::zeros(&[5000, 2]);
        assert!(matches!(
            extract_windows(&values, 100, &spec),
            Err(Error::InsufficientHistory { .. })
        ));
        let s = extract_windows(&values, 2100, &spec).unwrap();
        assert_eq!(s.streams[3].as_ref().unwrap().shape(), &[1, 2, 12]);
        assert_eq!(s.streams[0].as_ref().unwrap().shape(), &[12, 2, 1]);
        assert_eq!(s.target.shape(), &[12, 2]);
    }

    #[test]
    fn windows_carry_values_from_the_right_slices() {
        let t_len = 400;
        let values = Tensor::new(&[t_len, 2], (0..t_len * 2).map(|k| (k / 2) as f64 + 0.5 * (k % 2) as f64).collect()).unwrap();
        let spec = WindowSpec::with_counts(60, 3, 2, [2, 2, 1], "m,d,w".parse().unwrap()).unwrap();
        let s = extract_windows(&values, 200, &spec).unwrap();
        // daily blocks: t0 - 2*24 + 1 .. +2 and t0 - 24 + 1 .. +2
        let d = s.streams[2].as_ref().unwrap();
        assert_eq!(d.shape(), &[2, 2, 2]);
        assert_eq!(d.get(&[0, 0, 0]), 153.0);
        assert_eq!(d.get(&[1, 1, 1]), 178.5);
        assert_eq!(s.target.get(&[0, 0]), 201.0);
        let strided = spec.clone().with_layout(WindowLayout::Strided);
        let s = extract_windows(&values, 200, &strided).unwrap();
        let w = s.streams[3].as_ref().unwrap();
        assert_eq!(w.shape(), &[2, 2, 1]);
        assert_eq!(w.get(&[0, 0, 0]), 32.0);
        assert_eq!(w.get(&[1, 0, 0]), 200.0);
    }

    #[test]
    fn blocks_longer_than_period_rejected() {
        assert!(WindowSpec::with_counts(60, 3, 2, [2, 1, 1], GranularityMask::FULL).is_err());
        assert!(WindowSpec::with_counts(60, 3, 2, [2, 1, 1], "m".parse().unwrap()).is_ok());
    }

    #[test]
    fn from_q_requires_divisibility() {
        let spec = WindowSpec::from_q(5, 4032, 12, GranularityMask::FULL).unwrap();
        assert_eq!(spec.counts, [4032, 336, 14, 2]);
        assert!(WindowSpec::from_q(5, 100, 12, GranularityMask::FULL).is_err());
    }

    #[test]
    fn split_examples() {
        let s = chronological_split(1000, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((s.train.end, s.val.end), (700, 800));
        let spec = WindowSpec::with_counts(60, 6, 3, [1, 1, 1], "m".parse().unwrap()).unwrap();
        let [tr, va, te] = eligible_samples(&s, &spec).unwrap();
        // no window straddles slice 700
        assert!(tr.iter().all(|&t0| t0 + 3 < 700));
        assert!(va.iter().all(|&t0| t0 + 1 >= 700 + 6));
        assert_eq!(*tr.last().unwrap(), 696);
        assert_eq!(va[0], 705);
        let all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert!(chronological_split(1000, (0.7, 0.1, 0.3)).is_err());
        let tiny = chronological_split(30, (0.7, 0.1, 0.2)).unwrap();
        assert!(eligible_samples(&tiny, &spec).is_err());
    }

    #[test]
    fn split_has_no_cross_split_target_leakage() {
        let s = chronological_split(3000, (0.7, 0.1, 0.2)).unwrap();
        let spec = WindowSpec::with_counts(5, 12, 12, [2, 2, 1], "m,h,d".parse().unwrap()).unwrap();
        let sets = eligible_samples(&s, &spec).unwrap();
        let target = |t0: usize| (t0 + 1)..(t0 + 13);
        let recent = |t0: usize| (t0 - 11)..(t0 + 1);
        for (a, sa) in sets.iter().enumerate() {
            for (b, sb) in sets.iter().enumerate() {
                if a == b {
                    continue;
                }
                for &x in sa.iter().step_by(37) {
                    for &y in sb.iter().step_by(41) {
                        let (r, t) = (recent(x), target(y));
                        assert!(r.end <= t.start || t.end <= r.start);
                        // a later split's target never precedes an earlier split's inputs
                        if b > a {
                            assert!(spec.earliest_input(x).unwrap() < t.start);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn synth_examples() {
        let flat = SynthConfig {
            daily_amp: 0.0,
            weekly_amp: 0.0,
            rush_amp: 0.0,
            noise_std: 0.0,
            days: 2,
            ..Default::default()
        };
        let (s, d) = synth_generate(&flat).unwrap();
        assert_eq!(s.len(), 2 * 288);
        for i in 0..s.n_nodes() {
            let col = s.node_series(i);
            assert!(col.iter().all(|&v| v == col[0]));
        }
        assert_eq!(d.shape(), &[8, 8]);

        let cfg = SynthConfig {
            daily_amp: 10.0,
            noise_std: 0.5,
            weekly_amp: 0.0,
            rush_amp: 0.0,
            days: 4,
            ..Default::default()
        };
        let (a, _) = synth_generate(&cfg).unwrap();
        let (b, _) = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        let autocorr = |x: &[f64], lag: usize| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
            let cov: f64 = x.iter().zip(&x[lag..]).map(|(p, q)| (p - m) * (q - m)).sum();
            cov / var
        };
        let x = a.node_series(0);
        assert!(autocorr(&x, 288) > autocorr(&x, 144));
        assert!(synth_generate(&SynthConfig { days: 0, ..Default::default() }).is_err());
    }

    /// Recomputes every referenced index straight from the display formula.
    fn oracle_indices(spec: &WindowSpec, g: Granularity, t0: i64) -> Vec<i64> {
        let mut out = Vec::new();
        if g == Granularity::Minute {
            let mut k = t0 - spec.q as i64 + 1;
            while k <= t0 {
                out.push(k);
                k += 1;
            }
            return out;
        }
        let s = spec.strides[g.index()] as i64;
        let t = spec.counts[g.index()] as i64;
        let h = spec.horizon as i64;
        let mut b = t;
        while b >= 1 {
            for j in 1..=h {
                out.push(t0 - b * s + j);
            }
            b -= 1;
        }
        out
    }

    proptest! {
        #[test]
        fn windows_match_index_oracle(p_idx in 0usize..6, q_mult in 1usize..4, h in 1usize..13, extra in 0usize..500) {
            let p = [5usize, 10, 15, 20, 30, 60][p_idx];
            let (s_h, _, s_w) = granularity_strides(p).unwrap();
            let q = q_mult * s_w;
            let h = h.min(s_h);
            let spec = WindowSpec::from_q(p, q, h, GranularityMask::FULL).unwrap();
            let t0 = spec.min_t0() + extra;
            prop_assert!(spec.earliest_input(t0 - extra).is_some());
            prop_assert!(t0 == extra || spec.earliest_input(t0 - extra - 1).is_none());
            for g in Granularity::ALL {
                let got: Vec<i64> = spec.stream_indices(g, t0).unwrap().concat().iter().map(|&i| i as i64).collect();
                let want = oracle_indices(&spec, g, t0 as i64);
                prop_assert_eq!(&got, &want);
                prop_assert!(got.iter().all(|&i| i >= 0 && i <= t0 as i64));
            }
        }

        #[test]
        fn interpolation_preserves_present(values in proptest::collection::vec(proptest::option::weighted(0.7, -50.0f64..50.0), 1..40)) {
            prop_assume!(values.iter().any(Option::is_some));
            let s = interpolate_missing(&series(&values)).unwrap();
            for (v, orig) in s.values.data().iter().zip(&values) {
                if let Some(o) = orig {
                    prop_assert_eq!(v, o);
                }
            }
            prop_assert!(s.missing.iter().all(|m| !m));
        }
    }
}
