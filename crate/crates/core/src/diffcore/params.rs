use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "gacan-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
}

/// Named learnable tensors and their gradient slots, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Validation(format!("invalid parameter name '{name}'")));
        }
        if self.slots.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter '{name}'")));
        }
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(name, Slot { value, grad });
        Ok(())
    }

    /// Inserts a tensor drawn uniformly from ±sqrt(6 / (fan_in + fan_out)).
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    /// (value, gradient) pairs for optimizer updates.
    pub fn iter_mut_with_grad(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k.as_str(), &mut s.value, &s.grad))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad = Tensor::zeros(s.value.shape());
        }
    }

    /// Replaces every gradient slot: entries present in `grads` are copied,
    /// all others become zero.
    pub fn set_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (name, s) in &mut self.slots {
            match grads.get(name) {
                Some(g) if g.shape() == s.value.shape() => s.grad = g.clone(),
                Some(g) => {
                    return Err(Error::Dimension(format!(
                        "gradient for '{name}' has shape {:?}, parameter has {:?}",
                        g.shape(),
                        s.value.shape()
                    )))
                }
                None => s.grad = Tensor::zeros(s.value.shape()),
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slots.values().all(|s| s.value.is_finite())
    }

    pub fn to_checkpoint(&self, meta: Vec<(String, String)>) -> Checkpoint {
        Checkpoint {
            meta,
            tensors: self.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    pub fn from_tensors<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<Self> {
        let mut store = ParameterStore::new();
        for (k, v) in tensors {
            store.insert(k.clone(), v.clone())?;
        }
        Ok(store)
    }
}

/// Text checkpoint: a header line, `key=value` metadata lines, then one
/// `name shape_csv value_csv` line per tensor. Values use the shortest
/// representation that parses back to the identical `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k}={v}");
        }
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{name} {} {}", shape.join(","), values.join(","));
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == CHECKPOINT_HEADER => {}
            _ => return Err(perr(1, format!("expected header '{CHECKPOINT_HEADER}'"))),
        }
        let mut ck = Checkpoint::default();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            let first = fields.next().unwrap_or_default();
            match (fields.next(), fields.next(), fields.next()) {
                (None, None, None) => {
                    let (k, v) = first
                        .split_once('=')
                        .ok_or_else(|| perr(lineno, "expected key=value".into()))?;
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                (Some(shape), Some(values), None) => {
                    let shape = shape
                        .split(',')
                        .map(|s| s.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| perr(lineno, format!("bad shape: {e}")))?;
                    let values = values
                        .split(',')
                        .map(|s| s.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| perr(lineno, format!("bad value: {e}")))?;
                    let t = Tensor::new(&shape, values).map_err(|e| perr(lineno, e.to_string()))?;
                    if ck.tensors.insert(first.to_string(), t).is_some() {
                        return Err(perr(lineno, format!("duplicate tensor '{first}'")));
                    }
                }
                _ => return Err(perr(lineno, "expected 'name shape values'".into())),
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn set_grads_zeroes_missing() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.insert("b", Tensor::zeros(&[3])).unwrap();
        let mut g = Gradients::new();
        g.insert("a".into(), Tensor::ones(&[2]));
        s.set_grads(&g).unwrap();
        assert_eq!(s.grad("a").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(s.grad("b").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn checkpoint_meta_and_header() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(&[1, 2], vec![0.1, -3e-300]).unwrap()).unwrap();
        let ck = s.to_checkpoint(vec![("h".into(), "12".into())]);
        let text = ck.to_text();
        assert!(text.starts_with("gacan-checkpoint v1\nh=12\nw 1,2 "));
        let back = Checkpoint::parse(&text, "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_value("h"), Some("12"));
    }

    #[test]
    fn bad_header_is_a_parse_error() {
        let err = Checkpoint::parse("nope\n", "x.ckpt").unwrap_err();
        assert!(err.to_string().contains("x.ckpt:1"));
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_is_bit_exact(bits in proptest::collection::vec(any::<u64>(), 1..20)) {
            let values: Vec<f64> = bits
                .iter()
                .map(|&b| f64::from_bits(b))
                .filter(|v| v.is_finite())
                .collect();
            prop_assume!(!values.is_empty());
            let n = values.len();
            let mut s = ParameterStore::new();
            s.insert("p.x", Tensor::new(&[n], values.clone()).unwrap()).unwrap();
            let text = s.to_checkpoint(vec![]).to_text();
            let back = Checkpoint::parse(&text, "mem").unwrap();
            let got = back.tensors["p.x"].data();
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
