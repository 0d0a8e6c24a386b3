//! Randomized finite-difference checks for every tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check_on, Stencil};
use super::graph::{Fault, Graph, Var};
use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Steps of the five-point stencil, tried in order per element. Central
/// differences at 1e-6 lose several digits to round-off on gradients near
/// 1e-6; the smaller steps cover inputs with short length scales, such as
/// layer norm over a nearly constant row.
pub const PRIMITIVE_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
/// Inputs closer than this to a ReLU-type kink are redrawn; wider than the
/// stencil's reach of twice the largest step times the largest input.
pub const KINK_MARGIN: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub primitive: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Builder = fn(&mut Graph, &ParameterStore) -> Result<Var>;

struct Case {
    name: &'static str,
    /// (parameter name, shape, kind of input)
    inputs: &'static [(&'static str, &'static [usize], Input)],
    /// Shape of the fixed random projection applied to the output.
    out_shape: &'static [usize],
    build: Builder,
    /// Checks whether a draw keeps every kink input at least
    /// [`KINK_MARGIN`] away from zero.
    away_from_kinks: Option<fn(&ParameterStore) -> bool>,
}

#[derive(Clone, Copy)]
enum Input {
    Uniform,
    Positive,
}

fn p(g: &mut Graph, s: &ParameterStore, name: &str) -> Result<Var> {
    g.param(s, name)
}

fn all_clear(t: &Tensor) -> bool {
    t.data().iter().all(|v| v.abs() > KINK_MARGIN)
}

fn fc_clear(s: &ParameterStore) -> bool {
    let x = s.get("x").unwrap();
    let w = s.get("w").unwrap();
    let b = s.get("b").unwrap();
    let mut pre = x.matmul(w).unwrap();
    let c = b.len();
    for row in pre.data_mut().chunks_mut(c) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    all_clear(&pre)
}

fn lag_scores_clear(s: &ParameterStore) -> bool {
    let x = s.get("x").unwrap();
    let w = s.get("w").unwrap().data();
    let b = s.get("b").unwrap().data()[0];
    let (l, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let proj = |t: usize, node: usize, off: usize| -> f64 {
        (0..c).map(|k| w[off + k] * x.get(&[t, node, k])).sum()
    };
    for t in 0..l {
        for i in 0..=(t / 2) {
            for node in 0..n {
                let pre = proj(t, node, 0) + proj(t - 2 * i, node, c) + b;
                if pre.abs() <= KINK_MARGIN {
                    return false;
                }
            }
        }
    }
    true
}

fn cases() -> Vec<Case> {
    use Input::*;
    vec![
        Case {
            name: "add",
            inputs: &[("a", &[2, 3], Uniform), ("b", &[2, 3], Uniform)],
            out_shape: &[2, 3],
            build: |g, s| {
                let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
                g.add(a, b)
            },
            away_from_kinks: None,
        },
        Case {
            name: "sub",
            inputs: &[("a", &[3], Uniform), ("b", &[3], Uniform)],
            out_shape: &[3],
            build: |g, s| {
                let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
                g.sub(a, b)
            },
            away_from_kinks: None,
        },
        Case {
            name: "mul",
            inputs: &[("a", &[2, 2], Uniform), ("b", &[2, 2], Uniform)],
            out_shape: &[2, 2],
            build: |g, s| {
                let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
                g.mul(a, b)
            },
            away_from_kinks: None,
        },
        Case {
            name: "scale",
            inputs: &[("a", &[4], Uniform)],
            out_shape: &[4],
            build: |g, s| {
                let a = p(g, s, "a")?;
                Ok(g.scale(a, -1.7))
            },
            away_from_kinks: None,
        },
        Case {
            name: "add_bias",
            inputs: &[("x", &[3, 2], Uniform), ("b", &[2], Uniform)],
            out_shape: &[3, 2],
            build: |g, s| {
                let (x, b) = (p(g, s, "x")?, p(g, s, "b")?);
                g.add_bias(x, b)
            },
            away_from_kinks: None,
        },
        Case {
            name: "matmul",
            inputs: &[("a", &[2, 3], Uniform), ("b", &[3, 2], Uniform)],
            out_shape: &[2, 2],
            build: |g, s| {
                let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
                g.matmul(a, b)
            },
            away_from_kinks: None,
        },
        Case {
            name: "matmul_batched",
            inputs: &[("a", &[2, 2, 3], Uniform), ("b", &[2, 3, 2], Uniform)],
            out_shape: &[2, 2, 2],
            build: |g, s| {
                let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
                g.matmul(a, b)
            },
            away_from_kinks: None,
        },
        Case {
            name: "reshape",
            inputs: &[("a", &[2, 3], Uniform)],
            out_shape: &[3, 2],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.reshape(a, &[3, 2])
            },
            away_from_kinks: None,
        },
        Case {
            name: "swap01",
            inputs: &[("a", &[2, 3, 2], Uniform)],
            out_shape: &[3, 2, 2],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.swap01(a)
            },
            away_from_kinks: None,
        },
        Case {
            name: "transpose",
            inputs: &[("a", &[2, 3], Uniform)],
            out_shape: &[3, 2],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.transpose(a)
            },
            away_from_kinks: None,
        },
        Case {
            name: "concat",
            inputs: &[("a", &[2, 2], Uniform), ("b", &[2, 1], Uniform)],
            out_shape: &[2, 3],
            build: |g, s| {
                let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
                g.concat(&[a, b], 1)
            },
            away_from_kinks: None,
        },
        Case {
            name: "narrow",
            inputs: &[("a", &[3, 4], Uniform)],
            out_shape: &[3, 2],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.narrow(a, 1, 1, 2)
            },
            away_from_kinks: None,
        },
        Case {
            name: "sum",
            inputs: &[("a", &[5], Uniform)],
            out_shape: &[1],
            build: |g, s| {
                let a = p(g, s, "a")?;
                Ok(g.sum(a))
            },
            away_from_kinks: None,
        },
        Case {
            name: "mean",
            inputs: &[("a", &[5], Uniform)],
            out_shape: &[1],
            build: |g, s| {
                let a = p(g, s, "a")?;
                Ok(g.mean(a))
            },
            away_from_kinks: None,
        },
        Case {
            name: "square",
            inputs: &[("a", &[4], Uniform)],
            out_shape: &[4],
            build: |g, s| {
                let a = p(g, s, "a")?;
                Ok(g.square(a))
            },
            away_from_kinks: None,
        },
        Case {
            name: "sqrt",
            inputs: &[("a", &[4], Positive)],
            out_shape: &[4],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.sqrt(a)
            },
            away_from_kinks: None,
        },
        Case {
            name: "relu",
            inputs: &[("a", &[6], Uniform)],
            out_shape: &[6],
            build: |g, s| {
                let a = p(g, s, "a")?;
                Ok(g.relu(a))
            },
            away_from_kinks: Some(|s| all_clear(s.get("a").unwrap())),
        },
        Case {
            name: "leaky_relu",
            inputs: &[("a", &[6], Uniform)],
            out_shape: &[6],
            build: |g, s| {
                let a = p(g, s, "a")?;
                Ok(g.leaky_relu(a, 0.2))
            },
            away_from_kinks: Some(|s| all_clear(s.get("a").unwrap())),
        },
        Case {
            name: "sigmoid",
            inputs: &[("a", &[6], Uniform)],
            out_shape: &[6],
            build: |g, s| {
                let a = p(g, s, "a")?;
                Ok(g.sigmoid(a))
            },
            away_from_kinks: None,
        },
        Case {
            name: "softmax",
            inputs: &[("a", &[2, 4], Uniform)],
            out_shape: &[2, 4],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.softmax(a, 1)
            },
            away_from_kinks: None,
        },
        Case {
            name: "softmax_axis0",
            inputs: &[("a", &[3, 2], Uniform)],
            out_shape: &[3, 2],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.softmax(a, 0)
            },
            away_from_kinks: None,
        },
        Case {
            name: "lag_softmax",
            inputs: &[("a", &[4, 4], Uniform)],
            out_shape: &[4, 4],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.lag_softmax(a, 1)
            },
            away_from_kinks: None,
        },
        Case {
            name: "layer_norm",
            inputs: &[("x", &[2, 4], Uniform), ("gain", &[4], Uniform), ("bias", &[4], Uniform)],
            out_shape: &[2, 4],
            build: |g, s| {
                let (x, gain, bias) = (p(g, s, "x")?, p(g, s, "gain")?, p(g, s, "bias")?);
                g.layer_norm(x, gain, bias, 1e-5)
            },
            away_from_kinks: None,
        },
        Case {
            name: "lag_scores",
            inputs: &[("x", &[4, 2, 2], Uniform), ("w", &[4, 1], Uniform), ("b", &[1], Uniform)],
            out_shape: &[4, 4],
            build: |g, s| {
                let (x, w, b) = (p(g, s, "x")?, p(g, s, "w")?, p(g, s, "b")?);
                g.lag_scores(x, w, b, 2, 0.2, false)
            },
            away_from_kinks: Some(lag_scores_clear),
        },
        Case {
            name: "lag_scores_per_node",
            inputs: &[("x", &[4, 2, 2], Uniform), ("w", &[4, 1], Uniform), ("b", &[1], Uniform)],
            out_shape: &[2, 4, 4],
            build: |g, s| {
                let (x, w, b) = (p(g, s, "x")?, p(g, s, "w")?, p(g, s, "b")?);
                g.lag_scores(x, w, b, 2, 0.2, true)
            },
            away_from_kinks: Some(lag_scores_clear),
        },
        Case {
            name: "lag_softmax_stacked",
            inputs: &[("a", &[2, 4, 4], Uniform)],
            out_shape: &[2, 4, 4],
            build: |g, s| {
                let a = p(g, s, "a")?;
                g.lag_softmax(a, 2)
            },
            away_from_kinks: None,
        },
        Case {
            name: "lag_mix_per_node",
            inputs: &[("alpha", &[2, 4, 4], Uniform), ("z", &[4, 2, 3], Uniform)],
            out_shape: &[4, 2, 3],
            build: |g, s| {
                let (a, z) = (p(g, s, "alpha")?, p(g, s, "z")?);
                g.lag_mix(a, z, 2)
            },
            away_from_kinks: None,
        },
        Case {
            name: "lag_mix",
            inputs: &[("alpha", &[4, 4], Uniform), ("z", &[4, 2, 3], Uniform)],
            out_shape: &[4, 2, 3],
            build: |g, s| {
                let (a, z) = (p(g, s, "alpha")?, p(g, s, "z")?);
                g.lag_mix(a, z, 1)
            },
            away_from_kinks: None,
        },
        Case {
            name: "fully_connected",
            inputs: &[("x", &[3, 2], Uniform), ("w", &[2, 3], Uniform), ("b", &[3], Uniform)],
            out_shape: &[3, 3],
            build: |g, s| {
                let (x, w, b) = (p(g, s, "x")?, p(g, s, "w")?, p(g, s, "b")?);
                g.fully_connected(x, w, b, 0.2)
            },
            away_from_kinks: Some(fc_clear),
        },
    ]
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], kind: Input) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match kind {
            Input::Uniform => rng.gen_range(-2.0..=2.0),
            Input::Positive => rng.gen_range(0.5..=2.0),
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Runs every primitive through `trials` random draws in [−2, 2] and
/// reports the worst relative error per primitive. The loss is the output
/// contracted with a fixed random projection whose entries have magnitude in
/// [0.5, 1.5], so no output is weighted near zero.
pub fn primitive_suite(trials: usize, seed: u64, fault: Option<Fault>) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let store = loop {
                let mut s = ParameterStore::new();
                for (name, shape, kind) in case.inputs {
                    s.insert(*name, draw(&mut rng, shape, *kind))?;
                }
                match case.away_from_kinks {
                    Some(ok) if !ok(&s) => continue,
                    _ => break s,
                }
            };
            let n: usize = case.out_shape.iter().product();
            let proj: Vec<f64> = (0..n)
                .map(|_| {
                    let m = rng.gen_range(0.5..=1.5);
                    if rng.gen_bool(0.5) { m } else { -m }
                })
                .collect();
            let proj = Tensor::new(case.out_shape, proj)?;
            let build = case.build;
            let forward = |g: &mut Graph, s: &ParameterStore| -> Result<Var> {
                let y = build(g, s)?;
                let r = g.constant(proj.clone());
                let yr = g.mul(y, r)?;
                Ok(g.sum(yr))
            };
            let make = || match fault {
                Some(f) => Graph::with_fault(f),
                None => Graph::new(),
            };
            let report = grad_check_on(
                make,
                forward,
                &store,
                &PRIMITIVE_STEPS,
                Stencil::FivePoint,
                PRIMITIVE_TOLERANCE,
            )?;
            worst = worst.max(report.max_rel_error());
            if report.max_rel_error().is_nan() {
                worst = f64::NAN;
            }
        }
        out.push(PrimitiveCheck {
            primitive: case.name,
            trials,
            max_rel_error: worst,
            passed: worst <= PRIMITIVE_TOLERANCE,
        });
    }
    Ok(out)
}
