//! Central finite-difference check of tape gradients.

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    /// Entries sorted from worst to best.
    pub fn worst(&self, n: usize) -> Vec<&ParamCheck> {
        let mut v: Vec<&ParamCheck> = self.entries.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v.truncate(n);
        v
    }
}

/// Finite-difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`, second-order accurate.
    #[default]
    Central,
    /// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`, fourth-order
    /// accurate; allows a larger `h` and so less round-off on small
    /// gradients, but samples twice as far from θ.
    FivePoint,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients against `(f(θ+h) − f(θ−h)) / 2h` for every
/// element of every parameter in `store`.
///
/// `forward` must build the loss on the supplied graph using only `store`
/// and must be deterministic. Failures are reported, never returned as
/// errors; `Err` is reserved for the forward itself failing.
pub fn grad_check<F>(forward: F, store: &ParameterStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    grad_check_on(Graph::new, forward, store, &[h], Stencil::Central, tol)
}

/// As [`grad_check`], trying every step in `steps` for each element and
/// keeping the best agreement. A wrong backward rule disagrees at every
/// step; round-off only spoils small steps and activation kinks only
/// large ones.
pub fn grad_check_steps<F>(forward: F, store: &ParameterStore, steps: &[f64], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    grad_check_on(Graph::new, forward, store, steps, Stencil::Central, tol)
}

/// As [`grad_check_steps`], with a custom graph constructor for the
/// analytic pass (used to inject faulty backward rules) and a choice of
/// stencil.
pub fn grad_check_on<G, F>(
    make_graph: G,
    forward: F,
    store: &ParameterStore,
    steps: &[f64],
    stencil: Stencil,
    tol: f64,
) -> Result<GradCheckReport>
where
    G: Fn() -> Graph,
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = make_graph();
    let loss = forward(&mut g, store)?;
    let grads = g.backward(loss)?;

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = forward(&mut g, s)?;
        Ok(g.value(l).data()[0])
    };

    let mut probe = store.clone();
    let mut entries = Vec::new();
    for name in store.names() {
        let n = store.get(name).map_or(0, |t| t.len());
        let analytic = grads.get(name);
        let mut worst = (0.0, 0);
        for i in 0..n {
            let orig = store.get(name).unwrap().data()[i];
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            let mut err = f64::INFINITY;
            for &h in steps {
                let mut diff = |d: f64| -> Result<f64> {
                    probe.get_mut(name).unwrap().data_mut()[i] = orig + d;
                    let up = eval(&probe)?;
                    probe.get_mut(name).unwrap().data_mut()[i] = orig - d;
                    let down = eval(&probe)?;
                    probe.get_mut(name).unwrap().data_mut()[i] = orig;
                    Ok(up - down)
                };
                let numeric = match stencil {
                    Stencil::Central => diff(h)? / (2.0 * h),
                    Stencil::FivePoint => (8.0 * diff(h)? - diff(2.0 * h)?) / (12.0 * h),
                };
                let e = relative_error(a, numeric);
                if e.is_nan() || e < err {
                    err = e;
                }
                if err <= tol {
                    break;
                }
            }
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        entries.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 <= tol,
        });
    }
    Ok(GradCheckReport {
        tolerance: tol,
        entries,
    })
}
