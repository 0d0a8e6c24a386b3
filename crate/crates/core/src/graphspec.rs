//! Sensor graph construction and spectral filtering.
//!
//! Adjacency comes from pairwise distances through a thresholded Gaussian
//! kernel. Filtering uses Chebyshev polynomials of the scaled normalized
//! Laplacian `L̃ = 2L/λ_max − I`, evaluated with the three-term recurrence so
//! no polynomial matrix is ever formed. [`spectral_oracle`] computes the same
//! filter through a full eigendecomposition and exists for testing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{dim_err, Error, Result};

pub const DEFAULT_SIGMA2: f64 = 10.0;
pub const DEFAULT_EPSILON: f64 = 0.5;
pub const DEFAULT_CHEB_ORDER: usize = 3;
pub const LAMBDA_TOL: f64 = 1e-8;
pub const LAMBDA_MAX_ITER: usize = 10_000;
const POWER_SEED: u64 = 0x6c61_6d62_6461;
const SYMMETRY_TOL: f64 = 1e-9;

/// Road network: node count, pairwise distances (`+∞` where unmeasured) and
/// the derived weighted adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    pub n_nodes: usize,
    pub distances: Tensor,
    pub adjacency: Tensor,
}

impl TrafficGraph {
    pub fn from_distances(distances: Tensor, sigma2: f64, eps_threshold: f64) -> Result<Self> {
        let adjacency = build_adjacency(&distances, sigma2, eps_threshold)?;
        Ok(TrafficGraph {
            n_nodes: distances.shape()[0],
            distances,
            adjacency,
        })
    }

    /// A graph with `n` nodes and no edges.
    pub fn edgeless(n: usize) -> Self {
        let mut d = Tensor::filled(&[n, n], f64::INFINITY);
        for i in 0..n {
            d.set(&[i, i], 0.0);
        }
        TrafficGraph {
            n_nodes: n,
            distances: d,
            adjacency: Tensor::zeros(&[n, n]),
        }
    }
}

/// Normalized Laplacian, its largest eigenvalue and the rescaled operator.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralOperator {
    pub laplacian: Tensor,
    pub lambda_max: f64,
    pub scaled_laplacian: Tensor,
}

impl SpectralOperator {
    pub fn from_adjacency(adjacency: &Tensor) -> Result<Self> {
        let laplacian = normalized_laplacian(adjacency)?;
        let lambda_max = largest_eigenvalue(&laplacian)?;
        let scaled_laplacian = scaled_laplacian(&laplacian, lambda_max)?;
        Ok(SpectralOperator {
            laplacian,
            lambda_max,
            scaled_laplacian,
        })
    }

    pub fn from_graph(graph: &TrafficGraph) -> Result<Self> {
        Self::from_adjacency(&graph.adjacency)
    }

    pub fn n_nodes(&self) -> usize {
        self.laplacian.shape()[0]
    }
}

fn square(t: &Tensor, what: &str) -> Result<usize> {
    match t.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(dim_err(format!("{what} must be square, got {s:?}"))),
    }
}

/// `W_ij = exp(−d_ij² / σ²)` when `i ≠ j` and the value is at least
/// `eps_threshold`, else 0.
pub fn build_adjacency(distances: &Tensor, sigma2: f64, eps_threshold: f64) -> Result<Tensor> {
    let n = square(distances, "distance matrix")?;
    if sigma2 <= 0.0 {
        return Err(Error::Validation(format!("sigma2 must be positive, got {sigma2}")));
    }
    if !(0.0..1.0).contains(&eps_threshold) {
        return Err(Error::Validation(format!(
            "threshold must lie in [0, 1), got {eps_threshold}"
        )));
    }
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let d = distances.get(&[i, j]);
            if d.is_nan() || d < 0.0 {
                return Err(Error::Validation(format!("distance ({i},{j}) = {d} is negative or NaN")));
            }
            let dt = distances.get(&[j, i]);
            let agree = d == dt || (d - dt).abs() <= SYMMETRY_TOL;
            if !agree {
                return Err(Error::Validation(format!(
                    "distances are asymmetric at ({i},{j}): {d} vs {dt}"
                )));
            }
            if i == j {
                if d != 0.0 {
                    return Err(Error::Validation(format!("nonzero self-distance at node {i}")));
                }
                continue;
            }
            let v = (-(d * d) / sigma2).exp();
            if v >= eps_threshold && v > 0.0 {
                w.set(&[i, j], v);
            }
        }
    }
    Ok(w)
}

/// `L = I − D^{-1/2} W D^{-1/2}`. Isolated nodes keep an identity row.
pub fn normalized_laplacian(adjacency: &Tensor) -> Result<Tensor> {
    let n = square(adjacency, "adjacency")?;
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| adjacency.get(&[i, j])).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = Tensor::eye(n);
    for i in 0..n {
        for j in 0..n {
            let w = adjacency.get(&[i, j]);
            if w != 0.0 {
                let v = l.get(&[i, j]) - inv_sqrt_deg[i] * w * inv_sqrt_deg[j];
                l.set(&[i, j], v);
            }
        }
    }
    Ok(l)
}

/// Largest eigenvalue of a symmetric matrix by power iteration on `L + 2I`.
///
/// The shift makes every eigenvalue of a normalized Laplacian positive so
/// the top one dominates in magnitude. Iteration stops once the residual
/// `‖Lv − θv‖` drops below `tol`, or once the residual is below `√tol` and
/// the geometric tail of the Rayleigh-quotient increments is below
/// `tol / 100`.
pub fn lambda_max(laplacian: &Tensor, tol: f64, max_iter: usize) -> Result<f64> {
    let n = square(laplacian, "laplacian")?;
    let shift = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalize(&mut v);
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let row = &laplacian.data()[i * n..(i + 1) * n];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    };
    let mut theta = 0.0;
    let mut steps = [f64::NAN; 2];
    for _ in 0..max_iter {
        let lv = apply(&v);
        let prev = theta;
        theta = dot(&v, &lv);
        let resid = lv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - theta * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if resid <= tol {
            return Ok(theta);
        }
        // Near-degenerate top pairs stall the residual long after the
        // Rayleigh quotient has settled; extrapolate its geometric tail.
        steps = [steps[1], theta - prev];
        let [d0, d1] = steps;
        if resid <= tol.sqrt() && d1 >= 0.0 && d1 <= d0 {
            let rho2 = if d0 > 0.0 { d1 / d0 } else { 0.0 };
            if d1 == 0.0 || d1 * rho2 / (1.0 - rho2) <= 1e-2 * tol {
                return Ok(theta);
            }
        }
        let mut next: Vec<f64> = lv.iter().zip(&v).map(|(a, b)| a + shift * b).collect();
        normalize(&mut next);
        v = next;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        last_estimate: theta,
    })
}

/// [`lambda_max`] with default settings, falling back to the dense
/// eigensolver when power iteration stalls on a near-degenerate top pair.
pub fn largest_eigenvalue(laplacian: &Tensor) -> Result<f64> {
    match lambda_max(laplacian, LAMBDA_TOL, LAMBDA_MAX_ITER) {
        Err(Error::Convergence { .. }) => {
            let ev = symmetric_eigenvalues(laplacian)?;
            Ok(ev.into_iter().fold(f64::NEG_INFINITY, f64::max))
        }
        other => other,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `2L/λ_max − I`
pub fn scaled_laplacian(laplacian: &Tensor, lambda_max: f64) -> Result<Tensor> {
    let n = square(laplacian, "laplacian")?;
    if !(lambda_max > 0.0) {
        return Err(Error::Contract(format!("lambda_max must be positive, got {lambda_max}")));
    }
    let mut out = laplacian.map(|v| 2.0 * v / lambda_max);
    for i in 0..n {
        let v = out.get(&[i, i]) - 1.0;
        out.set(&[i, i], v);
    }
    Ok(out)
}

/// Chebyshev graph convolution `Σ_k T_k(L̃) X θ_k` on the tape.
///
/// `x` is (N, C), or (T, N, C) to filter every time position independently
/// with shared coefficients; each `theta[k]` is (C, C').
pub fn cheb_conv(g: &mut Graph, scaled: Var, x: Var, theta: &[Var]) -> Result<Var> {
    if theta.is_empty() {
        return Err(Error::Contract("cheb_conv needs at least one coefficient".into()));
    }
    let n = square(g.value(scaled), "scaled laplacian")?;
    let xs = g.shape(x).to_vec();
    let (t_len, c) = match xs.as_slice() {
        [nn, c] if *nn == n => (None, *c),
        [t, nn, c] if *nn == n => (Some(*t), *c),
        s => return Err(dim_err(format!("cheb_conv input {s:?} does not have {n} nodes"))),
    };
    for &th in theta {
        let ts = g.shape(th);
        if ts.len() != 2 || ts[0] != c || ts[1] != g.shape(theta[0])[1] {
            return Err(dim_err(format!(
                "chebyshev coefficient {ts:?} incompatible with {c} input channels"
            )));
        }
    }
    // Node-major (N, T·C) layout lets L̃ act as one matrix product per order.
    let node_major = match t_len {
        None => x,
        Some(t) => {
            let sw = g.swap01(x)?;
            g.reshape(sw, &[n, t * c])?
        }
    };
    let back = |g: &mut Graph, z: Var| -> Result<Var> {
        match t_len {
            None => Ok(z),
            Some(t) => {
                let r = g.reshape(z, &[n, t, c])?;
                g.swap01(r)
            }
        }
    };
    let mut prev2 = node_major;
    let mut out = {
        let z = back(g, prev2)?;
        g.matmul_last(z, theta[0])?
    };
    if theta.len() == 1 {
        return Ok(out);
    }
    let mut prev1 = g.matmul(scaled, node_major)?;
    let z = back(g, prev1)?;
    let term = g.matmul_last(z, theta[1])?;
    out = g.add(out, term)?;
    for &th in &theta[2..] {
        let lz = g.matmul(scaled, prev1)?;
        let two_lz = g.scale(lz, 2.0);
        let next = g.sub(two_lz, prev2)?;
        let z = back(g, next)?;
        let term = g.matmul_last(z, th)?;
        out = g.add(out, term)?;
        prev2 = prev1;
        prev1 = next;
    }
    Ok(out)
}

/// Non-differentiable convenience wrapper around [`cheb_conv`].
pub fn cheb_conv_tensor(scaled: &Tensor, x: &Tensor, theta: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = g.constant(scaled.clone());
    let xv = g.constant(x.clone());
    let th: Vec<Var> = theta.iter().map(|t| g.constant(t.clone())).collect();
    let y = cheb_conv(&mut g, s, xv, &th)?;
    Ok(g.value(y).clone())
}

/// Chebyshev polynomial `T_k(x)` in closed form.
pub fn chebyshev_t(k: usize, x: f64) -> f64 {
    let k = k as f64;
    if x.abs() <= 1.0 {
        (k * x.acos()).cos()
    } else if x > 1.0 {
        (k * x.acosh()).cosh()
    } else {
        let sign = if (k as u64) % 2 == 0 { 1.0 } else { -1.0 };
        sign * (k * (-x).acosh()).cosh()
    }
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues (unsorted) and the row-major eigenvector matrix whose
/// column `i` pairs with eigenvalue `i`.
pub fn symmetric_eigen(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = square(m, "matrix")?;
    let mut a: Vec<f64> = m.data().to_vec();
    // Average out representation-level asymmetry before rotating.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let mut v = Tensor::eye(n).into_data();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            let vals = (0..n).map(|i| a[i * n + i]).collect();
            return Ok((vals, Tensor::new(&[n, n], v)?));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric("Jacobi eigensolver did not converge in 100 sweeps".into()))
}

/// Exact spectral filter through a full eigendecomposition of `L`:
/// `Σ_k U diag(T_k(λ̃)) Uᵀ X θ_k` with `λ̃ = 2λ/λ_max − 1`.
pub fn spectral_oracle(laplacian: &Tensor, x: &Tensor, theta: &[Tensor], lambda_max: f64) -> Result<Tensor> {
    let n = square(laplacian, "laplacian")?;
    if x.rank() != 2 || x.shape()[0] != n {
        return Err(dim_err(format!("oracle input {:?} does not have {n} rows", x.shape())));
    }
    if theta.is_empty() {
        return Err(Error::Contract("spectral_oracle needs at least one coefficient".into()));
    }
    let (eigenvalues, u) = symmetric_eigen(laplacian)?;
    let ut_x = u.transpose_last()?.matmul(x)?;
    let c = x.shape()[1];
    let c_out = theta[0].shape()[1];
    let mut y = Tensor::zeros(&[n, c_out]);
    for (k, th) in theta.iter().enumerate() {
        if th.shape() != [c, c_out] {
            return Err(dim_err(format!("coefficient {:?} is not [{c}, {c_out}]", th.shape())));
        }
        let mut filtered = ut_x.clone();
        for (i, &lam) in eigenvalues.iter().enumerate() {
            let gain = chebyshev_t(k, 2.0 * lam / lambda_max - 1.0);
            for v in &mut filtered.data_mut()[i * c..(i + 1) * c] {
                *v *= gain;
            }
        }
        y.add_assign(&u.matmul(&filtered)?.matmul(th)?);
    }
    Ok(y)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    let (mut v, _) = symmetric_eigen(m)?;
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Reads a `from,to,distance` CSV into a dense matrix. Unlisted pairs are
/// `+∞`; pairs listed in both directions must agree.
pub fn load_distances(path: &Path, n_nodes: Option<usize>) -> Result<Tensor> {
    let origin = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(&origin, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(&origin, e))?.clone();
    let expected = ["from", "to", "distance"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Parse {
            path: origin,
            line: 1,
            message: format!("expected header from,to,distance, got {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&origin, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let perr = |m: String| Error::Parse {
            path: origin.clone(),
            line,
            message: m,
        };
        if rec.len() != 3 {
            return Err(perr(format!("expected 3 fields, got {}", rec.len())));
        }
        let from: usize = rec[0].trim().parse().map_err(|e| perr(format!("bad node id: {e}")))?;
        let to: usize = rec[1].trim().parse().map_err(|e| perr(format!("bad node id: {e}")))?;
        let d: f64 = rec[2].trim().parse().map_err(|e| perr(format!("bad distance: {e}")))?;
        entries.push((from, to, d, line));
    }
    let n = n_nodes.unwrap_or_else(|| entries.iter().map(|e| e.0.max(e.1) + 1).max().unwrap_or(0));
    if n == 0 {
        return Err(Error::Validation(format!("{origin}: no nodes")));
    }
    let mut m = Tensor::filled(&[n, n], f64::INFINITY);
    let mut seen = vec![false; n * n];
    for i in 0..n {
        m.set(&[i, i], 0.0);
    }
    for (from, to, d, line) in entries {
        if from >= n || to >= n {
            return Err(Error::Validation(format!("{origin}:{line}: node id out of range for {n} nodes")));
        }
        if d.is_nan() || d < 0.0 {
            return Err(Error::Validation(format!("{origin}:{line}: negative distance {d}")));
        }
        if from == to {
            if d != 0.0 {
                return Err(Error::Validation(format!("{origin}:{line}: nonzero self-distance")));
            }
            continue;
        }
        for (a, b) in [(from, to), (to, from)] {
            if seen[a * n + b] && (m.get(&[a, b]) - d).abs() > SYMMETRY_TOL {
                return Err(Error::Validation(format!(
                    "{origin}:{line}: distance {from}->{to} = {d} conflicts with {}",
                    m.get(&[a, b])
                )));
            }
            seen[a * n + b] = true;
            m.set(&[a, b], d);
        }
    }
    Ok(m)
}

/// Writes every finite off-diagonal pair with `from < to`.
pub fn write_distances(path: &Path, distances: &Tensor) -> Result<()> {
    let n = square(distances, "distance matrix")?;
    let origin = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(&origin, e))?;
    w.write_record(["from", "to", "distance"]).map_err(|e| csv_err(&origin, e))?;
    for i in 0..n {
        for j in i + 1..n {
            let d = distances.get(&[i, j]);
            if d.is_finite() {
                w.write_record([i.to_string(), j.to_string(), format!("{d:?}")])
                    .map_err(|e| csv_err(&origin, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn csv_err(origin: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(origin, io),
        kind => Error::Parse {
            path: origin.to_string(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Random symmetric distances with some unmeasured pairs.
    pub(crate) fn random_distances(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let mut d = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                let v = if rng.gen_bool(0.15) {
                    f64::INFINITY
                } else {
                    rng.gen_range(0.0..4.0)
                };
                d.set(&[i, j], v);
                d.set(&[j, i], v);
            }
        }
        d
    }

    #[test]
    fn adjacency_examples() {
        let d = m(&[&[0.0, 0.0, 2.0, 5.0], &[0.0, 0.0, 1.0, 1.0], &[2.0, 1.0, 0.0, 1.0], &[5.0, 1.0, 1.0, 0.0]]);
        let w = build_adjacency(&d, 10.0, 0.5).unwrap();
        assert_eq!(w.get(&[0, 1]), 1.0);
        assert!((w.get(&[0, 2]) - (-0.4f64).exp()).abs() < 1e-15);
        assert!((w.get(&[0, 2]) - 0.6703).abs() < 1e-4);
        assert_eq!(w.get(&[0, 3]), 0.0);
        assert_eq!(w.get(&[2, 2]), 0.0);
    }

    #[test]
    fn adjacency_rejects_bad_distances() {
        let asym = m(&[&[0.0, 1.0], &[2.0, 0.0]]);
        assert!(matches!(build_adjacency(&asym, 10.0, 0.5), Err(Error::Validation(_))));
        let neg = m(&[&[0.0, -1.0], &[-1.0, 0.0]]);
        assert!(matches!(build_adjacency(&neg, 10.0, 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn laplacian_examples() {
        let l = normalized_laplacian(&m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(l, m(&[&[1.0, -1.0], &[-1.0, 1.0]]));
        assert_eq!(normalized_laplacian(&Tensor::zeros(&[3, 3])).unwrap(), Tensor::eye(3));
    }

    #[test]
    fn lambda_max_examples() {
        let l = m(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        assert!((lambda_max(&l, 1e-10, 10_000).unwrap() - 2.0).abs() < 1e-9);
        assert!((lambda_max(&Tensor::eye(4), 1e-10, 10).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_max_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_distances(&mut rng, 8);
        let l = normalized_laplacian(&build_adjacency(&d, 10.0, 0.5).unwrap()).unwrap();
        match lambda_max(&l, 1e-14, 1) {
            Err(Error::Convergence { iterations: 1, last_estimate }) => assert!(last_estimate.is_finite()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scaled_laplacian_examples() {
        let l = m(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        assert_eq!(scaled_laplacian(&l, 2.0).unwrap(), m(&[&[0.0, -1.0], &[-1.0, 0.0]]));
        assert_eq!(scaled_laplacian(&Tensor::eye(3), 1.0).unwrap(), Tensor::eye(3));
        assert!(scaled_laplacian(&l, 0.0).is_err());
    }

    #[test]
    fn cheb_conv_examples() {
        let x = m(&[&[1.0], &[0.0]]);
        let lt = m(&[&[0.0, -1.0], &[-1.0, 0.0]]);
        let y = cheb_conv_tensor(&lt, &x, &[Tensor::eye(1)]).unwrap();
        assert_eq!(y, x);
        let y = cheb_conv_tensor(&lt, &x, &[Tensor::eye(1), Tensor::eye(1)]).unwrap();
        assert_eq!(y, m(&[&[1.0], &[-1.0]]));
    }

    #[test]
    fn oracle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = normalized_laplacian(&build_adjacency(&random_distances(&mut rng, 6), 10.0, 0.5).unwrap()).unwrap();
        let x = Tensor::new(&[6, 1], (0..6).map(|i| i as f64 - 2.5).collect()).unwrap();
        let th0 = Tensor::scalar(1.7).reshape(&[1, 1]).unwrap();
        let y = spectral_oracle(&l, &x, &[th0], 1.8).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| 1.7 * v)) < 1e-12);

        let th: Vec<Tensor> = [0.5, -0.25, 2.0].iter().map(|&v| Tensor::new(&[1, 1], vec![v]).unwrap()).collect();
        let y = spectral_oracle(&Tensor::eye(6), &x, &th, 1.0).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| 2.25 * v)) < 1e-12);
    }

    #[test]
    fn jacobi_recomposes_the_matrix() {
        let (l, _, _) = random_instance(10201467988272294822, 13);
        let (vals, u) = symmetric_eigen(&l).unwrap();
        let n = 13;
        let mut lam = Tensor::zeros(&[n, n]);
        for (i, v) in vals.iter().enumerate() {
            lam.set(&[i, i], *v);
        }
        let rec = u.matmul(&lam).unwrap().matmul(&u.transpose_last().unwrap()).unwrap();
        assert!(rec.max_abs_diff(&l) < 1e-13);
        let orth = u.transpose_last().unwrap().matmul(&u).unwrap();
        assert!(orth.max_abs_diff(&Tensor::eye(n)) < 1e-13);
    }

    #[test]
    fn chebyshev_closed_form_matches_recurrence() {
        for &x in &[-1.3, -1.0, -0.4, 0.0, 0.7, 1.0, 1.2] {
            let (mut a, mut b) = (1.0, x);
            assert!((chebyshev_t(0, x) - a).abs() < 1e-12);
            assert!((chebyshev_t(1, x) - b).abs() < 1e-12);
            for k in 2..7 {
                let c = 2.0 * x * b - a;
                assert!((chebyshev_t(k, x) - c).abs() < 1e-9, "k={k} x={x}");
                a = b;
                b = c;
            }
        }
    }

    #[test]
    fn distances_csv_roundtrip_and_conflicts() {
        let dir = std::env::temp_dir().join(format!("gacan-dist-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("d.csv");
        std::fs::write(&p, "from,to,distance\n0,1,2.5\n1,0,2.5\n1,2,1.0\n").unwrap();
        let d = load_distances(&p, None).unwrap();
        assert_eq!(d.shape(), &[3, 3]);
        assert_eq!(d.get(&[2, 1]), 1.0);
        assert!(d.get(&[0, 2]).is_infinite());
        let q = dir.join("e.csv");
        write_distances(&q, &d).unwrap();
        assert_eq!(load_distances(&q, Some(3)).unwrap(), d);

        std::fs::write(&p, "from,to,distance\n0,1,2.5\n1,0,2.6\n").unwrap();
        assert!(matches!(load_distances(&p, None), Err(Error::Validation(_))));
        std::fs::write(&p, "from,to,distance\n0,x,2.5\n").unwrap();
        assert!(matches!(load_distances(&p, None), Err(Error::Parse { line: 2, .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn random_instance(seed: u64, n: usize) -> (Tensor, f64, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = build_adjacency(&random_distances(&mut rng, n), 10.0, 0.5).unwrap();
        let l = normalized_laplacian(&w).unwrap();
        let lm = largest_eigenvalue(&l).unwrap();
        (l, lm, w)
    }

    #[test]
    fn lambda_max_matches_eigensolver() {
        for seed in 0..20 {
            let (l, lm, _) = random_instance(seed, 8);
            let top = *symmetric_eigenvalues(&l).unwrap().last().unwrap();
            assert!((lm - top).abs() <= 1e-6, "seed {seed}: {lm} vs {top}");
            assert!(lm > 0.0 && lm <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn cheb_conv_gradient_matches_finite_differences() {
        use crate::diffcore::{grad_check, ParameterStore};
        let (l, lm, _) = random_instance(3, 5);
        let lt = scaled_laplacian(&l, lm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::new(&[2, 5, 2], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        for k in 0..3 {
            s.insert_glorot(format!("theta{k}"), &[2, 3], 2, 3, &mut rng).unwrap();
        }
        let forward = |g: &mut Graph, s: &ParameterStore| {
            let sc = g.constant(lt.clone());
            let x = g.param(s, "x")?;
            let th: Vec<Var> = (0..3).map(|k| g.param(s, &format!("theta{k}"))).collect::<Result<_>>()?;
            let y = cheb_conv(g, sc, x, &th)?;
            Ok(g.sum(y))
        };
        let report = grad_check(forward, &s, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn near_degenerate_top_pair_falls_back_to_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1095);
        let w = build_adjacency(&random_distances(&mut rng, 6), 10.0, 0.5).unwrap();
        let l = normalized_laplacian(&w).unwrap();
        assert!(matches!(
            lambda_max(&l, LAMBDA_TOL, LAMBDA_MAX_ITER),
            Err(Error::Convergence { .. })
        ));
        let dense = symmetric_eigenvalues(&l).unwrap().into_iter().fold(f64::MIN, f64::max);
        assert!((largest_eigenvalue(&l).unwrap() - dense).abs() < 1e-12);
        assert!((SpectralOperator::from_adjacency(&w).unwrap().lambda_max - dense).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn adjacency_symmetric_zero_diagonal(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = build_adjacency(&random_distances(&mut rng, n), 10.0, 0.5).unwrap();
            for i in 0..n {
                prop_assert_eq!(w.get(&[i, i]), 0.0);
                for j in 0..n {
                    prop_assert_eq!(w.get(&[i, j]), w.get(&[j, i]));
                    let v = w.get(&[i, j]);
                    prop_assert!(v == 0.0 || (0.5..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn sqrt_degree_is_null_vector(seed in any::<u64>(), n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = build_adjacency(&random_distances(&mut rng, n), 10.0, 0.5).unwrap();
            let l = normalized_laplacian(&w).unwrap();
            let v: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w.get(&[i, j])).sum::<f64>().sqrt()).collect();
            for i in 0..n {
                let r: f64 = (0..n).map(|j| l.get(&[i, j]) * v[j]).sum();
                prop_assert!(r.abs() <= 1e-12);
            }
        }

        #[test]
        fn scaled_spectrum_in_unit_interval(seed in any::<u64>()) {
            let (l, lm, _) = random_instance(seed, 8);
            let lt = scaled_laplacian(&l, lm).unwrap();
            for e in symmetric_eigenvalues(&lt).unwrap() {
                prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&e));
            }
        }

        #[test]
        fn cheb_conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (l, lm, _) = random_instance(seed, 6);
            let lt = scaled_laplacian(&l, lm).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let mut rand_t = |shape: &[usize]| {
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            let x1 = rand_t(&[6, 2]);
            let x2 = rand_t(&[6, 2]);
            let th: Vec<Tensor> = (0..3).map(|_| rand_t(&[2, 2])).collect();
            let mix = x1.zip_map(&x2, |p, q| a * p + b * q).unwrap();
            let lhs = cheb_conv_tensor(&lt, &mix, &th).unwrap();
            let y1 = cheb_conv_tensor(&lt, &x1, &th).unwrap();
            let y2 = cheb_conv_tensor(&lt, &x2, &th).unwrap();
            let rhs = y1.zip_map(&y2, |p, q| a * p + b * q).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }

        #[test]
        fn cheb_conv_matches_oracle(seed in any::<u64>(), n in 2usize..=16, r in 1usize..=5, c in 1usize..=2) {
            let (l, lm, _) = random_instance(seed, n);
            let lt = scaled_laplacian(&l, lm).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let x = Tensor::new(&[n, c], (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let th: Vec<Tensor> = (0..r)
                .map(|_| Tensor::new(&[c, c], (0..c * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let y = cheb_conv_tensor(&lt, &x, &th).unwrap();
            let o = spectral_oracle(&l, &x, &th, lm).unwrap();
            prop_assert!(y.max_abs_diff(&o) <= 1e-8);
        }

        #[test]
        fn time_parallel_conv_matches_per_slice(seed in any::<u64>()) {
            let (l, lm, _) = random_instance(seed, 5);
            let lt = scaled_laplacian(&l, lm).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(&[3, 5, 2], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let th: Vec<Tensor> = (0..3).map(|_| Tensor::new(&[2, 1], vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap()).collect();
            let y = cheb_conv_tensor(&lt, &x, &th).unwrap();
            for t in 0..3 {
                let xt = x.narrow(0, t, 1).unwrap().reshape(&[5, 2]).unwrap();
                let yt = cheb_conv_tensor(&lt, &xt, &th).unwrap();
                let got = y.narrow(0, t, 1).unwrap().reshape(&[5, 1]).unwrap();
                prop_assert!(got.max_abs_diff(&yt) <= 1e-12);
            }
        }
    }
}
