//! Predefined graph construction: thresholded Gaussian adjacency from
//! sensor distances, symmetric normalized Laplacian, and the spectral
//! rescaling `A = (2/lambda_max) L - I` that the spatial embedding consumes.
//!
//! Sums that pool over node indices (degrees, the power-iteration matvec
//! and its norms) run through [`canonical_sum`], so relabeling nodes
//! permutes every result bitwise instead of perturbing last-ulp rounding.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::canonical_sum;

/// Dense symmetric N-by-N matrix used throughout graph preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMatrix {
    n: usize,
    data: Vec<f64>,
}

impl GraphMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "graph matrix wants {} entries for n={n}, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(GraphMatrix { n, data })
    }

    pub fn zeros(n: usize) -> Self {
        GraphMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut g = Self::zeros(n);
        for i in 0..n {
            g.data[i * n + i] = 1.0;
        }
        g
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        worst
    }
}

/// One record of a sensor distance file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub distance: f64,
}

/// Parses a `from,to,distance` text file. A single leading header line is
/// tolerated; any later unparseable line is an error carrying its number.
pub fn load_edge_list(path: &Path) -> Result<Vec<Edge>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read edge list {}: {e}", path.display())))?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_edge(line) {
            Ok(e) => edges.push(e),
            Err(_) if lineno == 0 => continue, // header
            Err(msg) => {
                return Err(Error::Data(format!(
                    "{}:{}: {msg}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(edges)
}

fn parse_edge(line: &str) -> std::result::Result<Edge, String> {
    let mut parts = line.split(',');
    let mut next = |what: &str| {
        parts
            .next()
            .map(str::trim)
            .ok_or_else(|| format!("missing {what} field"))
    };
    let from = next("from")?.parse::<usize>().map_err(|e| format!("from: {e}"))?;
    let to = next("to")?.parse::<usize>().map_err(|e| format!("to: {e}"))?;
    let distance = next("distance")?.parse::<f64>().map_err(|e| format!("distance: {e}"))?;
    if !distance.is_finite() || distance < 0.0 {
        return Err(format!("distance {distance} must be finite and nonnegative"));
    }
    Ok(Edge { from, to, distance })
}

/// Gaussian-kernel adjacency from pairwise distances:
/// `W[i,j] = exp(-d^2 / sigma^2)` with `sigma` the population standard
/// deviation of all provided distances, entries below `kappa` zeroed,
/// symmetrized by `max(W, W^T)`, zero diagonal.
///
/// When every distance is identical (`sigma = 0`) the kernel degenerates:
/// weight 1 for zero distance, 0 otherwise.
pub fn build_weighted_adjacency(
    edges: &[Edge],
    n_nodes: usize,
    kappa: f64,
) -> Result<GraphMatrix> {
    if n_nodes == 0 {
        return Err(Error::InvalidArg("graph needs at least one node".into()));
    }
    for e in edges {
        if e.from >= n_nodes || e.to >= n_nodes {
            return Err(Error::Graph(format!(
                "edge ({}, {}) out of range for {} nodes",
                e.from, e.to, n_nodes
            )));
        }
    }
    let mut w = GraphMatrix::zeros(n_nodes);
    if edges.is_empty() {
        return Ok(w);
    }
    let mean = edges.iter().map(|e| e.distance).sum::<f64>() / edges.len() as f64;
    let var = edges.iter().map(|e| (e.distance - mean).powi(2)).sum::<f64>() / edges.len() as f64;
    let sigma2 = var;
    for e in edges {
        if e.from == e.to {
            continue;
        }
        let weight = if sigma2 == 0.0 {
            if e.distance == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (-e.distance * e.distance / sigma2).exp()
        };
        let weight = if weight < kappa { 0.0 } else { weight };
        let n = n_nodes;
        // symmetrize: keep the larger of the two directions
        let wij = w.data[e.from * n + e.to].max(weight);
        w.data[e.from * n + e.to] = wij;
        let wji = w.data[e.to * n + e.from].max(weight);
        w.data[e.to * n + e.from] = wji;
        let m = wij.max(wji);
        w.data[e.from * n + e.to] = m;
        w.data[e.to * n + e.from] = m;
    }
    Ok(w)
}

/// Symmetric normalized Laplacian `L = I - D^{-1/2} W D^{-1/2}`.
/// Isolated nodes keep an identity row/column.
pub fn normalized_laplacian(w: &GraphMatrix) -> Result<GraphMatrix> {
    if w.max_asymmetry() > 1e-9 {
        return Err(Error::Graph(format!(
            "adjacency asymmetric by {:.3e}, expected symmetric input",
            w.max_asymmetry()
        )));
    }
    let n = w.n;
    let mut inv_sqrt_deg = vec![0.0f64; n];
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        terms.clear();
        terms.extend_from_slice(&w.data[i * n..(i + 1) * n]);
        let deg = canonical_sum(&mut terms);
        inv_sqrt_deg[i] = if deg > 0.0 { 1.0 / deg.sqrt() } else { 0.0 };
    }
    let mut l = GraphMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let norm_w = inv_sqrt_deg[i] * w.at(i, j) * inv_sqrt_deg[j];
            l.data[i * n + j] = if i == j { 1.0 - norm_w } else { -norm_w };
        }
    }
    Ok(l)
}

/// Largest-eigenvalue estimate by power iteration. The start vector is a
/// per-row polynomial hash of the matrix, so the whole computation is
/// equivariant under node relabeling; a fixed-seed random restart covers
/// starts that land in the kernel (regular graphs).
fn power_iteration_lambda_max(l: &GraphMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    let n = l.n;
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let mut terms: Vec<f64> = l.data[i * n..(i + 1) * n]
                .iter()
                .map(|&x| x + 0.6180339887498949 * x * x - 0.25 * x * x * x)
                .collect();
            1.0 + canonical_sum(&mut terms)
        })
        .collect();
    let mut used_random_restart = false;
    let mut lambda_prev = f64::NAN;
    let mut last_estimate = 0.0f64;
    let mut iter = 0usize;
    let mut terms = Vec::with_capacity(n);
    while iter < max_iter {
        iter += 1;
        // normalize v
        terms.clear();
        terms.extend(v.iter().map(|&x| x * x));
        let norm = canonical_sum(&mut terms).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            if used_random_restart {
                return Err(Error::NotConverged { max_iter, last_estimate });
            }
            used_random_restart = true;
            let mut rng = ChaCha8Rng::seed_from_u64(0x5354_4d4c_5047);
            v = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            lambda_prev = f64::NAN;
            continue;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        // w = L v
        let mut lv = vec![0.0f64; n];
        for i in 0..n {
            terms.clear();
            for j in 0..n {
                terms.push(l.data[i * n + j] * v[j]);
            }
            lv[i] = canonical_sum(&mut terms);
        }
        // Rayleigh quotient with unit v
        terms.clear();
        terms.extend(v.iter().zip(&lv).map(|(&a, &b)| a * b));
        let lambda = canonical_sum(&mut terms);
        last_estimate = lambda;
        terms.clear();
        terms.extend(lv.iter().map(|&x| x * x));
        let lv_norm = canonical_sum(&mut terms).sqrt();
        if lv_norm <= 1e-14 {
            // start vector sits in the kernel; restart from random
            if used_random_restart {
                return Err(Error::NotConverged { max_iter, last_estimate });
            }
            used_random_restart = true;
            let mut rng = ChaCha8Rng::seed_from_u64(0x5354_4d4c_5047);
            v = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            lambda_prev = f64::NAN;
            continue;
        }
        if lambda_prev.is_finite() {
            let change = (lambda - lambda_prev).abs();
            if change <= tol * lambda.abs().max(1e-30) {
                return Ok(lambda);
            }
        }
        lambda_prev = lambda;
        v = lv;
    }
    Err(Error::NotConverged { max_iter, last_estimate })
}

/// Rescales a normalized Laplacian so its spectrum fits `[-1, 1]`:
/// `A = (2 / lambda_max) L - I`.
pub fn scale_laplacian(l: &GraphMatrix, tol: f64, max_iter: usize) -> Result<GraphMatrix> {
    if l.max_asymmetry() > 1e-9 {
        return Err(Error::Graph("scale_laplacian expects a symmetric matrix".into()));
    }
    let lambda_max = power_iteration_lambda_max(l, tol, max_iter)?;
    if lambda_max <= 0.0 {
        return Err(Error::Graph(format!(
            "largest eigenvalue estimate {lambda_max} is not positive"
        )));
    }
    let factor = 2.0 / lambda_max;
    let n = l.n;
    let mut a = GraphMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v = factor * l.at(i, j) - if i == j { 1.0 } else { 0.0 };
            a.data[i * n + j] = v;
        }
    }
    Ok(a)
}

pub const DEFAULT_SCALE_TOL: f64 = 1e-8;
pub const DEFAULT_SCALE_MAX_ITER: usize = 1000;
pub const DEFAULT_KAPPA: f64 = 0.1;

/// Full preprocessing chain from an edge list to the scaled Laplacian.
pub fn prepare_adjacency(edges: &[Edge], n_nodes: usize, kappa: f64) -> Result<GraphMatrix> {
    let w = build_weighted_adjacency(edges, n_nodes, kappa)?;
    let l = normalized_laplacian(&w)?;
    scale_laplacian(&l, DEFAULT_SCALE_TOL, DEFAULT_SCALE_MAX_ITER)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(from: usize, to: usize, distance: f64) -> Edge {
        Edge { from, to, distance }
    }

    #[test]
    fn no_edges_gives_zero_matrix() {
        let w = build_weighted_adjacency(&[], 3, 0.1).unwrap();
        assert!(w.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_distance_edge_has_unit_weight() {
        let w = build_weighted_adjacency(&[edge(0, 1, 0.0)], 2, 0.1).unwrap();
        assert_eq!(w.at(0, 1), 1.0);
        assert_eq!(w.at(1, 0), 1.0);
        assert_eq!(w.at(0, 0), 0.0);
    }

    #[test]
    fn equal_distances_fall_back_to_indicator() {
        // sigma = 0: weight 1 iff distance 0
        let w = build_weighted_adjacency(&[edge(0, 1, 2.0), edge(1, 2, 2.0)], 3, 0.1).unwrap();
        assert_eq!(w.at(0, 1), 0.0);
        assert_eq!(w.at(1, 2), 0.0);
        let w0 = build_weighted_adjacency(&[edge(0, 1, 0.0), edge(1, 2, 0.0)], 3, 0.1).unwrap();
        assert_eq!(w0.at(0, 1), 1.0);
        assert_eq!(w0.at(1, 2), 1.0);
    }

    #[test]
    fn gaussian_kernel_by_hand() {
        // distances {1, 3}: mean 2, population var 1 -> sigma^2 = 1
        let w = build_weighted_adjacency(&[edge(0, 1, 1.0), edge(1, 2, 3.0)], 3, 0.0).unwrap();
        assert!((w.at(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w.at(1, 2) - (-9.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_node_rejected() {
        assert!(build_weighted_adjacency(&[edge(0, 5, 1.0)], 3, 0.1).is_err());
    }

    #[test]
    fn laplacian_of_empty_graph_is_identity() {
        let l = normalized_laplacian(&GraphMatrix::zeros(4)).unwrap();
        assert_eq!(l, GraphMatrix::identity(4));
    }

    #[test]
    fn laplacian_two_node_unit_edge() {
        let w = GraphMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = normalized_laplacian(&w).unwrap();
        assert_eq!(l.values(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn laplacian_k3_unit_weights() {
        let mut w = GraphMatrix::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    w.data[i * 3 + j] = 1.0;
                }
            }
        }
        let l = normalized_laplacian(&w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { -0.5 };
                assert!((l.at(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn laplacian_rejects_asymmetry() {
        let w = GraphMatrix::new(2, vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(normalized_laplacian(&w).is_err());
    }

    #[test]
    fn scale_identity_stays_identity() {
        let a = scale_laplacian(&GraphMatrix::identity(3), 1e-8, 1000).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((a.at(i, j) - expect).abs() < 1e-9, "a[{i},{j}] = {}", a.at(i, j));
            }
        }
    }

    #[test]
    fn scale_two_node_edge() {
        let l = GraphMatrix::new(2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let a = scale_laplacian(&l, 1e-8, 1000).unwrap();
        assert!((a.at(0, 0)).abs() < 1e-7);
        assert!((a.at(0, 1) + 1.0).abs() < 1e-7);
        assert!((a.at(1, 0) + 1.0).abs() < 1e-7);
        assert!((a.at(1, 1)).abs() < 1e-7);
    }

    #[test]
    fn scale_diagonal_spectrum() {
        let l = GraphMatrix::new(2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let a = scale_laplacian(&l, 1e-10, 2000).unwrap();
        assert!((a.at(0, 0) - 1.0).abs() < 1e-7);
        assert!(a.at(1, 1).abs() < 1e-7);
    }

    #[test]
    fn nonconverged_error_carries_estimate() {
        let l = GraphMatrix::new(2, vec![2.0, 0.1, 0.1, 1.0]).unwrap();
        match scale_laplacian(&l, 0.0, 2) {
            Err(Error::NotConverged { max_iter, last_estimate }) => {
                assert_eq!(max_iter, 2);
                assert!(last_estimate > 0.0);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn edge_list_parsing() {
        let dir = std::env::temp_dir().join(format!("stmlp_graph_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("edges.csv");
        std::fs::write(&path, "from,to,cost\n0,1,2.5\n1,2,3.5\n").unwrap();
        let edges = load_edge_list(&path).unwrap();
        assert_eq!(edges, vec![edge(0, 1, 2.5), edge(1, 2, 3.5)]);

        std::fs::write(&path, "0,1,2.5\nbad line\n").unwrap();
        let err = load_edge_list(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
