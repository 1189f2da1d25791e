//! Communication graphs, doubly stochastic consensus matrices, and the
//! mixing constants derived from them.
//!
//! Convention: neighborhoods include the worker itself, so the adjacency
//! diagonal is always true. Degrees reported by [`Graph::degree`] exclude the
//! self-loop.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, phase};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// Undirected, connected communication topology over `n` workers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    adj: Vec<bool>, // n×n row-major, symmetric, diagonal true
}

impl Graph {
    /// Validate an explicit adjacency (row-major, length `n·n`).
    ///
    /// Accepts any `n ≥ 1`; the builders below require `n ≥ 2` but a
    /// single-node graph is a legal degenerate topology for the engine.
    pub fn from_adjacency(n: usize, adj: Vec<bool>) -> Result<Graph> {
        if n == 0 {
            return Err(Error::invalid("graph needs at least one node"));
        }
        if adj.len() != n * n {
            return Err(Error::invalid(format!(
                "adjacency has length {}, expected {}",
                adj.len(),
                n * n
            )));
        }
        for i in 0..n {
            if !adj[i * n + i] {
                return Err(Error::invalid(format!("missing self-loop at node {i}")));
            }
            for j in 0..i {
                if adj[i * n + j] != adj[j * n + i] {
                    return Err(Error::invalid(format!(
                        "adjacency not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let g = Graph { n, adj };
        if !g.is_connected() {
            return Err(Error::invalid("graph is not connected"));
        }
        Ok(g)
    }

    /// Ring: worker `i` talks to `i−1` and `i+1` modulo `n`.
    pub fn ring(n: usize) -> Result<Graph> {
        if n < 2 {
            return Err(Error::invalid(format!("ring needs n >= 2, got {n}")));
        }
        let mut adj = vec![false; n * n];
        for i in 0..n {
            adj[i * n + i] = true;
            let prev = (i + n - 1) % n;
            let next = (i + 1) % n;
            adj[i * n + prev] = true;
            adj[i * n + next] = true;
        }
        Ok(Graph { n, adj })
    }

    /// Fully connected graph.
    pub fn complete(n: usize) -> Result<Graph> {
        if n < 2 {
            return Err(Error::invalid(format!("complete needs n >= 2, got {n}")));
        }
        Ok(Graph {
            n,
            adj: vec![true; n * n],
        })
    }

    /// Erdős–Rényi draw with per-pair probability `edge_prob`, redrawn on a
    /// fresh substream until connected. Deterministic in `(n, edge_prob, seed)`.
    pub fn random_connected(n: usize, edge_prob: f64, seed: u64) -> Result<Graph> {
        if n < 2 {
            return Err(Error::invalid(format!(
                "random graph needs n >= 2, got {n}"
            )));
        }
        if edge_prob.is_nan() || edge_prob <= 0.0 || edge_prob > 1.0 {
            return Err(Error::invalid(format!(
                "edge_prob must be in (0, 1], got {edge_prob}"
            )));
        }
        const MAX_ATTEMPTS: u64 = 10_000;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = rng::substream(seed, rng::SHARED, attempt, phase::GRAPH_EDGES);
            let mut adj = vec![false; n * n];
            for i in 0..n {
                adj[i * n + i] = true;
                for j in (i + 1)..n {
                    if rng.random::<f64>() < edge_prob {
                        adj[i * n + j] = true;
                        adj[j * n + i] = true;
                    }
                }
            }
            let g = Graph { n, adj };
            if g.is_connected() {
                return Ok(g);
            }
        }
        Err(Error::ConstructionFailure(format!(
            "no connected graph with n={n}, edge_prob={edge_prob} after {MAX_ATTEMPTS} draws"
        )))
    }

    #[inline]
    pub fn n_workers(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    /// Neighborhood of `i`, including `i` itself, in ascending order.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.is_adjacent(i, j)).collect()
    }

    /// Degree of `i` excluding the self-loop.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.n)
            .filter(|&j| j != i && self.is_adjacent(i, j))
            .count()
    }

    /// Breadth-first reachability of every node from node 0.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for j in 0..self.n {
                if self.is_adjacent(i, j) && !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.n
    }

    /// Undirected edge list `(i, j)` with `i < j` (self-loops implicit),
    /// used by the JSON run summary.
    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.is_adjacent(i, j) {
                    edges.push((i, j));
                }
            }
        }
        edges
    }
}

// ---------------------------------------------------------------------------
// Consensus matrix
// ---------------------------------------------------------------------------

/// N×N non-negative weight matrix aligned with a graph: `weights(i,j)` may be
/// nonzero only where `(i,j)` is an edge, and every row and column sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusMatrix<T> {
    n: usize,
    weights: Vec<T>, // row-major
}

impl<T: Scalar> ConsensusMatrix<T> {
    /// Metropolis–Hastings weights for a connected graph:
    /// `P(i,j) = 1/(1 + max(deg_i, deg_j))` on edges `i≠j`, and the diagonal
    /// absorbs the remainder. Symmetric by construction, hence doubly
    /// stochastic on any undirected graph.
    pub fn metropolis(g: &Graph) -> ConsensusMatrix<T> {
        let n = g.n_workers();
        let degrees: Vec<usize> = (0..n).map(|i| g.degree(i)).collect();
        let mut weights = vec![T::zero(); n * n];
        for i in 0..n {
            let mut off_diag_sum = T::zero();
            for j in 0..n {
                if j != i && g.is_adjacent(i, j) {
                    let denom = 1 + degrees[i].max(degrees[j]);
                    let w = T::one() / T::of_f64(denom as f64);
                    weights[i * n + j] = w;
                    off_diag_sum += w;
                }
            }
            weights[i * n + i] = T::one() - off_diag_sum;
        }
        ConsensusMatrix { n, weights }
    }

    /// Wrap an explicit weight matrix without validation; pair with
    /// [`ConsensusMatrix::is_doubly_stochastic`] when the source is untrusted.
    pub fn from_weights(n: usize, weights: Vec<T>) -> Result<ConsensusMatrix<T>> {
        if weights.len() != n * n {
            return Err(Error::invalid(format!(
                "weight matrix has length {}, expected {}",
                weights.len(),
                n * n
            )));
        }
        Ok(ConsensusMatrix { n, weights })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.weights[i * self.n + j]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// All row sums and column sums within `tol` of 1, all entries ≥ −tol.
    pub fn is_doubly_stochastic(&self, tol: T) -> bool {
        for i in 0..self.n {
            let mut row = T::zero();
            let mut col = T::zero();
            for j in 0..self.n {
                let w = self.get(i, j);
                if w < -tol {
                    return false;
                }
                row += w;
                col += self.get(j, i);
            }
            if (row - T::one()).abs() > tol || (col - T::one()).abs() > tol {
                return false;
            }
        }
        true
    }

    /// Mixing constants: `p` the smallest strictly positive weight,
    /// `q = (1 − p^N)^{1/N}` and `C = 2(1 + p^{−N})/(1 − p^N)`.
    ///
    /// A matrix whose positive entries are all 1 (identity/permutation)
    /// exchanges no information and is rejected: `1 − p^N` would be zero.
    pub fn mixing_params(&self) -> Result<MixingParams<T>> {
        let mut p: Option<T> = None;
        for &w in &self.weights {
            if w > T::zero() {
                p = Some(match p {
                    Some(cur) if cur <= w => cur,
                    _ => w,
                });
            }
        }
        let p = p.ok_or_else(|| Error::invalid("matrix has no positive entry"))?;
        let n_exp = self.n as i32;
        let p_pow_n = p.powi(n_exp);
        let one_minus = T::one() - p_pow_n;
        if one_minus <= T::zero() {
            return Err(Error::invalid(
                "smallest positive weight is 1: no effective information exchange, \
                 mixing constants undefined",
            ));
        }
        let q = one_minus.powf(T::one() / T::of_f64(self.n as f64));
        let big_c = T::of_f64(2.0) * (T::one() + p.powi(-n_exp)) / one_minus;
        Ok(MixingParams { p, q, big_c })
    }

    /// `out[i] = Σ_j P(i,j)·vectors[j]`: one synchronous gossip exchange on
    /// per-worker vectors of equal length.
    ///
    /// Evaluated in diffusion form, `x_i + Σ_j P(i,j)·(x_j − x_i)`, which is
    /// the same sum for a row-stochastic matrix but returns `x_i` bit-exactly
    /// when all neighbors agree. Zero weights are skipped, so only neighbor
    /// values are ever read.
    pub fn mix(&self, vectors: &[Vec<T>]) -> Vec<Vec<T>> {
        assert_eq!(vectors.len(), self.n, "one vector per worker");
        let len = vectors[0].len();
        let mut out = vec![vec![T::zero(); len]; self.n];
        for i in 0..self.n {
            assert_eq!(vectors[i].len(), len, "congruent vectors required");
            out[i].copy_from_slice(&vectors[i]);
            for j in 0..self.n {
                if j == i {
                    continue;
                }
                let w = self.get(i, j);
                if w != T::zero() {
                    for (o, (&xj, &xi)) in out[i]
                        .iter_mut()
                        .zip(vectors[j].iter().zip(vectors[i].iter()))
                    {
                        *o += w * (xj - xi);
                    }
                }
            }
        }
        out
    }
}

/// Constants `(p, q, C)` describing how fast the consensus matrix mixes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixingParams<T> {
    /// Smallest strictly positive entry of the consensus matrix.
    pub p: T,
    /// Geometric contraction factor, in (0, 1).
    pub q: T,
    /// Amplification constant paired with `q`.
    pub big_c: T,
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
