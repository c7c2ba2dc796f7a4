//! Communication graphs and their doubly stochastic mixing matrices.
//!
//! Three graph families are supported: fully connected, Erdős–Rényi (resampled
//! until connected) and the ring. Mixing weights are Metropolis–Hastings on
//! sparse graphs and the uniform `1/n` matrix on the complete graph; both are
//! symmetric and doubly stochastic by construction.
//!
//! A [`MixingMatrix`] also carries the contraction constants used by the
//! learning-rate conditions of the convergence bound:
//!
//! * `p_min`, the smallest strictly positive weight,
//! * `q = (1 - p_min^n)^(1/n)`,
//! * `c_const = 2 (1 + p_min^(-n)) / (1 - p_min^n)`.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of Erdős–Rényi resamples before giving up on connectivity.
pub const ER_MAX_RESAMPLES: usize = 1000;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TopologyKind {
    FullyConnected,
    ErdosRenyi { edge_prob: f64 },
    Ring,
}

impl TopologyKind {
    pub fn label(&self) -> &'static str {
        match self {
            TopologyKind::FullyConnected => "fc",
            TopologyKind::ErdosRenyi { .. } => "er",
            TopologyKind::Ring => "ring",
        }
    }
}

/// Undirected agent graph. Edges are stored as sorted `(i, j)` pairs with
/// `i < j`, in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: TopologyKind,
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Topology {
    /// Builds a connected graph of the requested family.
    ///
    /// A ring on two agents degenerates to the single edge `0-1`.
    pub fn build(kind: TopologyKind, n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("topology.n", format!("need at least 2 agents, got {n}")));
        }
        let edges = match kind {
            TopologyKind::FullyConnected => {
                let mut e = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        e.push((i, j));
                    }
                }
                e
            }
            TopologyKind::Ring => {
                let mut e: Vec<(usize, usize)> =
                    (0..n).map(|i| sorted_pair(i, (i + 1) % n)).collect();
                e.sort_unstable();
                e.dedup();
                e
            }
            TopologyKind::ErdosRenyi { edge_prob } => {
                if !(edge_prob > 0.0 && edge_prob <= 1.0) {
                    return Err(Error::config(
                        "topology.edge_prob",
                        format!("must lie in (0, 1], got {edge_prob}"),
                    ));
                }
                sample_connected_er(n, edge_prob, seed)?
            }
        };
        Ok(Topology {
            kind,
            n,
            edges,
            seed,
        })
    }

    /// Wraps an explicit edge list, validating indices and self-loops.
    /// Connectivity is not required here; [`MixingMatrix::from_topology`]
    /// rejects disconnected graphs.
    pub fn from_edges(kind: TopologyKind, n: usize, edges: &[(usize, usize)], seed: u64) -> Result<Self> {
        let mut out = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(Error::InvalidTopology(format!("self-loop on agent {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge {a}-{b} out of range for {n} agents"
                )));
            }
            out.push(sorted_pair(a, b));
        }
        out.sort_unstable();
        out.dedup();
        Ok(Topology {
            kind,
            n,
            edges: out,
            seed,
        })
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency_lists(self.n, &self.edges)
    }

    pub fn is_connected(&self) -> bool {
        is_connected(self.n, &self.edges)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }
}

fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn adjacency_lists(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return true;
    }
    let adj = adjacency_lists(n, edges);
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

fn sample_connected_er(n: usize, p: f64, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ER_MAX_RESAMPLES {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        if is_connected(n, &edges) {
            return Ok(edges);
        }
    }
    Err(Error::ConstructionFailure(format!(
        "Erdős–Rényi graph with n={n}, p={p} still disconnected after {ER_MAX_RESAMPLES} resamples"
    )))
}

/// Metropolis–Hastings weights on an arbitrary (possibly disconnected) graph,
/// returned as a dense row-major `n × n` matrix. The diagonal absorbs the
/// remainder of each row, so isolated vertices get weight 1 on themselves.
pub(crate) fn metropolis_weights(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let mut deg = vec![0usize; n];
    for &(a, b) in edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    let mut w = vec![0.0; n * n];
    for &(a, b) in edges {
        let x = 1.0 / (1 + deg[a].max(deg[b])) as f64;
        w[a * n + b] = x;
        w[b * n + a] = x;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[i * n + j]).sum();
        w[i * n + i] = 1.0 - off;
    }
    w
}

pub(crate) fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n * n]
}

/// Symmetric doubly stochastic weight matrix over a connected graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    weights: Vec<f64>,
    p_min: f64,
    q: f64,
    one_minus_q: f64,
    c_const: f64,
}

impl MixingMatrix {
    pub fn from_topology(topo: &Topology) -> Result<Self> {
        if !topo.is_connected() {
            return Err(Error::InvalidTopology(format!(
                "{} graph on {} agents is disconnected",
                topo.kind.label(),
                topo.n
            )));
        }
        let weights = match topo.kind {
            TopologyKind::FullyConnected => uniform_weights(topo.n),
            _ => metropolis_weights(topo.n, &topo.edges),
        };
        Ok(Self::from_weights(topo.n, weights))
    }

    fn from_weights(n: usize, weights: Vec<f64>) -> Self {
        let p_min = weights
            .iter()
            .copied()
            .filter(|&x| x > 0.0)
            .fold(f64::INFINITY, f64::min);
        let nf = n as f64;
        let p_pow = p_min.powf(nf);
        // q = exp(ln(1 - p^n) / n); 1 - q is kept separately so the step-size
        // bound stays accurate when p^n is tiny.
        let log_q = (-p_pow).ln_1p() / nf;
        let q = log_q.exp();
        let one_minus_q = -log_q.exp_m1();
        let c_const = 2.0 * (1.0 + p_min.powf(-nf)) / (1.0 - p_pow);
        MixingMatrix {
            n,
            weights,
            p_min,
            q,
            one_minus_q,
            c_const,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    /// Dense row-major weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// `1 - q`, computed without cancellation.
    pub fn one_minus_q(&self) -> f64 {
        self.one_minus_q
    }

    pub fn c_const(&self) -> f64 {
        self.c_const
    }

    /// Number of neighbours (off-diagonal support) of agent `i`.
    pub fn out_degree(&self, i: usize) -> usize {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|&(j, &x)| j != i && x > 0.0)
            .count()
    }

    /// `y = P x` for a scalar per agent.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(x).map(|(p, v)| p * v).sum())
            .collect()
    }

    /// `1 - |λ₂|`, where `λ₂` is the eigenvalue of second-largest magnitude.
    ///
    /// Runs power iteration on the square of the mean-deflated operator
    /// `x ↦ Px − mean(x)·1`; squaring makes the dominant eigenvalue
    /// nonnegative, so eigenvalue pairs `±λ` cannot make the iteration
    /// oscillate.
    pub fn spectral_gap(&self) -> Result<f64> {
        Ok(1.0 - self.second_eigenvalue_magnitude()?)
    }

    pub fn second_eigenvalue_magnitude(&self) -> Result<f64> {
        let n = self.n;
        let deflate = |v: &mut Vec<f64>| {
            let mean = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= mean);
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9a9);
        let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        deflate(&mut x);
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);

        let mut prev = f64::NAN;
        for _ in 0..POWER_MAX_ITERS {
            let mut y = self.apply(&x);
            deflate(&mut y);
            let mut z = self.apply(&y);
            deflate(&mut z);
            // x has unit norm, so <x, B²x> = |Bx|².
            let rayleigh = y.iter().map(|v| v * v).sum::<f64>();
            let nz = norm(&z);
            if nz <= 1e-300 || rayleigh <= 1e-28 {
                return Ok(0.0);
            }
            if (rayleigh - prev).abs() < POWER_TOL {
                return Ok(rayleigh.sqrt());
            }
            prev = rayleigh;
            x = z.into_iter().map(|v| v / nz).collect();
        }
        Err(Error::NumericalFailure {
            what: "spectral gap power iteration did not converge".into(),
            iterations: POWER_MAX_ITERS,
        })
    }
}

/// Weights for the subgraph induced by the online agents.
///
/// Offline agents get an identity row. Among online agents the weights are
/// Metropolis on the induced edge set (uniform among online agents for the
/// complete graph), so the restricted matrix is again symmetric and doubly
/// stochastic. When every agent is online the original matrix is returned
/// unchanged.
pub fn induced_weights(topo: &Topology, mixing: &MixingMatrix, online: &[bool]) -> Vec<f64> {
    let n = topo.n;
    if online.iter().all(|&o| o) {
        return mixing.weights.clone();
    }
    let ids: Vec<usize> = (0..n).filter(|&i| online[i]).collect();
    let mut local = vec![usize::MAX; n];
    for (k, &i) in ids.iter().enumerate() {
        local[i] = k;
    }
    let m = ids.len();
    let sub = match topo.kind {
        TopologyKind::FullyConnected if m > 0 => uniform_weights(m),
        _ => {
            let sub_edges: Vec<(usize, usize)> = topo
                .edges
                .iter()
                .filter(|&&(a, b)| online[a] && online[b])
                .map(|&(a, b)| (local[a], local[b]))
                .collect();
            metropolis_weights(m, &sub_edges)
        }
    };
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        if !online[i] {
            w[i * n + i] = 1.0;
        }
    }
    for (a, &i) in ids.iter().enumerate() {
        for (b, &j) in ids.iter().enumerate() {
            w[i * n + j] = sub[a * m + b];
        }
    }
    w
}
