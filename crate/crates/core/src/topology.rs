//! Communication graphs and doubly stochastic mixing matrices.
//!
//! Weights follow the Metropolis-Hastings rule: an edge `(i, j)` gets
//! `1 / (1 + max(deg_i, deg_j))` and the diagonal absorbs whatever is left of
//! the row. The result is symmetric and doubly stochastic for any undirected
//! graph, and its spectral gap quantity `rho = ||W - J||_2` is strictly below
//! one whenever the graph is connected.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual allowed on row/column sums and on the sparsity mask.
pub const STOCHASTIC_TOL: f64 = 1e-12;

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 10_000;

/// Undirected simple graph over agents `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from unordered pairs. Duplicates (in either orientation)
    /// collapse; self-loops and out-of-range endpoints are rejected.
    pub fn new(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Topology(format!("need at least 2 agents, got {n}")));
        }
        let mut edges = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                return Err(Error::Topology(format!("self-loop on agent {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::Topology(format!(
                    "edge ({a}, {b}) out of range for {n} agents"
                )));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        Ok(Graph { n, edges })
    }

    pub fn ring(n: usize) -> Result<Self> {
        Graph::new(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    /// Non-toroidal `side x side` grid; `n` must be a perfect square.
    pub fn grid2d(n: usize) -> Result<Self> {
        let side = perfect_sqrt(n)
            .ok_or_else(|| Error::Topology(format!("grid2d needs a perfect square, got {n}")))?;
        let mut pairs = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let i = r * side + c;
                if c + 1 < side {
                    pairs.push((i, i + 1));
                }
                if r + 1 < side {
                    pairs.push((i, i + side));
                }
            }
        }
        Graph::new(n, pairs)
    }

    pub fn complete(n: usize) -> Result<Self> {
        Graph::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    /// Parses a plain-text edge list: one `i j` pair per line, 0-indexed,
    /// `#` starts a comment. The agent count is the largest index plus one.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::Parse(format!(
                    "edge list line {}: expected two indices, got {:?}",
                    lineno + 1,
                    line
                )));
            }
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    Error::Parse(format!("edge list line {}: bad index {:?}", lineno + 1, s))
                })
            };
            pairs.push((parse(fields[0])?, parse(fields[1])?));
        }
        let n = pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0);
        Graph::new(n, pairs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        count_components(self.n, self.edges.iter().copied()) == 1
    }
}

fn perfect_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Union-find component count.
fn count_components(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> usize {
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut components = n;
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Grid2d,
    Complete,
    Custom(Graph),
}

impl TopologyKind {
    pub fn name(&self) -> &'static str {
        match self {
            TopologyKind::Ring => "ring",
            TopologyKind::Grid2d => "grid2d",
            TopologyKind::Complete => "complete",
            TopologyKind::Custom(_) => "custom",
        }
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(TopologyKind::Ring),
            "grid2d" => Ok(TopologyKind::Grid2d),
            "complete" => Ok(TopologyKind::Complete),
            other => Err(Error::Topology(format!("unknown topology kind {other:?}"))),
        }
    }
}

/// Doubly stochastic mixing matrix together with its support graph and the
/// cached value of `||W - J||_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    weights: DMatrix<f64>,
    graph: Option<Graph>,
    rho: f64,
}

impl MixingMatrix {
    /// Wraps arbitrary weights without checking the mixing conditions; use
    /// [`validate_mixing`] to inspect them. Only squareness is enforced.
    pub fn from_weights(weights: DMatrix<f64>, graph: Option<Graph>) -> Result<Self> {
        let rho = spectral_gap(&weights)?;
        if let Some(g) = &graph {
            if g.n() != weights.nrows() {
                return Err(Error::Topology(format!(
                    "graph has {} agents but W is {}x{}",
                    g.n(),
                    weights.nrows(),
                    weights.ncols()
                )));
            }
        }
        Ok(MixingMatrix {
            weights,
            graph,
            rho,
        })
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.graph.as_ref()
    }

    /// Agents `j` with `W[j][i] != 0`, including `i` itself when its
    /// self-weight is nonzero, in ascending order. These are the senders whose
    /// compressed messages agent `i` mixes.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&j| self.weights[(j, i)] != 0.0)
            .collect()
    }

    /// Number of other agents that receive agent `i`'s message.
    pub fn out_degree(&self, i: usize) -> usize {
        (0..self.n())
            .filter(|&j| j != i && self.weights[(i, j)] != 0.0)
            .count()
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.out_degree(i)).collect()
    }
}

/// Builds a Metropolis-weighted mixing matrix for the requested topology.
pub fn build_topology(kind: &TopologyKind, n: usize) -> Result<MixingMatrix> {
    if n < 2 {
        return Err(Error::Topology(format!("need at least 2 agents, got {n}")));
    }
    let graph = match kind {
        TopologyKind::Ring => Graph::ring(n)?,
        TopologyKind::Grid2d => Graph::grid2d(n)?,
        TopologyKind::Complete => Graph::complete(n)?,
        TopologyKind::Custom(g) => {
            if g.n() != n {
                return Err(Error::Topology(format!(
                    "custom graph has {} agents, expected {n}",
                    g.n()
                )));
            }
            g.clone()
        }
    };
    if !graph.is_connected() {
        return Err(Error::Topology("graph is disconnected".into()));
    }
    let weights = metropolis_weights(&graph);
    MixingMatrix::from_weights(weights, Some(graph))
}

pub fn metropolis_weights(graph: &Graph) -> DMatrix<f64> {
    let n = graph.n();
    let deg = graph.degrees();
    let mut w = DMatrix::zeros(n, n);
    for (a, b) in graph.edges() {
        let v = 1.0 / (1 + deg[a].max(deg[b])) as f64;
        w[(a, b)] = v;
        w[(b, a)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

/// `||W - 11^T/n||_2` by power iteration on `(W - J)^T (W - J)`.
///
/// The start vector is the normalized all-ones vector plus a fixed
/// perturbation; all-ones alone lies in the null space of `W - J` for any
/// stochastic `W`.
pub fn spectral_gap(w: &DMatrix<f64>) -> Result<f64> {
    let n = w.nrows();
    if n != w.ncols() {
        return Err(Error::Topology(format!(
            "spectral gap needs a square matrix, got {}x{}",
            n,
            w.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::Topology("empty matrix".into()));
    }
    let centered = w - DMatrix::from_element(n, n, 1.0 / n as f64);
    let gram = centered.transpose() * &centered;

    let mut v = DVector::from_fn(n, |i, _| {
        1.0 / (n as f64).sqrt() + 0.1 * ((i + 1) as f64 * 0.7).sin() + 0.01 * (i as f64)
    });
    v /= v.norm();
    let mut rho_prev = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let next = &gram * &v;
        let norm = next.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(0.0);
        }
        v = next / norm;
        let rayleigh = v.dot(&(&gram * &v)).max(0.0);
        let rho = rayleigh.sqrt();
        if (rho - rho_prev).abs() <= POWER_TOL * rho.max(f64::MIN_POSITIVE) {
            return Ok(rho);
        }
        rho_prev = rho;
    }
    Ok(rho_prev)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub rho: f64,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<22} {:<4} residual={:.3e}",
                c.name,
                if c.passed { "ok" } else { "FAIL" },
                c.residual
            )?;
        }
        write!(f, "rho = {:.12}", self.rho)
    }
}

/// Reports every mixing condition with its measured residual.
///
/// Residuals: nonnegativity is the magnitude of the most negative entry;
/// stochasticity the largest row/column-sum deviation from one; the mask the
/// largest off-graph weight (zero when no graph is attached); simplicity the
/// number of extra eigenvalues equal to one, which for a doubly stochastic
/// matrix equals the number of connected components of its support minus one;
/// and the gap check reports `max(0, rho - (1 - tol))`.
pub fn validate_mixing(w: &MixingMatrix) -> ValidationReport {
    let m = w.weights();
    let n = m.nrows();

    let min_entry = m.iter().copied().fold(f64::INFINITY, f64::min);
    let neg = (-min_entry).max(0.0);

    let mut dev = 0.0f64;
    for i in 0..n {
        dev = dev.max((m.row(i).sum() - 1.0).abs());
        dev = dev.max((m.column(i).sum() - 1.0).abs());
    }

    let mask = match w.graph() {
        Some(g) => {
            let mut worst = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if i != j && !g.has_edge(i, j) {
                        worst = worst.max(m[(i, j)].abs());
                    }
                }
            }
            worst
        }
        None => 0.0,
    };

    let support = (0..n).flat_map(|i| {
        (0..n)
            .filter(move |&j| i != j)
            .filter(move |&j| m[(i, j)] != 0.0)
            .map(move |j| (i, j))
    });
    let extra_unit_eigs = count_components(n, support) - 1;

    let rho = w.rho();
    ValidationReport {
        checks: vec![
            Check {
                name: "nonnegative",
                passed: neg == 0.0,
                residual: neg,
            },
            Check {
                name: "doubly_stochastic",
                passed: dev <= STOCHASTIC_TOL,
                residual: dev,
            },
            Check {
                name: "sparsity_mask",
                passed: mask <= STOCHASTIC_TOL,
                residual: mask,
            },
            Check {
                name: "simple_unit_eigenvalue",
                passed: extra_unit_eigs == 0,
                residual: extra_unit_eigs as f64,
            },
            Check {
                name: "rho_below_one",
                passed: rho < 1.0 - STOCHASTIC_TOL,
                residual: (rho - (1.0 - STOCHASTIC_TOL)).max(0.0),
            },
        ],
        rho,
    }
}
