//! Communication graphs and doubly stochastic mixing matrices.
//!
//! Workers gossip through a symmetric matrix `E` with `E1 = 1` whose
//! eigenvalues satisfy `|λ_K| ≤ … ≤ |λ₂| < λ₁ = 1`. The magnitude of the
//! second-largest eigenvalue, `λ`, controls consensus speed through the
//! spectral gap `1 − λ`. Weights follow the Metropolis-Hastings rule
//! `e_ij = 1 / (1 + max(deg_i, deg_j))` for adjacent `i ≠ j`, with the
//! diagonal absorbing the residual mass; on any connected graph this yields
//! a matrix with all of the required properties.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("worker count must be at least 1")]
    EmptyGraph,
    #[error("ring topology needs at least 3 workers, got {0}")]
    RingTooSmall(usize),
    #[error("custom adjacency must be symmetric (entry ({0},{1}) disagrees with ({1},{0}))")]
    Asymmetric(usize, usize),
    #[error("graph is not connected (worker {0} unreachable from worker 0)")]
    Disconnected(usize),
    #[error("adjacency file: {0}")]
    AdjacencyFormat(String),
    #[error("eigenvalue solve failed for the mixing matrix")]
    EigenFailed,
    #[error("mix called with {got} vectors for a {expected}-worker matrix")]
    WorkerCountMismatch { expected: usize, got: usize },
    #[error("mix called with vectors of unequal dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Line,
    Ring,
    Complete,
    Star,
    Custom,
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TopologyKind::Line => "line",
            TopologyKind::Ring => "ring",
            TopologyKind::Complete => "complete",
            TopologyKind::Star => "star",
            TopologyKind::Custom => "custom",
        };
        f.write_str(name)
    }
}

/// Connected communication graph over `workers` nodes. The adjacency matrix
/// is symmetric with a true diagonal: every worker is its own neighbor.
#[derive(Clone, Debug)]
pub struct Topology {
    kind: TopologyKind,
    workers: usize,
    adjacency: Vec<bool>, // row-major workers x workers
}

impl Topology {
    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.workers + j]
    }

    /// Neighbor count excluding the self-loop.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.workers).filter(|&j| j != i && self.adjacent(i, j)).count()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.workers).filter(|&j| self.adjacent(i, j)).collect()
    }

    fn from_adjacency(kind: TopologyKind, workers: usize, adjacency: Vec<bool>) -> Result<Self, GraphError> {
        if workers == 0 {
            return Err(GraphError::EmptyGraph);
        }
        let mut adjacency = adjacency;
        for i in 0..workers {
            adjacency[i * workers + i] = true;
            for j in (i + 1)..workers {
                if adjacency[i * workers + j] != adjacency[j * workers + i] {
                    return Err(GraphError::Asymmetric(i, j));
                }
            }
        }
        let topo = Self { kind, workers, adjacency };
        topo.check_connected()?;
        Ok(topo)
    }

    fn check_connected(&self) -> Result<(), GraphError> {
        let mut seen = vec![false; self.workers];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..self.workers {
                if self.adjacent(i, j) && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        match seen.iter().position(|&s| !s) {
            Some(unreached) => Err(GraphError::Disconnected(unreached)),
            None => Ok(()),
        }
    }
}

/// Builds one of the named topologies on `workers` nodes.
pub fn build_topology(kind: TopologyKind, workers: usize) -> Result<Topology, GraphError> {
    if workers == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let mut adj = vec![false; workers * workers];
    let set = |i: usize, j: usize, adj: &mut Vec<bool>| {
        adj[i * workers + j] = true;
        adj[j * workers + i] = true;
    };
    match kind {
        TopologyKind::Line => {
            for i in 1..workers {
                set(i - 1, i, &mut adj);
            }
        }
        TopologyKind::Ring => {
            if workers < 3 {
                return Err(GraphError::RingTooSmall(workers));
            }
            for i in 1..workers {
                set(i - 1, i, &mut adj);
            }
            set(workers - 1, 0, &mut adj);
        }
        TopologyKind::Complete => {
            for i in 0..workers {
                for j in (i + 1)..workers {
                    set(i, j, &mut adj);
                }
            }
        }
        TopologyKind::Star => {
            for i in 1..workers {
                set(0, i, &mut adj);
            }
        }
        TopologyKind::Custom => {
            return Err(GraphError::AdjacencyFormat(
                "custom topology requires an adjacency matrix; use custom_topology".into(),
            ))
        }
    }
    Topology::from_adjacency(kind, workers, adj)
}

/// Builds a custom topology from a boolean adjacency matrix (row-major).
pub fn custom_topology(workers: usize, adjacency: Vec<bool>) -> Result<Topology, GraphError> {
    if adjacency.len() != workers * workers {
        return Err(GraphError::AdjacencyFormat(format!(
            "expected {} adjacency entries, got {}",
            workers * workers,
            adjacency.len()
        )));
    }
    Topology::from_adjacency(TopologyKind::Custom, workers, adjacency)
}

/// Parses the adjacency text format: first line the worker count `K`,
/// then `K` lines of `K` space-separated 0/1 entries.
pub fn parse_adjacency(text: &str) -> Result<Topology, GraphError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let k: usize = lines
        .next()
        .ok_or_else(|| GraphError::AdjacencyFormat("empty file".into()))?
        .trim()
        .parse()
        .map_err(|_| GraphError::AdjacencyFormat("first line must be the worker count".into()))?;
    let mut adj = Vec::with_capacity(k * k);
    for row in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| GraphError::AdjacencyFormat(format!("missing adjacency row {}", row + 1)))?;
        let entries: Vec<&str> = line.split_whitespace().collect();
        if entries.len() != k {
            return Err(GraphError::AdjacencyFormat(format!(
                "row {} has {} entries, expected {}",
                row + 1,
                entries.len(),
                k
            )));
        }
        for e in entries {
            match e {
                "0" => adj.push(false),
                "1" => adj.push(true),
                other => {
                    return Err(GraphError::AdjacencyFormat(format!(
                        "row {}: entry `{other}` is not 0 or 1",
                        row + 1
                    )))
                }
            }
        }
    }
    custom_topology(k, adj)
}

/// Symmetric doubly stochastic gossip weights with the magnitude of the
/// second-largest eigenvalue cached. Immutable once built.
#[derive(Clone, Debug)]
pub struct MixingMatrix {
    workers: usize,
    weights: Vec<f64>, // row-major
    lambda: f64,
}

impl MixingMatrix {
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.workers + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.workers..(i + 1) * self.workers]
    }

    /// Magnitude of the second-largest eigenvalue; 0 for a single worker.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Metropolis-Hastings weights for a connected topology.
pub fn metropolis_weights(topology: &Topology) -> Result<MixingMatrix, GraphError> {
    let k = topology.workers();
    let mut weights = vec![0.0; k * k];
    for i in 0..k {
        let mut off_diagonal = 0.0;
        for j in 0..k {
            if j != i && topology.adjacent(i, j) {
                let w = 1.0 / (1.0 + topology.degree(i).max(topology.degree(j)) as f64);
                weights[i * k + j] = w;
                off_diagonal += w;
            }
        }
        weights[i * k + i] = 1.0 - off_diagonal;
    }
    let lambda = second_eigenvalue_magnitude(k, &weights)?;
    Ok(MixingMatrix { workers: k, weights, lambda })
}

fn second_eigenvalue_magnitude(k: usize, weights: &[f64]) -> Result<f64, GraphError> {
    if k == 1 {
        return Ok(0.0);
    }
    let m = nalgebra::DMatrix::from_fn(k, k, |i, j| weights[i * k + j]);
    let eigen = nalgebra::SymmetricEigen::try_new(m, 1e-10, 0).ok_or(GraphError::EigenFailed)?;
    let mut magnitudes: Vec<f64> = eigen.eigenvalues.iter().map(|v| v.abs()).collect();
    magnitudes.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(magnitudes[1])
}

/// Spectral gap `1 − λ`, in (0, 1].
pub fn spectral_gap(matrix: &MixingMatrix) -> f64 {
    1.0 - matrix.lambda()
}

/// One synchronous gossip round: `out[k] = Σ_j e_kj · in[j]`.
pub fn mix<V: AsRef<[f64]>>(vectors: &[V], matrix: &MixingMatrix) -> Result<Vec<Vec<f64>>, GraphError> {
    let k = matrix.workers();
    if vectors.len() != k {
        return Err(GraphError::WorkerCountMismatch { expected: k, got: vectors.len() });
    }
    let dim = vectors[0].as_ref().len();
    for v in vectors {
        if v.as_ref().len() != dim {
            return Err(GraphError::DimensionMismatch(dim, v.as_ref().len()));
        }
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let row = matrix.row(i);
        let mut acc = vec![0.0; dim];
        for (j, v) in vectors.iter().enumerate() {
            let w = row[j];
            if w != 0.0 {
                crate::linalg::axpy(&mut acc, w, v.as_ref());
            }
        }
        out.push(acc);
    }
    Ok(out)
}
