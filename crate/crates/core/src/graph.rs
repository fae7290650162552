//! Patch graph construction.
//!
//! Connectivity comes either from the 8-neighbourhood of each patch on its
//! grid ([`moore_edges`]) or from the `k` spatially nearest patches
//! ([`knn_edges`]). Retained edges carry a Gaussian feature-similarity
//! weight `exp(−‖x_u − x_v‖² / σ²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{PatchGrid, PatchMatrix};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodMode {
    #[default]
    Moore,
    Knn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    #[serde(default)]
    pub mode: NeighborhoodMode,
    /// Neighbour count, used in `knn` mode only.
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
}

fn default_knn_k() -> usize {
    8
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        NeighborhoodSpec {
            mode: NeighborhoodMode::Moore,
            knn_k: default_knn_k(),
        }
    }
}

impl NeighborhoodSpec {
    pub fn moore() -> Self {
        Self::default()
    }

    pub fn knn(k: usize) -> Self {
        NeighborhoodSpec {
            mode: NeighborhoodMode::Knn,
            knn_k: k,
        }
    }
}

/// Bandwidth of the similarity kernel. Serialized as `"auto"` or a number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SigmaSqRepr", into = "SigmaSqRepr")]
pub enum SigmaSq {
    /// Median squared feature distance over the edge set (1.0 if that is 0).
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SigmaSqRepr {
    Name(String),
    Value(f64),
}

impl TryFrom<SigmaSqRepr> for SigmaSq {
    type Error = String;

    fn try_from(r: SigmaSqRepr) -> std::result::Result<Self, String> {
        match r {
            SigmaSqRepr::Name(n) if n == "auto" => Ok(SigmaSq::Auto),
            SigmaSqRepr::Name(n) => Err(format!("sigma_sq must be \"auto\" or a positive number, got \"{n}\"")),
            SigmaSqRepr::Value(v) if v > 0.0 && v.is_finite() => Ok(SigmaSq::Fixed(v)),
            SigmaSqRepr::Value(v) => Err(format!("sigma_sq must be positive and finite, got {v}")),
        }
    }
}

impl From<SigmaSq> for SigmaSqRepr {
    fn from(s: SigmaSq) -> Self {
        match s {
            SigmaSq::Auto => SigmaSqRepr::Name("auto".into()),
            SigmaSq::Fixed(v) => SigmaSqRepr::Value(v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// Directed, weighted graph over patches, with its node features.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGraph {
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    pub sigma_sq: f64,
    /// `[|V| × d]` node features the weights were computed from.
    pub features: Tensor,
}

impl PatchGraph {
    /// Assembles a graph, checking the edge invariants.
    pub fn new(num_nodes: usize, edges: Vec<Edge>, sigma_sq: f64, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.rows() != num_nodes {
            return Err(Error::shape("PatchGraph", &[num_nodes], features.shape()));
        }
        for e in &edges {
            if e.u == e.v || e.u >= num_nodes || e.v >= num_nodes {
                return Err(Error::contract(format!(
                    "invalid edge ({}, {}) in graph of {num_nodes} nodes",
                    e.u, e.v
                )));
            }
            if !(e.weight > 0.0 && e.weight <= 1.0) {
                return Err(Error::contract(format!(
                    "edge ({}, {}) weight {} outside (0, 1]",
                    e.u, e.v, e.weight
                )));
            }
        }
        Ok(PatchGraph {
            num_nodes,
            edges,
            sigma_sq,
            features,
        })
    }

    /// Graph with every edge weighted 1.
    pub fn unweighted(num_nodes: usize, pairs: &[(usize, usize)], features: Tensor) -> Result<Self> {
        let edges = pairs.iter().map(|&(u, v)| Edge { u, v, weight: 1.0 }).collect();
        Self::new(num_nodes, edges, 1.0, features)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.u, e.v)).collect()
    }

    /// Out-neighbours of every node, in edge-list order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            adj[e.u].push(e.v);
        }
        adj
    }

    /// Relabels node `i` as `perm[i]`, moving feature rows with it.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        assert_eq!(perm.len(), self.num_nodes);
        let d = self.features.cols();
        let mut feats = vec![0.0; self.features.numel()];
        for (i, &p) in perm.iter().enumerate() {
            feats[p * d..(p + 1) * d].copy_from_slice(self.features.row(i));
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                u: perm[e.u],
                v: perm[e.v],
                weight: e.weight,
            })
            .collect();
        Self::new(
            self.num_nodes,
            edges,
            self.sigma_sq,
            Tensor::new(self.features.shape().to_vec(), feats)?,
        )
    }
}

/// 8-connectivity on the patch grid: every in-bounds offset in
/// `{−1,0,1}² ∖ {(0,0)}`, nodes in raster order.
pub fn moore_edges(grid: &PatchGrid) -> Vec<(usize, usize)> {
    let (rows, cols) = (grid.rows as isize, grid.cols as isize);
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let node = (r * cols + c) as usize;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rho, kappa) = (r + dr, c + dc);
                    if (0..rows).contains(&rho) && (0..cols).contains(&kappa) {
                        edges.push((node, (rho * cols + kappa) as usize));
                    }
                }
            }
        }
    }
    edges
}

/// Directed edges from each node to its `k` spatially nearest other nodes,
/// ties broken by ascending node index.
pub fn knn_edges(grid: &PatchGrid, k: usize) -> Result<Vec<(usize, usize)>> {
    let n = grid.num_nodes();
    if k == 0 || k >= n {
        return Err(Error::config(format!(
            "graph.knn_k must satisfy 1 <= k < |V| = {n}, got {k}"
        )));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(n);
    for u in 0..n {
        let (ui, uj) = grid.coords(u);
        order.clear();
        order.extend((0..n).filter(|&v| v != u).map(|v| {
            let (vi, vj) = grid.coords(v);
            let di = ui.abs_diff(vi);
            let dj = uj.abs_diff(vj);
            (di * di + dj * dj, v)
        }));
        order.sort_unstable();
        edges.extend(order[..k].iter().map(|&(_, v)| (u, v)));
    }
    Ok(edges)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the squared feature distances across `edges`, or 1.0 when that
/// median is zero or there are no edges.
pub fn median_sigma_sq(edges: &[(usize, usize)], x: &Tensor) -> f64 {
    let mut d: Vec<f64> = edges
        .iter()
        .map(|&(u, v)| squared_distance(x.row(u), x.row(v)))
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_unstable_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Gaussian similarity weight. Underflow is clamped to the smallest positive
/// double so every retained edge keeps a strictly positive weight.
pub fn similarity(a: &[f64], b: &[f64], sigma_sq: f64) -> f64 {
    (-squared_distance(a, b) / sigma_sq).exp().max(f64::MIN_POSITIVE)
}

pub fn weight_edges(edges: &[(usize, usize)], x: &PatchMatrix, sigma_sq: SigmaSq) -> Result<PatchGraph> {
    let feats = &x.x;
    let s2 = match sigma_sq {
        SigmaSq::Fixed(s) if s > 0.0 && s.is_finite() => s,
        SigmaSq::Fixed(s) => {
            return Err(Error::config(format!("graph.sigma_sq must be positive, got {s}")));
        }
        SigmaSq::Auto => median_sigma_sq(edges, feats),
    };
    let weighted = edges
        .iter()
        .map(|&(u, v)| Edge {
            u,
            v,
            weight: similarity(feats.row(u), feats.row(v), s2),
        })
        .collect();
    PatchGraph::new(feats.rows(), weighted, s2, feats.clone())
}

pub fn build_graph(pm: &PatchMatrix, spec: NeighborhoodSpec, sigma_sq: SigmaSq) -> Result<PatchGraph> {
    let edges = match spec.mode {
        NeighborhoodMode::Moore => moore_edges(&pm.grid),
        NeighborhoodMode::Knn => knn_edges(&pm.grid, spec.knn_k)?,
    };
    weight_edges(&edges, pm, sigma_sq)
}

/// Dense `|V|×|V|` adjacency with edge weights off the diagonal.
pub fn adjacency_dense(g: &PatchGraph) -> Tensor {
    let n = g.num_nodes;
    let mut a = Tensor::zeros(&[n, n]);
    for e in &g.edges {
        a.data_mut()[e.u * n + e.v] = e.weight;
    }
    a
}
