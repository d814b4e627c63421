//! Graph representation, synthetic generators, GCN propagation matrix and
//! node splits.
//!
//! Graphs are undirected and stored as a sorted, de-duplicated edge list with
//! `u < v`. Self-loops are never stored; the GCN normalization re-adds them.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An undirected node-classification graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    node_ids: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from raw parts.
    ///
    /// Edges may be given in any orientation and order; they are symmetrized,
    /// de-duplicated and sorted, and self-loops are dropped.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(Error::param(format!(
                "feature matrix has {} rows, expected {num_nodes}",
                features.nrows()
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::param(format!(
                "label vector has length {}, expected {num_nodes}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::param(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "graph features contain non-finite values".into(),
            ));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::param(format!(
                    "edge ({u}, {v}) has an endpoint outside 0..{num_nodes}"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        Ok(Self {
            num_nodes,
            edges: set.into_iter().collect(),
            features: features.as_standard_layout().into_owned(),
            labels,
            num_classes,
            node_ids: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Sorted, unique edges with `u < v`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feat_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Original-graph ids of an induced subgraph's nodes, in local order.
    pub fn node_ids(&self) -> Option<&[usize]> {
        self.node_ids.as_deref()
    }

    /// Returns a copy with the feature matrix replaced.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.num_nodes {
            return Err(Error::param(
                "replacement feature matrix has the wrong row count",
            ));
        }
        let mut g = self.clone();
        g.features = features.as_standard_layout().into_owned();
        Ok(g)
    }

    /// Returns a copy restricted to the given edge subset (used to hide
    /// held-out edges for link prediction).
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Graph::new(
            self.num_nodes,
            edges.iter().copied(),
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )?;
        g.node_ids = self.node_ids.clone();
        Ok(g)
    }

    /// Adjacency lists, each sorted ascending.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).is_ok()
    }

    /// Per-class label histogram over `ids`.
    pub fn label_counts(&self, ids: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in ids {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

fn normal_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal))
}

/// Stochastic block model with equal-sized blocks; labels are block indices.
pub fn generate_sbm(
    num_blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    seed: u64,
) -> Result<Graph> {
    generate_sbm_blocks(
        &vec![nodes_per_block; num_blocks],
        p_in,
        p_out,
        feat_dim,
        seed,
    )
}

/// Stochastic block model with arbitrary block sizes. Blocks occupy
/// consecutive id ranges in the given order.
pub fn generate_sbm_blocks(
    block_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    seed: u64,
) -> Result<Graph> {
    check_prob("p_in", p_in)?;
    check_prob("p_out", p_out)?;
    if p_out > p_in {
        return Err(Error::param(format!(
            "p_out = {p_out} exceeds p_in = {p_in}"
        )));
    }
    if feat_dim == 0 {
        return Err(Error::param("feat_dim must be at least 1"));
    }
    if block_sizes.is_empty() {
        return Err(Error::param("at least one block is required"));
    }
    let labels: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = normal_features(&mut rng, n, feat_dim);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, edges, features, labels, block_sizes.len())
}

/// Erdős–Rényi G(n, p) with standard-normal features and all labels 0.
pub fn generate_er(num_nodes: usize, p: f64, feat_dim: usize, seed: u64) -> Result<Graph> {
    check_prob("p", p)?;
    if feat_dim == 0 {
        return Err(Error::param("feat_dim must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = normal_features(&mut rng, num_nodes, feat_dim);
    let mut edges = Vec::new();
    for u in 0..num_nodes {
        for v in (u + 1)..num_nodes {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(num_nodes, edges, features, vec![0; num_nodes], 1)
}

/// A graph with one node, no edges and a standard-normal feature row.
pub fn generate_single_node(feat_dim: usize, seed: u64) -> Result<Graph> {
    generate_er(1, 0.0, feat_dim, seed)
}

/// Symmetric GCN propagation matrix `D^-1/2 (A + I) D^-1/2` in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entry lookup; zero when absent.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.indptr[row]..self.indptr[row + 1];
        match self.indices[range.clone()].binary_search(&col) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    /// Iterates `(col, value)` over one row.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[row]..self.indptr[row + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                out[[r, c]] = v;
            }
        }
        out
    }

    /// Sparse-dense product `self · rhs`. The matrix is symmetric, so this is
    /// also the transpose product used in backpropagation.
    pub fn matmul(&self, rhs: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(rhs.nrows(), self.n, "propagation shape mismatch");
        let cols = rhs.ncols();
        let mut out = Array2::<f64>::zeros((self.n, cols));
        let rhs = rhs.as_standard_layout();
        let src = rhs.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("fresh array is contiguous");
        for r in 0..self.n {
            let acc = &mut dst[r * cols..(r + 1) * cols];
            for (c, w) in self.row(r) {
                let from = &src[c * cols..(c + 1) * cols];
                for (a, &b) in acc.iter_mut().zip(from) {
                    *a += w * b;
                }
            }
        }
        out
    }
}

pub fn normalized_adjacency(g: &Graph) -> NormalizedAdjacency {
    let adj = g.neighbors();
    let inv_sqrt: Vec<f64> = adj
        .iter()
        .map(|nb| 1.0 / ((nb.len() + 1) as f64).sqrt())
        .collect();
    let mut indptr = Vec::with_capacity(g.num_nodes + 1);
    let mut indices = Vec::with_capacity(2 * g.num_edges() + g.num_nodes);
    let mut values = Vec::with_capacity(indices.capacity());
    indptr.push(0);
    for (u, nb) in adj.iter().enumerate() {
        let mut self_done = false;
        for &v in nb {
            if !self_done && v > u {
                indices.push(u);
                values.push(inv_sqrt[u] * inv_sqrt[u]);
                self_done = true;
            }
            indices.push(v);
            values.push(inv_sqrt[u] * inv_sqrt[v]);
        }
        if !self_done {
            indices.push(u);
            values.push(inv_sqrt[u] * inv_sqrt[u]);
        }
        indptr.push(indices.len());
    }
    NormalizedAdjacency {
        n: g.num_nodes,
        indptr,
        indices,
        values,
    }
}

/// Subgraph induced by `ids`, relabeled `0..ids.len()` in ascending original
/// order. Duplicate ids are collapsed.
pub fn induced_subgraph(g: &Graph, ids: &[usize]) -> Result<Graph> {
    let mut sorted: Vec<usize> = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&i| i >= g.num_nodes) {
        return Err(Error::param(format!(
            "node id {bad} out of range for a graph with {} nodes",
            g.num_nodes
        )));
    }
    let mut local = vec![usize::MAX; g.num_nodes];
    for (new, &old) in sorted.iter().enumerate() {
        local[old] = new;
    }
    let edges: Vec<(usize, usize)> = g
        .edges
        .iter()
        .filter_map(|&(u, v)| {
            let (a, b) = (local[u], local[v]);
            (a != usize::MAX && b != usize::MAX).then_some((a, b))
        })
        .collect();
    let features = g.features.select(Axis(0), &sorted);
    let labels = sorted.iter().map(|&i| g.labels[i]).collect();
    let original = match &g.node_ids {
        Some(parent) => sorted.iter().map(|&i| parent[i]).collect(),
        None => sorted.clone(),
    };
    let mut sub = Graph::new(sorted.len(), edges, features, labels, g.num_classes)?;
    sub.node_ids = Some(original);
    Ok(sub)
}

/// Disjoint train/validation/test node sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Uniformly random split: `round(train_frac·n)` train nodes,
/// `round(val_frac·n)` validation nodes, and the remainder as test.
pub fn split_nodes(g: &Graph, train_frac: f64, val_frac: f64, seed: u64) -> Result<Split> {
    split_count(g.num_nodes, train_frac, val_frac, seed)
}

pub(crate) fn split_count(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Split> {
    let in_unit = |x: f64| (0.0..=1.0).contains(&x);
    if !in_unit(train_frac) || !in_unit(val_frac) || train_frac + val_frac > 1.0 + 1e-12 {
        return Err(Error::param(format!(
            "split fractions train={train_frac}, val={val_frac} must lie in [0, 1] and sum to at most 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_frac * n as f64).round() as usize).min(n);
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train_ids: sorted(&order[..n_train]),
        val_ids: sorted(&order[n_train..n_train + n_val]),
        test_ids: sorted(&order[n_train + n_val..]),
    })
}

/// On-disk graph document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub feat_dim: usize,
    pub num_classes: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl From<&Graph> for GraphFile {
    fn from(g: &Graph) -> Self {
        GraphFile {
            num_nodes: g.num_nodes,
            feat_dim: g.feat_dim(),
            num_classes: g.num_classes,
            edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
            features: g.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            labels: g.labels.clone(),
        }
    }
}

impl TryFrom<GraphFile> for Graph {
    type Error = Error;

    fn try_from(f: GraphFile) -> Result<Self> {
        if f.features.len() != f.num_nodes {
            return Err(Error::Format(format!(
                "{} feature rows for {} nodes",
                f.features.len(),
                f.num_nodes
            )));
        }
        if let Some((i, row)) = f
            .features
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != f.feat_dim)
        {
            return Err(Error::Format(format!(
                "feature row {i} has {} entries, expected {}",
                row.len(),
                f.feat_dim
            )));
        }
        let flat: Vec<f64> = f.features.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((f.num_nodes, f.feat_dim), flat)
            .map_err(|e| Error::Format(e.to_string()))?;
        Graph::new(
            f.num_nodes,
            f.edges.into_iter().map(|[u, v]| (u, v)),
            features,
            f.labels,
            f.num_classes,
        )
    }
}

pub fn read_graph(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: GraphFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Graph::try_from(doc)
}

pub fn write_graph(g: &Graph, path: &Path) -> Result<()> {
    let text =
        serde_json::to_string(&GraphFile::from(g)).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
