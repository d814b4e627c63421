//! Splitting a global graph into client node sets, and the structure metrics
//! computed over such splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Disjoint,
    Overlapping,
    Random,
    Imbalanced,
}

impl PartitionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionMode::Disjoint => "disjoint",
            PartitionMode::Overlapping => "overlapping",
            PartitionMode::Random => "random",
            PartitionMode::Imbalanced => "imbalanced",
        }
    }

    pub fn is_overlapping(self) -> bool {
        self == PartitionMode::Overlapping
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(PartitionMode::Disjoint),
            "overlapping" => Ok(PartitionMode::Overlapping),
            "random" => Ok(PartitionMode::Random),
            "imbalanced" => Ok(PartitionMode::Imbalanced),
            other => Err(Error::Format(format!(
                "unknown partition mode {other:?}; expected disjoint, overlapping, random or imbalanced"
            ))),
        }
    }
}

/// Node-id sets over the global graph, one per client. Each set is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub mode: PartitionMode,
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(mode: PartitionMode, mut clients: Vec<Vec<usize>>) -> Self {
        for c in &mut clients {
            c.sort_unstable();
            c.dedup();
        }
        Partition { mode, clients }
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// Checks the mode's invariants against a graph with `num_nodes` nodes.
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::param("partition has no clients"));
        }
        let mut seen = vec![0usize; num_nodes];
        for (i, c) in self.clients.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::param(format!("client {i} owns no nodes")));
            }
            for &v in c {
                if v >= num_nodes {
                    return Err(Error::param(format!(
                        "client {i} references node {v} outside 0..{num_nodes}"
                    )));
                }
                seen[v] += 1;
            }
        }
        if !self.mode.is_overlapping() {
            if let Some(v) = seen.iter().position(|&c| c != 1) {
                return Err(Error::param(format!(
                    "{} partition covers node {v} {} times",
                    self.mode, seen[v]
                )));
            }
        }
        Ok(())
    }

    /// Client membership list for each node.
    pub fn memberships(&self, num_nodes: usize) -> Vec<Vec<usize>> {
        let mut memb = vec![Vec::new(); num_nodes];
        for (i, c) in self.clients.iter().enumerate() {
            for &v in c {
                memb[v].push(i);
            }
        }
        memb
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Partition = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Partition::new(p.mode, p.clients))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn check_k(g: &Graph, k: usize) -> Result<()> {
    if k == 0 || k > g.num_nodes() {
        return Err(Error::param(format!(
            "cannot split {} nodes into {k} non-empty parts",
            g.num_nodes()
        )));
    }
    Ok(())
}

/// Upper bound on part size honoured by [`partition_balanced`].
pub fn balance_cap(n: usize, k: usize) -> usize {
    (1.3 * n as f64 / k as f64).ceil() as usize
}

/// Lower bound on part size kept by refinement, mirroring [`balance_cap`].
pub fn balance_floor(n: usize, k: usize) -> usize {
    ((0.7 * n as f64 / k as f64).floor() as usize).max(1)
}

/// Balanced k-way partition with low edge cut.
///
/// Parts are grown one at a time by greedy graph growing: start from the
/// unassigned node with the fewest edges into already-grown parts, then keep
/// absorbing the unassigned node with the most edges into the growing part
/// until it reaches its share of `n / k`. A few seeded restarts keep the
/// lowest cut, then boundary refinement moves nodes to the part holding most
/// of their neighbours while every part stays between [`balance_floor`] and
/// [`balance_cap`].
pub fn partition_balanced(g: &Graph, k: usize, seed: u64) -> Result<Partition> {
    check_k(g, k)?;
    let labels = balanced_labels(g, k, seed);
    Ok(labels_to_partition(&labels, k, PartitionMode::Disjoint))
}

const GROWTH_RESTARTS: usize = 4;
const REFINE_PASSES: usize = 8;

fn balanced_labels(g: &Graph, k: usize, seed: u64) -> Vec<usize> {
    let n = g.num_nodes();
    let adj = g.neighbors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec<usize>)> = None;
    for _ in 0..GROWTH_RESTARTS {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut labels = grow_parts(&adj, k, &order);
        refine(
            &adj,
            &mut labels,
            k,
            (balance_floor(n, k), balance_cap(n, k)),
            &order,
        );
        let cut = edge_cut(g, &labels);
        if best.as_ref().is_none_or(|(c, _)| cut < *c) {
            best = Some((cut, labels));
        }
    }
    best.expect("at least one restart").1
}

fn grow_parts(adj: &[Vec<usize>], k: usize, order: &[usize]) -> Vec<usize> {
    let n = adj.len();
    // rank breaks ties between equally good candidates.
    let mut rank = vec![0; n];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    let mut labels = vec![usize::MAX; n];
    // Edges from each node into the union of finished parts.
    let mut outside = vec![0usize; n];
    for part in 0..k {
        let target = n / k + usize::from(part < n % k);
        let mut inside = vec![0usize; n];
        let mut size = 0;
        while size < target {
            let pick = if size == 0 {
                (0..n)
                    .filter(|&v| labels[v] == usize::MAX)
                    .min_by_key(|&v| (outside[v], usize::MAX - adj[v].len(), rank[v]))
            } else {
                (0..n)
                    .filter(|&v| labels[v] == usize::MAX)
                    .min_by_key(|&v| (usize::MAX - inside[v], outside[v], rank[v]))
            };
            let v = pick.expect("targets sum to n");
            labels[v] = part;
            size += 1;
            for &u in &adj[v] {
                inside[u] += 1;
            }
        }
        for v in 0..n {
            if labels[v] == part {
                for &u in &adj[v] {
                    outside[u] += 1;
                }
            }
        }
    }
    labels
}

fn refine(
    adj: &[Vec<usize>],
    labels: &mut [usize],
    k: usize,
    (floor, cap): (usize, usize),
    order: &[usize],
) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    let mut conn = vec![0usize; k];
    for _ in 0..REFINE_PASSES {
        let mut moved = false;
        for &v in order {
            let from = labels[v];
            if sizes[from] <= floor || adj[v].is_empty() {
                continue;
            }
            conn.iter_mut().for_each(|c| *c = 0);
            for &u in &adj[v] {
                conn[labels[u]] += 1;
            }
            let mut best = from;
            for p in 0..k {
                if p != from && sizes[p] < cap && conn[p] > conn[best] {
                    best = p;
                }
            }
            if best != from {
                labels[v] = best;
                sizes[from] -= 1;
                sizes[best] += 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Number of edges whose endpoints carry different labels.
pub fn edge_cut(g: &Graph, labels: &[usize]) -> usize {
    g.edges()
        .iter()
        .filter(|&&(u, v)| labels[u] != labels[v])
        .count()
}

fn labels_to_partition(labels: &[usize], k: usize, mode: PartitionMode) -> Partition {
    let mut clients = vec![Vec::new(); k];
    for (v, &l) in labels.iter().enumerate() {
        clients[l].push(v);
    }
    Partition::new(mode, clients)
}

/// Uniformly random balanced disjoint assignment; sizes differ by at most one.
pub fn partition_random(g: &Graph, k: usize, seed: u64) -> Result<Partition> {
    check_k(g, k)?;
    let mut order: Vec<usize> = (0..g.num_nodes()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut clients = vec![Vec::new(); k];
    for (i, v) in order.into_iter().enumerate() {
        clients[i % k].push(v);
    }
    Ok(Partition::new(PartitionMode::Random, clients))
}

/// Modularity `Σ_c (e_c / m − (d_c / 2m)²)` of a node labeling; 0 for an
/// edgeless graph.
pub fn modularity(g: &Graph, labels: &[usize]) -> f64 {
    let m = g.num_edges() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let k = labels.iter().max().map_or(0, |&x| x + 1);
    let mut inside = vec![0.0; k];
    let mut degree = vec![0.0; k];
    for &(u, v) in g.edges() {
        degree[labels[u]] += 1.0;
        degree[labels[v]] += 1.0;
        if labels[u] == labels[v] {
            inside[labels[u]] += 1.0;
        }
    }
    inside
        .iter()
        .zip(&degree)
        .map(|(e, d)| e / m - (d / (2.0 * m)).powi(2))
        .sum()
}

/// Weighted symmetric graph used during Louvain aggregation. `self_weight[i]`
/// is the adjacency diagonal, which counts internal edges twice.
struct LouvainLevel {
    adj: Vec<Vec<(usize, f64)>>,
    self_weight: Vec<f64>,
}

impl LouvainLevel {
    fn from_graph(g: &Graph) -> Self {
        let mut adj = vec![Vec::new(); g.num_nodes()];
        for &(u, v) in g.edges() {
            adj[u].push((v, 1.0));
            adj[v].push((u, 1.0));
        }
        LouvainLevel {
            adj,
            self_weight: vec![0.0; g.num_nodes()],
        }
    }

    fn degree(&self, i: usize) -> f64 {
        self.self_weight[i] + self.adj[i].iter().map(|(_, w)| w).sum::<f64>()
    }

    /// One local-moving phase. Returns community ids (compacted) and whether
    /// any node moved.
    fn local_moving(&self, two_m: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        let n = self.adj.len();
        let degree: Vec<f64> = (0..n).map(|i| self.degree(i)).collect();
        let mut comm: Vec<usize> = (0..n).collect();
        let mut total = degree.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut any_move = false;
        let mut links: BTreeMap<usize, f64> = BTreeMap::new();
        loop {
            let mut moved = false;
            for &i in &order {
                let own = comm[i];
                links.clear();
                for &(j, w) in &self.adj[i] {
                    *links.entry(comm[j]).or_insert(0.0) += w;
                }
                total[own] -= degree[i];
                let gain = |c: usize, w_in: f64| w_in - total[c] * degree[i] / two_m;
                let mut best = own;
                let mut best_gain = gain(own, links.get(&own).copied().unwrap_or(0.0));
                for (&c, &w_in) in &links {
                    let g = gain(c, w_in);
                    if g > best_gain + 1e-12 {
                        best = c;
                        best_gain = g;
                    }
                }
                total[best] += degree[i];
                if best != own {
                    comm[i] = best;
                    moved = true;
                    any_move = true;
                }
            }
            if !moved {
                break;
            }
        }
        (compact(&comm), any_move)
    }

    fn aggregate(&self, comm: &[usize]) -> LouvainLevel {
        let k = comm.iter().max().map_or(0, |&c| c + 1);
        let mut self_weight = vec![0.0; k];
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
        for (i, nbrs) in self.adj.iter().enumerate() {
            let ci = comm[i];
            self_weight[ci] += self.self_weight[i];
            for &(j, w) in nbrs {
                let cj = comm[j];
                if ci == cj {
                    self_weight[ci] += w;
                } else {
                    *maps[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        LouvainLevel {
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_weight,
        }
    }
}

fn compact(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Louvain community detection at resolution 1.
///
/// Returns the per-node community labels and the modularity after every
/// aggregation level (non-decreasing). The seed fixes the node visiting order.
pub fn louvain(g: &Graph, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let n = g.num_nodes();
    let mut labels: Vec<usize> = (0..n).collect();
    let two_m = 2.0 * g.num_edges() as f64;
    if two_m == 0.0 {
        return (labels, vec![0.0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = LouvainLevel::from_graph(g);
    let mut history = vec![modularity(g, &labels)];
    loop {
        let (comm, moved) = level.local_moving(two_m, &mut rng);
        if !moved {
            break;
        }
        for l in labels.iter_mut() {
            *l = comm[*l];
        }
        history.push(modularity(g, &labels));
        level = level.aggregate(&comm);
    }
    (labels, history)
}

/// Louvain communities coerced to exactly `k` disjoint parts: the two
/// smallest communities are merged while there are too many, and the largest
/// is bisected with [`partition_balanced`] while there are too few.
pub fn partition_louvain(g: &Graph, k: usize, seed: u64) -> Result<Partition> {
    check_k(g, k)?;
    let (labels, _) = louvain(g, seed);
    let mut parts = labels_to_partition(
        &labels,
        labels.iter().max().map_or(0, |&m| m + 1),
        PartitionMode::Disjoint,
    )
    .clients;
    while parts.len() > k {
        // Stable order: by size, then by smallest member.
        parts.sort_by_key(|p| (p.len(), p[0]));
        let a = parts.remove(0);
        parts[0].extend(a);
        parts[0].sort_unstable();
    }
    let mut split_seed = seed;
    while parts.len() < k {
        let (idx, _) = parts
            .iter()
            .enumerate()
            .max_by_key(|(i, p)| (p.len(), usize::MAX - i))
            .expect("non-empty");
        let largest = parts.swap_remove(idx);
        let sub = induced_subgraph(g, &largest)?;
        split_seed = split_seed.wrapping_add(1);
        let halves = partition_balanced(&sub, 2, split_seed)?;
        for half in halves.clients {
            parts.push(half.into_iter().map(|i| largest[i]).collect());
        }
    }
    parts.sort_by_key(|p| p[0]);
    Ok(Partition::new(PartitionMode::Disjoint, parts))
}

/// Consecutive node-id ranges of `size` nodes; the last range may be shorter.
///
/// Generators emit nodes block by block, so on a block model this hands each
/// client a piece of a single community.
pub fn partition_chunks(num_nodes: usize, size: usize) -> Result<Partition> {
    if size == 0 || num_nodes == 0 {
        return Err(Error::param("chunk size and node count must be positive"));
    }
    let ids: Vec<usize> = (0..num_nodes).collect();
    Ok(Partition::new(
        PartitionMode::Disjoint,
        ids.chunks(size).map(<[usize]>::to_vec).collect(),
    ))
}

/// Overlapping clients: a balanced split into `base_parts`, then
/// `samples_per_part` independent random subsets of `round(node_frac·|part|)`
/// nodes from each part.
pub fn make_overlapping(
    g: &Graph,
    base_parts: usize,
    samples_per_part: usize,
    node_frac: f64,
    seed: u64,
) -> Result<Partition> {
    if samples_per_part == 0 {
        return Err(Error::param("samples_per_part must be at least 1"));
    }
    if !(node_frac > 0.0 && node_frac <= 1.0) {
        return Err(Error::param(format!(
            "node_frac = {node_frac} must lie in (0, 1]"
        )));
    }
    let base = partition_balanced(g, base_parts, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f76_6572_6c61_7021);
    let mut clients = Vec::with_capacity(base_parts * samples_per_part);
    for (b, part) in base.clients.iter().enumerate() {
        let size = (node_frac * part.len() as f64).round() as usize;
        if size == 0 {
            return Err(Error::param(format!(
                "base part {b} with {} nodes yields an empty sample at node_frac {node_frac}",
                part.len()
            )));
        }
        for _ in 0..samples_per_part {
            let picked = index::sample(&mut rng, part.len(), size);
            clients.push(picked.into_iter().map(|i| part[i]).collect());
        }
    }
    Ok(Partition::new(PartitionMode::Overlapping, clients))
}

/// Splits into `fine_parts` balanced parts and merges consecutive runs of
/// them per `group_sizes`; fine parts left over stay single clients.
pub fn make_imbalanced(
    g: &Graph,
    fine_parts: usize,
    group_sizes: &[usize],
    seed: u64,
) -> Result<Partition> {
    if group_sizes.contains(&0) {
        return Err(Error::param("group sizes must be positive"));
    }
    let grouped: usize = group_sizes.iter().sum();
    if grouped > fine_parts {
        return Err(Error::param(format!(
            "groups cover {grouped} fine parts but only {fine_parts} exist"
        )));
    }
    let fine = partition_balanced(g, fine_parts, seed)?.clients;
    let mut clients = Vec::new();
    let mut next = 0;
    for &size in group_sizes {
        clients.push(fine[next..next + size].concat());
        next += size;
    }
    clients.extend(fine[next..].iter().cloned());
    Ok(Partition::new(PartitionMode::Imbalanced, clients))
}

/// Symmetric K×K count of global edges joining different clients' node sets.
///
/// For overlapping partitions an edge whose endpoints both belong to clients
/// `i` and `j` is visible to both and is not counted for `(i, j)`.
pub fn missing_edges(g: &Graph, p: &Partition) -> Array2<u64> {
    let k = p.num_clients();
    let memb = p.memberships(g.num_nodes());
    let mut out = Array2::<u64>::zeros((k, k));
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &(u, v) in g.edges() {
        pairs.clear();
        for &i in &memb[u] {
            for &j in &memb[v] {
                if i != j {
                    pairs.push((i.min(j), i.max(j)));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        for &(i, j) in &pairs {
            let shared = memb[u].contains(&i)
                && memb[v].contains(&i)
                && memb[u].contains(&j)
                && memb[v].contains(&j);
            if !shared {
                out[[i, j]] += 1;
                out[[j, i]] += 1;
            }
        }
    }
    out
}

/// Empirical label distribution of one node set.
pub fn label_distribution(labels: &[usize], ids: &[usize], num_classes: usize) -> Vec<f64> {
    let mut dist = vec![0.0; num_classes];
    for &i in ids {
        dist[labels[i]] += 1.0;
    }
    let total = ids.len().max(1) as f64;
    dist.iter_mut().for_each(|x| *x /= total);
    dist
}

/// Jensen–Shannon divergence with base-2 logarithms, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).log2())
            .sum()
    };
    (0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)).clamp(0.0, 1.0)
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median pairwise JS divergence between client label distributions.
pub fn heterogeneity(p: &Partition, labels: &[usize], num_classes: usize) -> Result<f64> {
    if p.num_clients() < 2 {
        return Err(Error::param("heterogeneity needs at least two clients"));
    }
    let dists: Vec<Vec<f64>> = p
        .clients
        .iter()
        .map(|c| label_distribution(labels, c, num_classes))
        .collect();
    let mut js = Vec::with_capacity(dists.len() * (dists.len() - 1) / 2);
    for i in 0..dists.len() {
        for j in (i + 1)..dists.len() {
            js.push(js_divergence(&dists[i], &dists[j]));
        }
    }
    Ok(median(&mut js))
}

/// Mean local clustering coefficient `2T(v) / (deg(v)(deg(v) − 1))`, with
/// zero for nodes of degree below two.
pub fn clustering_coefficient(g: &Graph) -> f64 {
    let n = g.num_nodes();
    if n == 0 {
        return 0.0;
    }
    let adj = g.neighbors();
    let mut total = 0.0;
    for nbrs in &adj {
        let d = nbrs.len();
        if d < 2 {
            continue;
        }
        let mut closed = 0usize;
        for (a, &x) in nbrs.iter().enumerate() {
            for &y in &nbrs[a + 1..] {
                if adj[x].binary_search(&y).is_ok() {
                    closed += 1;
                }
            }
        }
        total += 2.0 * closed as f64 / (d * (d - 1)) as f64;
    }
    total / n as f64
}

/// Summary written next to a partition file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub sizes: Vec<usize>,
    pub edges_per_client: Vec<usize>,
    pub clustering: Vec<f64>,
    pub heterogeneity: Option<f64>,
    pub total_missing_edges: u64,
}

pub fn partition_metrics(g: &Graph, p: &Partition) -> Result<(PartitionMetrics, Array2<u64>)> {
    let mut edges = Vec::with_capacity(p.num_clients());
    let mut clustering = Vec::with_capacity(p.num_clients());
    for c in &p.clients {
        let sub = induced_subgraph(g, c)?;
        edges.push(sub.num_edges());
        clustering.push(clustering_coefficient(&sub));
    }
    let missing = missing_edges(g, p);
    let heterogeneity = if p.num_clients() >= 2 {
        Some(heterogeneity(p, g.labels(), g.num_classes())?)
    } else {
        None
    };
    let total_missing = (0..p.num_clients())
        .flat_map(|i| ((i + 1)..p.num_clients()).map(move |j| (i, j)))
        .map(|(i, j)| missing[[i, j]])
        .sum();
    Ok((
        PartitionMetrics {
            mode: p.mode,
            num_clients: p.num_clients(),
            sizes: p.sizes(),
            edges_per_client: edges,
            clustering,
            heterogeneity,
            total_missing_edges: total_missing,
        },
        missing,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{from_edges, path3, triangle};
    use crate::graph::{generate_er, generate_sbm};
    use proptest::prelude::*;

    fn assert_disjoint_cover(p: &Partition, n: usize) {
        let mut all: Vec<usize> = p.clients.concat();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(p.clients.iter().all(|c| !c.is_empty()));
    }

    fn brute_missing(g: &Graph, p: &Partition) -> Array2<u64> {
        let k = p.num_clients();
        let mut out = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let (a, b) = (&p.clients[i], &p.clients[j]);
                for &(u, v) in g.edges() {
                    let crosses =
                        (a.contains(&u) && b.contains(&v)) || (a.contains(&v) && b.contains(&u));
                    let in_both =
                        a.contains(&u) && a.contains(&v) && b.contains(&u) && b.contains(&v);
                    if crosses && !in_both {
                        out[[i, j]] += 1;
                    }
                }
            }
        }
        out
    }

    fn entropy2(p: &[f64]) -> f64 {
        -p.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.log2())
            .sum::<f64>()
    }

    fn js_by_entropy(p: &[f64], q: &[f64]) -> f64 {
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
        entropy2(&m) - 0.5 * (entropy2(p) + entropy2(q))
    }

    fn brute_clustering(g: &Graph) -> f64 {
        let n = g.num_nodes();
        let mut sum = 0.0;
        for v in 0..n {
            let nb: Vec<usize> = (0..n).filter(|&u| g.has_edge(u, v)).collect();
            let d = nb.len();
            if d < 2 {
                continue;
            }
            let mut t = 0;
            for a in 0..n {
                for b in (a + 1)..n {
                    if g.has_edge(v, a) && g.has_edge(v, b) && g.has_edge(a, b) {
                        t += 1;
                    }
                }
            }
            sum += 2.0 * t as f64 / (d * (d - 1)) as f64;
        }
        sum / n as f64
    }

    #[test]
    fn chunks_cover_in_order() {
        let p = partition_chunks(7, 3).unwrap();
        assert_eq!(p.clients, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
        p.validate(7).unwrap();
        assert!(partition_chunks(7, 0).is_err());
    }

    #[test]
    fn balanced_extremes() {
        let g = generate_er(30, 0.2, 2, 3).unwrap();
        let one = partition_balanced(&g, 1, 0).unwrap();
        assert_eq!(one.clients, vec![(0..30).collect::<Vec<_>>()]);
        let singles = partition_balanced(&g, 30, 0).unwrap();
        assert_eq!(singles.num_clients(), 30);
        assert!(singles.clients.iter().all(|c| c.len() == 1));
        assert_disjoint_cover(&singles, 30);
        assert!(matches!(
            partition_balanced(&g, 31, 0),
            Err(Error::Param(_))
        ));
        assert!(partition_balanced(&g, 0, 0).is_err());
    }

    #[test]
    fn balanced_recovers_easy_communities() {
        for seed in 0..3 {
            let g = generate_sbm(2, 60, 0.3, 0.01, 2, seed).unwrap();
            let p = partition_balanced(&g, 2, seed).unwrap();
            assert_disjoint_cover(&p, 120);
            for block in 0..2 {
                let best = p
                    .clients
                    .iter()
                    .map(|c| c.iter().filter(|&&v| g.labels()[v] == block).count())
                    .max()
                    .unwrap();
                assert!(
                    best as f64 >= 0.9 * 60.0,
                    "seed {seed} block {block}: {best}"
                );
            }
        }
    }

    #[test]
    fn balanced_is_deterministic() {
        let g = generate_er(80, 0.08, 2, 5).unwrap();
        assert_eq!(
            partition_balanced(&g, 5, 9).unwrap(),
            partition_balanced(&g, 5, 9).unwrap()
        );
    }

    #[test]
    fn louvain_separates_components() {
        let g = from_edges(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]);
        let p = partition_louvain(&g, 2, 1).unwrap();
        assert_eq!(p.clients, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        let whole = partition_louvain(&g, 1, 1).unwrap();
        assert_eq!(whole.clients, vec![(0..6).collect::<Vec<_>>()]);
    }

    #[test]
    fn louvain_beats_random_modularity() {
        for seed in 0..4 {
            let g = generate_sbm(4, 25, 0.4, 0.02, 2, seed).unwrap();
            let lv = partition_louvain(&g, 4, seed).unwrap();
            let rnd = partition_random(&g, 4, seed).unwrap();
            let as_labels = |p: &Partition| {
                let mut l = vec![0; g.num_nodes()];
                for (i, c) in p.clients.iter().enumerate() {
                    c.iter().for_each(|&v| l[v] = i);
                }
                l
            };
            let q_lv = modularity(&g, &as_labels(&lv));
            let q_rnd = modularity(&g, &as_labels(&rnd));
            assert!(q_lv >= q_rnd, "{q_lv} < {q_rnd}");
        }
    }

    #[test]
    fn louvain_history_is_monotone() {
        for seed in 0..5 {
            let g = generate_sbm(5, 20, 0.3, 0.03, 2, seed).unwrap();
            let (labels, history) = louvain(&g, seed);
            for w in history.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "{history:?}");
            }
            assert!((history.last().unwrap() - modularity(&g, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn louvain_splits_when_too_few_communities() {
        let g = triangle();
        let p = partition_louvain(&g, 3, 0).unwrap();
        assert_eq!(p.num_clients(), 3);
        assert_disjoint_cover(&p, 3);
    }

    #[test]
    fn modularity_formula_hand_case() {
        // Two triangles joined by one edge, split at the bridge:
        // m = 7, each side e_c = 3, d_c = 7.
        let g = from_edges(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)]);
        let q = modularity(&g, &[0, 0, 0, 1, 1, 1]);
        let expected = 2.0 * (3.0 / 7.0 - 0.25);
        assert!((q - expected).abs() < 1e-12);
    }

    #[test]
    fn random_partition_is_balanced() {
        let g = generate_er(103, 0.05, 2, 0).unwrap();
        let one = partition_random(&g, 1, 0).unwrap();
        assert_eq!(one.clients[0].len(), 103);
        let p = partition_random(&g, 10, 4).unwrap();
        assert_disjoint_cover(&p, 103);
        let sizes = p.sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn random_partition_keeps_about_one_kth_of_edges() {
        // CiteSeer-scale edge density; each edge survives with prob ≈ 1/k.
        let g = generate_er(3000, 0.0006, 2, 8).unwrap();
        let p = partition_random(&g, 10, 8).unwrap();
        let kept: usize = p
            .clients
            .iter()
            .map(|c| induced_subgraph(&g, c).unwrap().num_edges())
            .sum();
        let m = g.num_edges() as f64;
        // Exact survival probability is (n/k − 1)/(n − 1) for balanced parts.
        let prob = (300.0 - 1.0) / (3000.0 - 1.0);
        let sd = (m * prob * (1.0 - prob)).sqrt();
        assert!(
            (kept as f64 - m * prob).abs() < 4.0 * sd,
            "kept {kept} of {m}"
        );
    }

    #[test]
    fn overlapping_counts_and_sizes() {
        let g = generate_sbm(2, 40, 0.3, 0.02, 2, 1).unwrap();
        let p = make_overlapping(&g, 2, 5, 0.5, 3).unwrap();
        assert_eq!(p.num_clients(), 10);
        assert_eq!(p.mode, PartitionMode::Overlapping);
        assert!(p.clients.iter().all(|c| c.len() == 20));
        p.validate(80).unwrap();

        let one = make_overlapping(&g, 1, 1, 1.0, 3).unwrap();
        assert_eq!(one.clients, vec![(0..80).collect::<Vec<_>>()]);

        assert!(make_overlapping(&g, 2, 5, 0.0, 3).is_err());
        assert!(make_overlapping(&g, 2, 0, 0.5, 3).is_err());
        assert!(make_overlapping(&g, 80, 1, 0.4, 3).is_err());
    }

    #[test]
    fn overlapping_pairs_share_a_quarter_of_their_part() {
        // Two independent half-samples of a part of size s share s/4 nodes
        // in expectation (hypergeometric mean (s/2)·(s/2)/s).
        let g = generate_er(600, 0.01, 2, 2).unwrap();
        let p = make_overlapping(&g, 6, 5, 0.5, 11).unwrap();
        assert_eq!(p.num_clients(), 30);
        let base = partition_balanced(&g, 6, 11).unwrap();
        let mut ratios = Vec::new();
        for b in 0..6 {
            let part_size = base.clients[b].len() as f64;
            for i in 0..5 {
                for j in (i + 1)..5 {
                    let (x, y) = (&p.clients[b * 5 + i], &p.clients[b * 5 + j]);
                    let shared = x.iter().filter(|v| y.binary_search(v).is_ok()).count();
                    ratios.push(shared as f64 / part_size);
                }
            }
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 0.25).abs() < 0.02, "mean overlap {mean}");
    }

    #[test]
    fn imbalanced_grouping() {
        let g = generate_er(200, 0.05, 2, 4).unwrap();
        let p = make_imbalanced(&g, 20, &[5, 3, 2, 2, 2], 1).unwrap();
        assert_eq!(p.num_clients(), 11);
        let fine = partition_balanced(&g, 20, 1).unwrap();
        assert_eq!(
            p.clients[0].len(),
            fine.clients[..5].iter().map(Vec::len).sum::<usize>()
        );
        assert_disjoint_cover(&p, 200);

        let same = make_imbalanced(&g, 4, &[1, 1, 1, 1], 1).unwrap();
        assert_eq!(same.clients, partition_balanced(&g, 4, 1).unwrap().clients);

        let halves = make_imbalanced(&g, 6, &[3, 3], 1).unwrap();
        assert_eq!(halves.num_clients(), 2);
        let fine6 = partition_balanced(&g, 6, 1).unwrap().sizes();
        assert_eq!(
            halves.sizes(),
            vec![fine6[..3].iter().sum::<usize>(), fine6[3..].iter().sum()]
        );
        assert!(halves.sizes().iter().all(|&s| s <= 3 * balance_cap(200, 6)));

        assert!(make_imbalanced(&g, 4, &[2, 0], 1).is_err());
        assert!(make_imbalanced(&g, 4, &[3, 2], 1).is_err());
    }

    #[test]
    fn missing_edge_hand_cases() {
        let g = triangle();
        let single = Partition::new(PartitionMode::Disjoint, vec![vec![0, 1, 2]]);
        assert_eq!(missing_edges(&g, &single), Array2::<u64>::zeros((1, 1)));

        let p = Partition::new(PartitionMode::Disjoint, vec![vec![0, 1], vec![2]]);
        assert_eq!(
            missing_edges(&path3(), &p),
            ndarray::arr2(&[[0, 1], [1, 0]])
        );
    }

    #[test]
    fn missing_edges_overlap_semantics() {
        // Edge (0,1) is inside both clients, (1,2) crosses.
        let g = path3();
        let p = Partition::new(PartitionMode::Overlapping, vec![vec![0, 1], vec![0, 1, 2]]);
        // (1,2): 1 ∈ A, 2 ∈ B, not in both → counted. (0,1): in both → skipped.
        assert_eq!(missing_edges(&g, &p), ndarray::arr2(&[[0, 1], [1, 0]]));
        assert_eq!(missing_edges(&g, &p), brute_missing(&g, &p));
    }

    #[test]
    fn heterogeneity_cases() {
        let labels = vec![0, 1, 0, 1, 0, 0, 1, 1];
        let same = Partition::new(
            PartitionMode::Disjoint,
            vec![vec![0, 1], vec![2, 3], vec![4, 6]],
        );
        assert_eq!(heterogeneity(&same, &labels, 2).unwrap(), 0.0);

        let disjoint = Partition::new(PartitionMode::Disjoint, vec![vec![0, 2], vec![1, 3]]);
        assert!((heterogeneity(&disjoint, &labels, 2).unwrap() - 1.0).abs() < 1e-15);

        let js = js_divergence(&[0.5, 0.5], &[1.0, 0.0]);
        let oracle = js_by_entropy(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((js - oracle).abs() < 1e-12);
        assert!((js - 0.311_278_124_459_132_8).abs() < 1e-12);

        let single = Partition::new(PartitionMode::Disjoint, vec![vec![0, 1]]);
        assert!(heterogeneity(&single, &labels, 2).is_err());
    }

    #[test]
    fn clustering_cases() {
        assert_eq!(clustering_coefficient(&triangle()), 1.0);
        assert_eq!(clustering_coefficient(&path3()), 0.0);
        let chord = from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)]);
        let c = clustering_coefficient(&chord);
        assert!((c - brute_clustering(&chord)).abs() < 1e-15);
        // Nodes 0 and 2: 2 of 3 pairs closed; nodes 1 and 3: 1 of 1.
        assert!((c - (2.0 / 3.0 * 2.0 + 2.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn partition_file_round_trip() {
        let p = Partition::new(PartitionMode::Overlapping, vec![vec![2, 0], vec![1, 2]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"mode\":\"overlapping\""));
        assert_eq!(Partition::read(&path).unwrap(), p);
    }

    #[test]
    fn metrics_sidecar() {
        let g = generate_sbm(2, 10, 0.6, 0.1, 2, 0).unwrap();
        let p = partition_balanced(&g, 2, 0).unwrap();
        let (m, missing) = partition_metrics(&g, &p).unwrap();
        assert_eq!(m.sizes.iter().sum::<usize>(), 20);
        assert_eq!(m.total_missing_edges, missing[[0, 1]]);
        assert_eq!(
            m.edges_per_client.iter().sum::<usize>() as u64 + m.total_missing_edges,
            g.num_edges() as u64
        );
    }

    fn arb_graph_and_partition(max_n: usize) -> impl Strategy<Value = (Graph, Partition)> {
        (
            2usize..max_n,
            any::<u64>(),
            0.05f64..0.6,
            1usize..5,
            any::<bool>(),
        )
            .prop_map(|(n, seed, p, k, overlap)| {
                let g = generate_er(n, p, 1, seed).unwrap();
                let k = k.min(n);
                let part = if overlap {
                    make_overlapping(&g, k.min(n / 2).max(1), 2, 0.6, seed).unwrap()
                } else {
                    partition_random(&g, k, seed).unwrap()
                };
                (g, part)
            })
    }

    proptest! {
        #[test]
        fn missing_edges_match_brute_force((g, p) in arb_graph_and_partition(50)) {
            let fast = missing_edges(&g, &p);
            prop_assert_eq!(&fast, &brute_missing(&g, &p));
            prop_assert_eq!(&fast, &fast.t());
            for i in 0..p.num_clients() {
                prop_assert_eq!(fast[[i, i]], 0);
            }
            if !p.mode.is_overlapping() {
                let total: u64 = fast.iter().sum::<u64>() / 2;
                prop_assert!(total <= g.num_edges() as u64);
            }
        }

        #[test]
        fn balanced_partition_respects_size_bounds(n in 8usize..80, seed in any::<u64>(), kfrac in 0.0f64..1.0) {
            // Connected: a ring plus random chords.
            let extra = generate_er(n, 0.1, 1, seed).unwrap();
            let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n))
                .chain(extra.edges().iter().copied()).collect();
            let g = Graph::new(n, edges, extra.features().clone(), vec![0; n], 1).unwrap();
            let k = 1 + (kfrac * (n / 2 - 1) as f64) as usize;
            let p = partition_balanced(&g, k, seed).unwrap();
            assert_disjoint_cover(&p, n);
            prop_assert_eq!(p.num_clients(), k);
            prop_assert!(p.sizes().into_iter().all(|s| (balance_floor(n, k)..=balance_cap(n, k)).contains(&s)));
        }

        #[test]
        fn heterogeneity_is_order_invariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
            let g = generate_sbm(3, 10, 0.3, 0.1, 1, seed).unwrap();
            let p = partition_random(&g, 5, seed).unwrap();
            let mut shuffled = p.clients.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let q = Partition::new(p.mode, shuffled);
            let a = heterogeneity(&p, g.labels(), 3).unwrap();
            let b = heterogeneity(&q, g.labels(), 3).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn js_matches_entropy_form(a in proptest::collection::vec(0.0f64..1.0, 4), b in proptest::collection::vec(0.0f64..1.0, 4)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum::<f64>() + 1e-9; v.iter().map(|x| (x + 1e-9 / 4.0) / s).collect::<Vec<_>>() };
            let (p, q) = (norm(&a), norm(&b));
            prop_assert!((js_divergence(&p, &q) - js_by_entropy(&p, &q)).abs() < 1e-10);
        }

        #[test]
        fn clustering_matches_brute_force(n in 1usize..16, p in 0.0f64..1.0, seed in any::<u64>()) {
            let g = generate_er(n, p, 1, seed).unwrap();
            prop_assert!((clustering_coefficient(&g) - brute_clustering(&g)).abs() < 1e-12);
        }
    }
}
