//! Server-side similarity estimation and parameter aggregation.

use ndarray::{Array1, Array2};

use crate::config::{EmbeddingLayer, ProbeConfig, ProbeVariant};
use crate::error::{Error, Result};
use crate::graph::{generate_er, generate_sbm_blocks, generate_single_node, Graph};
use crate::nn::{forward_layers, mean_rows, MaskParams, ModelParams, PropagatedInput, TensorSet};

/// Random graph fed to every client model to compare what the models compute.
#[derive(Debug, Clone)]
pub struct ProbeGraph {
    graph: Graph,
    input: PropagatedInput,
}

impl ProbeGraph {
    pub fn from_graph(graph: Graph) -> Result<Self> {
        let input = PropagatedInput::from_graph(&graph)?;
        Ok(ProbeGraph { graph, input })
    }

    /// Builds the configured probe. The `feature` variant uses the block
    /// model structure; its features are replaced per client with
    /// [`ProbeGraph::with_tiled_feature`].
    pub fn generate(cfg: &ProbeConfig, feat_dim: usize, seed: u64) -> Result<Self> {
        let sizes = vec![cfg.block_size; cfg.blocks];
        let graph = match cfg.variant {
            ProbeVariant::Sbm | ProbeVariant::Feature => {
                generate_sbm_blocks(&sizes, cfg.p_in, cfg.p_out, feat_dim, seed)?
            }
            ProbeVariant::Er => {
                let n = cfg.blocks * cfg.block_size;
                generate_er(n, sbm_density(cfg), feat_dim, seed)?
            }
            ProbeVariant::One => generate_single_node(feat_dim, seed)?,
        };
        Self::from_graph(graph)
    }

    /// Same structure with every node carrying `feature`.
    pub fn with_tiled_feature(&self, feature: &Array1<f64>) -> Result<Self> {
        let n = self.graph.num_nodes();
        let x = Array2::from_shape_fn((n, feature.len()), |(_, j)| feature[j]);
        Self::from_graph(self.graph.with_features(x)?)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn input(&self) -> &PropagatedInput {
        &self.input
    }
}

/// Expected edge density of the configured block model, used so the
/// Erdős–Rényi probe has the same average degree.
fn sbm_density(cfg: &ProbeConfig) -> f64 {
    let n = (cfg.blocks * cfg.block_size) as f64;
    let all = n * (n - 1.0) / 2.0;
    if all == 0.0 {
        return 0.0;
    }
    let b = cfg.block_size as f64;
    let intra = cfg.blocks as f64 * b * (b - 1.0) / 2.0;
    (cfg.p_in * intra + cfg.p_out * (all - intra)) / all
}

/// Mean over probe nodes of one model layer: the final hidden layer by
/// default, its pre-ReLU values, or the logits.
pub fn functional_embedding(
    params: &ModelParams,
    masks: Option<&MaskParams>,
    probe: &ProbeGraph,
    layer: EmbeddingLayer,
) -> Result<Array1<f64>> {
    if probe.input.feat_dim() != params.dims().input {
        return Err(Error::param(format!(
            "probe features have {} dimensions, model expects {}",
            probe.input.feat_dim(),
            params.dims().input
        )));
    }
    let (z2, h, logits) = forward_layers(params, masks, &probe.input)?;
    Ok(match layer {
        EmbeddingLayer::Hidden => mean_rows(&h),
        EmbeddingLayer::PreActivation => mean_rows(&z2),
        EmbeddingLayer::Logits => mean_rows(&logits),
    })
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param(format!(
            "cannot compare vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::debug!("similarity of a zero-norm vector is taken as 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn similarity(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    cosine(
        a.as_slice().expect("contiguous vector"),
        b.as_slice().expect("contiguous vector"),
    )
}

/// Cosine between flattened parameter sets.
pub fn parameter_similarity(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::param("parameter sets have different shapes"));
    }
    let dot = a.dot(b);
    let (na, nb) = (a.norm_sq().sqrt(), b.norm_sq().sqrt());
    if na == 0.0 || nb == 0.0 {
        log::debug!("similarity of a zero-norm parameter set is taken as 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between two per-round parameter deltas.
pub fn gradient_similarity(ga: &ModelParams, gb: &ModelParams) -> Result<f64> {
    parameter_similarity(ga, gb)
}

/// Symmetric K×K matrix of `sim(i, j)` with a unit diagonal.
pub fn similarity_matrix<T>(
    items: &[T],
    sim: impl Fn(&T, &T) -> Result<f64>,
) -> Result<Array2<f64>> {
    let k = items.len();
    let mut s = Array2::<f64>::eye(k);
    let mut zeros = 0;
    for i in 0..k {
        for j in (i + 1)..k {
            let v = sim(&items[i], &items[j])?;
            zeros += usize::from(v == 0.0);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    if zeros > 0 {
        log::warn!("{zeros} client pairs have zero similarity (possibly a zero-norm embedding)");
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommunityMode {
    /// Softmax over every peer.
    Implicit,
    /// Peers whose similarity falls below the threshold get zero weight.
    Explicit(f64),
}

/// Softmax of `τ·S` over one similarity row.
///
/// `self_index` is the row's own client, which explicit mode always keeps.
pub fn aggregation_weights(
    row: &[f64],
    self_index: usize,
    tau: f64,
    mode: CommunityMode,
) -> Result<Vec<f64>> {
    if row.is_empty() || self_index >= row.len() {
        return Err(Error::param(
            "similarity row must contain the client itself",
        ));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::param(format!(
            "tau = {tau} must be finite and non-negative"
        )));
    }
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "similarity row contains non-finite values".into(),
        ));
    }
    let keep: Vec<bool> = match mode {
        CommunityMode::Implicit => vec![true; row.len()],
        CommunityMode::Explicit(thr) => row
            .iter()
            .enumerate()
            .map(|(j, &s)| j == self_index || s >= thr)
            .collect(),
    };
    let max = row
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&s, _)| tau * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = row
        .iter()
        .zip(&keep)
        .map(|(&s, &k)| if k { (tau * s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// Row-wise [`aggregation_weights`] over a full similarity matrix.
pub fn alpha_matrix(sim: &Array2<f64>, tau: f64, mode: CommunityMode) -> Result<Array2<f64>> {
    let k = sim.nrows();
    let mut alphas = Array2::zeros((k, k));
    for i in 0..k {
        let row = sim.row(i).to_vec();
        let w = aggregation_weights(&row, i, tau, mode)?;
        alphas.row_mut(i).assign(&Array1::from_vec(w));
    }
    Ok(alphas)
}

/// `Σ_j w_j · θ_j`, accumulated in index order.
pub fn weighted_sum(bank: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = bank
        .first()
        .ok_or_else(|| Error::Internal("cannot aggregate an empty bank".into()))?;
    if weights.len() != bank.len() {
        return Err(Error::Internal(format!(
            "{} weights for {} parameter sets",
            weights.len(),
            bank.len()
        )));
    }
    let mut out = ModelParams::zeros(first.dims());
    for (p, &w) in bank.iter().zip(weights) {
        if !p.same_shape(first) {
            return Err(Error::Internal(
                "parameter bank holds differently shaped models".into(),
            ));
        }
        for (dst, src) in out.slices_mut().into_iter().zip(p.slices()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += w * b;
            }
        }
    }
    Ok(out)
}

/// One convex combination of the bank per client, weighted by its alpha row.
pub fn aggregate_personalized(
    bank: &[ModelParams],
    alphas: &Array2<f64>,
) -> Result<Vec<ModelParams>> {
    if alphas.dim() != (bank.len(), bank.len()) {
        return Err(Error::Internal(format!(
            "alpha matrix is {:?} for {} clients",
            alphas.dim(),
            bank.len()
        )));
    }
    alphas
        .rows()
        .into_iter()
        .map(|row| weighted_sum(bank, &row.to_vec()))
        .collect()
}

/// Training-set-size weighted mean `Σ (N_k / N) · θ_k`.
pub fn fedavg_aggregate(bank: &[ModelParams], train_counts: &[usize]) -> Result<ModelParams> {
    let total: usize = train_counts.iter().sum();
    if total == 0 {
        return Err(Error::param("fedavg needs at least one training instance"));
    }
    let weights: Vec<f64> = train_counts
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect();
    weighted_sum(bank, &weights)
}
