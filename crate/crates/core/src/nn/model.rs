//! Two-layer GCN with a linear classifier head, forward pass and the
//! hand-derived backward pass of the masked, regularized training loss.
//!
//! ```text
//! Z1 = Â·X·W1 + b1        H1 = relu(Z1)
//! Z2 = Â·H1·W2 + b2       H  = relu(Z2)
//! logits = H·Wc + bc
//! ```
//!
//! Every weight above is the effective weight `θ ⊙ μ` when a mask is given.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::params::{MaskParams, ModelParams, TensorSet};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, Graph, NormalizedAdjacency};

/// Propagation matrix plus the constant first-hop aggregate `Â·X`.
#[derive(Debug, Clone)]
pub struct PropagatedInput {
    adj: NormalizedAdjacency,
    features: Array2<f64>,
    ax: Array2<f64>,
}

impl PropagatedInput {
    pub fn new(adj: NormalizedAdjacency, features: Array2<f64>) -> Result<Self> {
        if adj.num_nodes() != features.nrows() {
            return Err(Error::param(format!(
                "adjacency has {} nodes but features have {} rows",
                adj.num_nodes(),
                features.nrows()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "input features contain non-finite values".into(),
            ));
        }
        let ax = adj.matmul(&features.view());
        Ok(PropagatedInput { adj, features, ax })
    }

    pub fn from_graph(g: &Graph) -> Result<Self> {
        Self::new(normalized_adjacency(g), g.features().clone())
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adj
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Intermediate activations kept for backpropagation.
struct Activations {
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h: Array2<f64>,
    logits: Array2<f64>,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|x| x.max(0.0))
}

fn check_shapes(
    params: &ModelParams,
    masks: Option<&MaskParams>,
    input: &PropagatedInput,
) -> Result<()> {
    if params.w1.nrows() != input.feat_dim() {
        return Err(Error::param(format!(
            "model expects {} input features, graph has {}",
            params.w1.nrows(),
            input.feat_dim()
        )));
    }
    if let Some(m) = masks {
        if !m.values().same_shape(params) {
            return Err(Error::param("mask shapes differ from parameter shapes"));
        }
    }
    Ok(())
}

fn run(eff: &ModelParams, input: &PropagatedInput) -> Activations {
    let z1 = input.ax.dot(&eff.w1) + &eff.b1;
    let h1 = relu(&z1);
    let p2 = h1.dot(&eff.w2);
    let z2 = input.adj.matmul(&p2.view()) + &eff.b2;
    let h = relu(&z2);
    let logits = h.dot(&eff.wc) + &eff.bc;
    Activations {
        z1,
        h1,
        z2,
        h,
        logits,
    }
}

fn effective(params: &ModelParams, masks: Option<&MaskParams>) -> ModelParams {
    match masks {
        Some(m) => m.apply(params),
        None => params.clone(),
    }
}

/// Final hidden representation `H` (n×h) and class logits (n×C).
pub fn forward_input(
    params: &ModelParams,
    masks: Option<&MaskParams>,
    input: &PropagatedInput,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_shapes(params, masks, input)?;
    if !params.is_finite() {
        return Err(Error::Numeric(
            "model parameters contain non-finite values".into(),
        ));
    }
    let act = run(&effective(params, masks), input);
    Ok((act.h, act.logits))
}

/// Second-layer output before the ReLU, the final hidden layer, and logits.
pub fn forward_layers(
    params: &ModelParams,
    masks: Option<&MaskParams>,
    input: &PropagatedInput,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    check_shapes(params, masks, input)?;
    if !params.is_finite() {
        return Err(Error::Numeric(
            "model parameters contain non-finite values".into(),
        ));
    }
    let act = run(&effective(params, masks), input);
    Ok((act.z2, act.h, act.logits))
}

/// Convenience wrapper that builds the propagated input on the fly.
pub fn forward(
    params: &ModelParams,
    masks: Option<&MaskParams>,
    adj: &NormalizedAdjacency,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let input = PropagatedInput::new(adj.clone(), x.clone())?;
    forward_input(params, masks, &input)
}

/// What the training loss is computed against.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Mean cross-entropy over `train_ids`.
    Nodes {
        labels: &'a [usize],
        train_ids: &'a [usize],
    },
    /// Mean binary cross-entropy of `σ(h_u · h_v)` over positive and
    /// negative node pairs.
    Links {
        positive: &'a [(usize, usize)],
        negative: &'a [(usize, usize)],
    },
}

/// Coefficients of the sparsity and proximal penalties.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Regularization {
    pub l1: f64,
    pub prox: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    /// Raw `Σ|μ|`, zero without a mask.
    pub l1_term: f64,
    /// Raw `‖θ ⊙ μ − anchor‖²`, zero without an anchor.
    pub prox_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ModelParams,
    pub masks: Option<ModelParams>,
}

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn pair_score(h: &Array2<f64>, u: usize, v: usize) -> f64 {
    h.row(u).dot(&h.row(v))
}

/// Loss, gradient w.r.t. the logits, gradient w.r.t. the final hidden layer.
type TaskGrad = (f64, Option<Array2<f64>>, Option<Array2<f64>>);

/// Task loss and its gradient w.r.t. the logits (node task) or the final
/// hidden layer (link task).
fn task_loss(act: &Activations, targets: &Targets<'_>, n: usize) -> Result<TaskGrad> {
    match *targets {
        Targets::Nodes { labels, train_ids } => {
            if train_ids.is_empty() {
                return Err(Error::param(
                    "node classification needs at least one training node",
                ));
            }
            let classes = act.logits.ncols();
            let scale = 1.0 / train_ids.len() as f64;
            let mut loss = 0.0;
            let mut dlogits = Array2::<f64>::zeros(act.logits.raw_dim());
            for &i in train_ids {
                if i >= n || i >= labels.len() || labels[i] >= classes {
                    return Err(Error::param(format!(
                        "training node {i} or its label is out of range"
                    )));
                }
                let y = labels[i];
                let row = act.logits.row(i);
                let lse = log_sum_exp(row);
                loss += lse - row[y];
                let mut drow = dlogits.row_mut(i);
                for c in 0..classes {
                    drow[c] = (row[c] - lse).exp() * scale;
                }
                drow[y] -= scale;
            }
            Ok((loss * scale, Some(dlogits), None))
        }
        Targets::Links { positive, negative } => {
            let total = positive.len() + negative.len();
            if total == 0 {
                return Err(Error::param("link prediction needs at least one node pair"));
            }
            let scale = 1.0 / total as f64;
            let mut loss = 0.0;
            let mut dh = Array2::<f64>::zeros(act.h.raw_dim());
            let labelled = positive
                .iter()
                .map(|&e| (e, 1.0))
                .chain(negative.iter().map(|&e| (e, 0.0)));
            for ((u, v), y) in labelled {
                if u >= n || v >= n {
                    return Err(Error::param(format!("pair ({u}, {v}) out of range")));
                }
                let s = pair_score(&act.h, u, v);
                loss += softplus(s) - y * s;
                let ds = (sigmoid(s) - y) * scale;
                let hv = act.h.row(v).to_owned();
                let hu = act.h.row(u).to_owned();
                dh.row_mut(u).scaled_add(ds, &hv);
                dh.row_mut(v).scaled_add(ds, &hu);
            }
            Ok((loss * scale, None, Some(dh)))
        }
    }
}

fn prox_residual(eff: &ModelParams, anchor: Option<&ModelParams>) -> Result<Option<ModelParams>> {
    match anchor {
        Some(a) if !a.same_shape(eff) => {
            Err(Error::param("anchor shapes differ from parameter shapes"))
        }
        Some(a) => Ok(Some(eff.zip_map(a, |x, y| x - y))),
        None => Ok(None),
    }
}

/// Training loss without gradients.
pub fn loss_only(
    params: &ModelParams,
    masks: Option<&MaskParams>,
    anchor: Option<&ModelParams>,
    input: &PropagatedInput,
    targets: &Targets<'_>,
    reg: Regularization,
) -> Result<LossBreakdown> {
    check_shapes(params, masks, input)?;
    let eff = effective(params, masks);
    let act = run(&eff, input);
    let (task, _, _) = task_loss(&act, targets, input.num_nodes())?;
    let l1_term = masks.map_or(0.0, MaskParams::l1);
    let prox_term = prox_residual(&eff, anchor)?.map_or(0.0, |r| r.norm_sq());
    let breakdown = LossBreakdown {
        task_loss: task,
        l1_term,
        prox_term,
        total: task + reg.l1 * l1_term + reg.prox * prox_term,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss is {}",
            breakdown.total
        )));
    }
    Ok(breakdown)
}

/// Loss `task + λ1·Σ|μ| + λ2·‖θ⊙μ − anchor‖²` and its gradients with respect
/// to both the raw parameters and the mask.
///
/// Gradients flow through `θ_eff = θ ⊙ μ`: `∂L/∂θ = g ⊙ μ` and
/// `∂L/∂μ = g ⊙ θ + λ1·sign(μ)` where `g` is the gradient w.r.t. `θ_eff`
/// and `sign(0) = 0`.
pub fn loss_and_grads(
    params: &ModelParams,
    masks: Option<&MaskParams>,
    anchor: Option<&ModelParams>,
    input: &PropagatedInput,
    targets: &Targets<'_>,
    reg: Regularization,
) -> Result<(LossBreakdown, Gradients)> {
    check_shapes(params, masks, input)?;
    if !params.is_finite() {
        return Err(Error::Numeric(
            "model parameters contain non-finite values".into(),
        ));
    }
    let eff = effective(params, masks);
    let act = run(&eff, input);
    let n = input.num_nodes();
    let (task, dlogits, dh_links) = task_loss(&act, targets, n)?;

    let mut g = ModelParams::zeros(eff.dims());
    let dh = match dlogits {
        Some(dl) => {
            g.wc = act.h.t().dot(&dl);
            g.bc = dl.sum_axis(Axis(0));
            dl.dot(&eff.wc.t())
        }
        None => dh_links.expect("link task returns a hidden-layer gradient"),
    };
    let dz2 = relu_backward(dh, &act.z2);
    g.b2 = dz2.sum_axis(Axis(0));
    let dp2 = input.adj.matmul(&dz2.view());
    g.w2 = act.h1.t().dot(&dp2);
    let dh1 = dp2.dot(&eff.w2.t());
    let dz1 = relu_backward(dh1, &act.z1);
    g.b1 = dz1.sum_axis(Axis(0));
    g.w1 = input.ax.t().dot(&dz1);

    let residual = prox_residual(&eff, anchor)?;
    let prox_term = residual.as_ref().map_or(0.0, ModelParams::norm_sq);
    if let Some(r) = &residual {
        g.add_scaled(2.0 * reg.prox, r);
    }

    let (param_grad, mask_grad, l1_term) = match masks {
        Some(m) => {
            let active = m.active_tensors();
            let mut dparams = g.clone();
            let mut dmask = ModelParams::zeros(eff.dims());
            let geff = g.slices();
            let theta = params.slices();
            let mu = m.values().slices();
            for (t, (dp, dm)) in dparams
                .slices_mut()
                .into_iter()
                .zip(dmask.slices_mut())
                .enumerate()
                .take(active)
            {
                for i in 0..dp.len() {
                    dp[i] = geff[t][i] * mu[t][i];
                    dm[i] = geff[t][i] * theta[t][i] + reg.l1 * sign(mu[t][i]);
                }
            }
            (dparams, Some(dmask), m.l1())
        }
        None => (g, None, 0.0),
    };

    let breakdown = LossBreakdown {
        task_loss: task,
        l1_term,
        prox_term,
        total: task + reg.l1 * l1_term + reg.prox * prox_term,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss is {}",
            breakdown.total
        )));
    }
    Ok((
        breakdown,
        Gradients {
            params: param_grad,
            masks: mask_grad,
        },
    ))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn relu_backward(mut grad: Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    grad.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    grad
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `ids` whose arg-max logit equals the label.
pub fn predict_accuracy(
    params: &ModelParams,
    masks: Option<&MaskParams>,
    input: &PropagatedInput,
    labels: &[usize],
    ids: &[usize],
) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::param("accuracy needs at least one node"));
    }
    let (_, logits) = forward_input(params, masks, input)?;
    Ok(accuracy_from_logits(&logits.view(), labels, ids))
}

pub fn accuracy_from_logits(logits: &ArrayView2<f64>, labels: &[usize], ids: &[usize]) -> f64 {
    let correct = ids
        .iter()
        .filter(|&&i| argmax(logits.row(i)) == labels[i])
        .count();
    correct as f64 / ids.len() as f64
}

/// Link probabilities `σ(h_u · h_v)` for each pair.
pub fn edge_scores(h: &Array2<f64>, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(u, v)| sigmoid(pair_score(h, u, v)))
        .collect()
}

/// Column means of a node-by-feature matrix.
pub fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(m.ncols()))
}

/// Zeroes effective weights whose mask magnitude is below `threshold`.
///
/// Returns the sparse effective parameters and the fraction of positions
/// switched off by the mask (below threshold, or exactly zero).
pub fn apply_mask_threshold(
    params: &ModelParams,
    masks: &MaskParams,
    threshold: f64,
) -> Result<(ModelParams, f64)> {
    if !(threshold >= 0.0) {
        return Err(Error::param(format!(
            "mask threshold {threshold} must be non-negative"
        )));
    }
    let mut eff = masks.apply(params);
    let active = masks.active_tensors();
    let mut zeroed = 0usize;
    for (dst, mu) in eff
        .slices_mut()
        .into_iter()
        .zip(masks.values().slices())
        .take(active)
    {
        for (x, &m) in dst.iter_mut().zip(mu) {
            if m.abs() < threshold || m == 0.0 {
                *x = 0.0;
                zeroed += 1;
            }
        }
    }
    Ok((eff, zeroed as f64 / params.num_params() as f64))
}
