//! Client-side data, state and the local update of one round.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, StrategyKind, SEED_NEGATIVES};
use crate::error::{Error, Result};
use crate::fl::aggregate::{functional_embedding, ProbeGraph};
use crate::fl::strategy::{LocalTraining, Strategy};
use crate::graph::{split_count, Graph, Split};
use crate::nn::{
    apply_mask_threshold, edge_scores, forward_input, loss_and_grads, loss_only, roc_auc,
    AdamState, LossBreakdown, MaskParams, ModelParams, PropagatedInput, Regularization, Targets,
    TensorSet, CLASSIFIER_START,
};
use crate::partition::label_distribution;

/// Held-out and training edges of the link task.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSplit {
    pub train: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalTask {
    Nodes(Split),
    Links(LinkSplit),
}

/// A client's immutable view of its subgraph.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub graph: Graph,
    /// Propagation input used for training; the link task hides held-out
    /// edges from it.
    pub input: PropagatedInput,
    pub task: LocalTask,
    pub probe: Arc<ProbeGraph>,
    run_seed: u64,
}

/// Samples `count` distinct node pairs `u < v` that are not edges of `g`
/// and not in `exclude`.
fn sample_negatives(
    g: &Graph,
    count: usize,
    exclude: &HashSet<(usize, usize)>,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let n = g.num_nodes();
    let free = (n * n.saturating_sub(1) / 2).saturating_sub(g.num_edges() + exclude.len());
    if count > free {
        return Err(Error::param(format!(
            "cannot draw {count} negative pairs from a {n}-node graph with {} edges",
            g.num_edges()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let pair = (a.min(b), a.max(b));
        if a == b || g.has_edge(a, b) || exclude.contains(&pair) || !taken.insert(pair) {
            continue;
        }
        out.push(pair);
    }
    Ok(out)
}

impl ClientData {
    pub fn node_task(
        id: usize,
        graph: Graph,
        split: Split,
        probe: Arc<ProbeGraph>,
    ) -> Result<Self> {
        if split.train_ids.is_empty() {
            return Err(Error::param(format!("client {id} has no training nodes")));
        }
        let input = PropagatedInput::from_graph(&graph)?;
        Ok(ClientData {
            id,
            graph,
            input,
            task: LocalTask::Nodes(split),
            probe,
            run_seed: 0,
        })
    }

    /// Splits the subgraph's edges; held-out edges are removed from the
    /// propagation graph and paired with the same number of sampled non-edges.
    pub fn link_task(
        id: usize,
        graph: Graph,
        train_frac: f64,
        val_frac: f64,
        probe: Arc<ProbeGraph>,
        run_seed: u64,
    ) -> Result<Self> {
        let edges = graph.edges().to_vec();
        let parts = split_count(
            edges.len(),
            train_frac,
            val_frac,
            derive_seed(run_seed, "edge-split", id as u64, 0),
        )?;
        let pick = |ids: &[usize]| ids.iter().map(|&i| edges[i]).collect::<Vec<_>>();
        let (train, val_pos, test_pos) = (
            pick(&parts.train_ids),
            pick(&parts.val_ids),
            pick(&parts.test_ids),
        );
        if train.is_empty() {
            return Err(Error::param(format!("client {id} has no training edges")));
        }
        let held_neg = sample_negatives(
            &graph,
            val_pos.len() + test_pos.len(),
            &HashSet::new(),
            derive_seed(run_seed, SEED_NEGATIVES, id as u64, 0),
        )?;
        let (val_neg, test_neg) = held_neg.split_at(val_pos.len());
        let input = PropagatedInput::from_graph(&graph.with_edges(&train)?)?;
        Ok(ClientData {
            id,
            graph,
            input,
            task: LocalTask::Links(LinkSplit {
                train,
                val_pos,
                val_neg: val_neg.to_vec(),
                test_pos,
                test_neg: test_neg.to_vec(),
            }),
            probe,
            run_seed,
        })
    }

    /// Training nodes, or training edges for the link task.
    pub fn train_count(&self) -> usize {
        match &self.task {
            LocalTask::Nodes(s) => s.train_ids.len(),
            LocalTask::Links(l) => l.train.len(),
        }
    }

    pub fn split(&self) -> Option<&Split> {
        match &self.task {
            LocalTask::Nodes(s) => Some(s),
            LocalTask::Links(_) => None,
        }
    }

    /// Label distribution over every local node.
    pub fn label_distribution(&self) -> Vec<f64> {
        let ids: Vec<usize> = (0..self.graph.num_nodes()).collect();
        label_distribution(self.graph.labels(), &ids, self.graph.num_classes())
    }

    /// Fresh training non-edges for `round`, disjoint from held-out negatives.
    fn train_negatives(&self, round: usize) -> Result<Vec<(usize, usize)>> {
        let LocalTask::Links(l) = &self.task else {
            return Ok(Vec::new());
        };
        let exclude: HashSet<_> = l.val_neg.iter().chain(&l.test_neg).copied().collect();
        sample_negatives(
            &self.graph,
            l.train.len(),
            &exclude,
            derive_seed(self.run_seed, SEED_NEGATIVES, self.id as u64, round as u64),
        )
    }

    /// Train, validation and test accuracy (node task) or ROC-AUC (link
    /// task). Empty sets score NaN.
    pub fn evaluate(
        &self,
        params: &ModelParams,
        masks: Option<&MaskParams>,
        round: usize,
    ) -> Result<[f64; 3]> {
        let (h, logits) = forward_input(params, masks, &self.input)?;
        match &self.task {
            LocalTask::Nodes(s) => {
                let labels = self.graph.labels();
                let acc = |ids: &[usize]| {
                    if ids.is_empty() {
                        f64::NAN
                    } else {
                        crate::nn::accuracy_from_logits(&logits.view(), labels, ids)
                    }
                };
                Ok([acc(&s.train_ids), acc(&s.val_ids), acc(&s.test_ids)])
            }
            LocalTask::Links(l) => {
                let auc = |pos: &[(usize, usize)], neg: &[(usize, usize)]| -> Result<f64> {
                    if pos.is_empty() || neg.is_empty() {
                        return Ok(f64::NAN);
                    }
                    let mut scores = edge_scores(&h, pos);
                    scores.extend(edge_scores(&h, neg));
                    let labels: Vec<bool> = (0..scores.len()).map(|i| i < pos.len()).collect();
                    roc_auc(&scores, &labels)
                };
                let train_neg = self.train_negatives(round)?;
                Ok([
                    auc(&l.train, &train_neg)?,
                    auc(&l.val_pos, &l.val_neg)?,
                    auc(&l.test_pos, &l.test_neg)?,
                ])
            }
        }
    }
}

/// Mutable per-client training state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub data: ClientData,
    pub params: ModelParams,
    pub masks: MaskParams,
    /// Parameters most recently received from the server.
    pub anchor: ModelParams,
    adam: AdamState,
    mask_adam: AdamState,
}

/// What a client sends to the server after local training.
#[derive(Debug, Clone)]
pub struct Payload {
    /// Transmitted parameters; personalized tensors are zero.
    pub params: Option<ModelParams>,
    pub embedding: Option<Array1<f64>>,
    pub train_count: usize,
    /// Exact count of non-zero transmitted scalars.
    pub nonzero: usize,
    /// Scalars counted as sent.
    pub sent: usize,
}

/// Per-client metrics of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientRecord {
    pub loss: LossBreakdown,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub sparsity: f64,
    pub params_sent: usize,
    pub params_received: usize,
}

impl ClientState {
    /// Starts from the shared initialization with an all-ones mask.
    pub fn new(data: ClientData, init: &ModelParams, mask_classifier: bool) -> Self {
        let masks = MaskParams::ones(init.dims(), mask_classifier);
        ClientState {
            adam: AdamState::for_params(init),
            mask_adam: AdamState::for_params(masks.values()),
            data,
            params: init.clone(),
            masks,
            anchor: init.clone(),
        }
    }

    pub fn id(&self) -> usize {
        self.data.id
    }

    /// Parameters the client evaluates with and would transmit: the
    /// thresholded effective weights under masking, the raw weights otherwise.
    pub fn model(&self, strategy: &Strategy) -> Result<(ModelParams, f64)> {
        if strategy.uses_masks() {
            apply_mask_threshold(&self.params, &self.masks, strategy.mask_threshold)
        } else {
            Ok((self.params.clone(), 0.0))
        }
    }

    /// Installs server parameters; returns the number of scalars received.
    fn receive(&mut self, incoming: &ModelParams, kind: StrategyKind) -> Result<usize> {
        if !incoming.same_shape(&self.params) {
            return Err(Error::Internal(
                "server sent parameters of the wrong shape".into(),
            ));
        }
        self.anchor = incoming.clone();
        if kind == StrategyKind::FedPer {
            for (dst, src) in self
                .params
                .slices_mut()
                .into_iter()
                .zip(incoming.slices())
                .take(CLASSIFIER_START)
            {
                dst.copy_from_slice(src);
            }
            Ok(incoming.shared_len())
        } else {
            self.params = incoming.clone();
            Ok(incoming.num_params())
        }
    }

    fn objective(
        &self,
        strategy: &Strategy,
    ) -> (Option<&MaskParams>, Option<&ModelParams>, Regularization) {
        match strategy.kind {
            StrategyKind::FedPub => (
                Some(&self.masks),
                Some(&self.anchor),
                Regularization {
                    l1: strategy.l1,
                    prox: strategy.l2,
                },
            ),
            StrategyKind::FedProx => (
                None,
                Some(&self.anchor),
                Regularization {
                    l1: 0.0,
                    prox: strategy.fedprox_mu / 2.0,
                },
            ),
            _ => (None, None, Regularization::default()),
        }
    }

    fn targets<'a>(&'a self, negatives: &'a [(usize, usize)]) -> Targets<'a> {
        match &self.data.task {
            LocalTask::Nodes(s) => Targets::Nodes {
                labels: self.data.graph.labels(),
                train_ids: &s.train_ids,
            },
            LocalTask::Links(l) => Targets::Links {
                positive: &l.train,
                negative: negatives,
            },
        }
    }

    /// Current training loss under the strategy's objective.
    pub fn loss(&self, strategy: &Strategy, round: usize) -> Result<LossBreakdown> {
        let negatives = self.data.train_negatives(round)?;
        let (masks, anchor, reg) = self.objective(strategy);
        loss_only(
            &self.params,
            masks,
            anchor,
            &self.data.input,
            &self.targets(&negatives),
            reg,
        )
    }

    /// One full-graph optimizer step on the strategy's objective.
    fn train_step(
        &mut self,
        strategy: &Strategy,
        training: &LocalTraining,
        negatives: &[(usize, usize)],
    ) -> Result<()> {
        let (masks, anchor, reg) = self.objective(strategy);
        let (_, grads) = loss_and_grads(
            &self.params,
            masks,
            anchor,
            &self.data.input,
            &self.targets(negatives),
            reg,
        )?;
        self.adam
            .step(&mut self.params, &grads.params, training.lr)?;
        if let Some(gm) = grads.masks {
            if training.mask_lr > 0.0 {
                self.mask_adam
                    .step(self.masks.values_mut(), &gm, training.mask_lr)?;
            }
        }
        Ok(())
    }
}

/// Receives `incoming` (if any), trains for the configured epochs, and
/// builds the payload and metrics of this round.
pub fn local_update(
    client: &mut ClientState,
    incoming: Option<&ModelParams>,
    round: usize,
    strategy: &Strategy,
    training: &LocalTraining,
) -> Result<(Payload, ClientRecord)> {
    let received = match incoming {
        Some(p) => client.receive(p, strategy.kind)?,
        None => 0,
    };
    let negatives = client.data.train_negatives(round)?;
    for _ in 0..training.epochs {
        client.train_step(strategy, training, &negatives)?;
    }
    let loss = client.loss(strategy, round)?;
    let (model, sparsity) = client.model(strategy)?;
    let [train_acc, val_acc, test_acc] = client.data.evaluate(&model, None, round)?;

    let train_count = client.data.train_count();
    let payload = match strategy.kind {
        StrategyKind::FedPub => {
            let embedding = match strategy.similarity {
                crate::config::SimilaritySource::Functional => Some(functional_embedding(
                    &model,
                    None,
                    &client.data.probe,
                    strategy.embedding_layer,
                )?),
                _ => None,
            };
            let nonzero = model.nonzero_count();
            Payload {
                params: Some(model),
                embedding,
                train_count,
                nonzero,
                sent: nonzero,
            }
        }
        StrategyKind::FedAvg | StrategyKind::FedProx => Payload {
            nonzero: model.nonzero_count(),
            sent: model.num_params(),
            params: Some(model),
            embedding: None,
            train_count,
        },
        StrategyKind::FedPer => {
            let mut shared = model;
            shared.wc.fill(0.0);
            shared.bc.fill(0.0);
            Payload {
                nonzero: shared.nonzero_count(),
                sent: shared.shared_len(),
                params: Some(shared),
                embedding: None,
                train_count,
            }
        }
        StrategyKind::Local | StrategyKind::Oracle => Payload {
            params: None,
            embedding: None,
            train_count,
            nonzero: 0,
            sent: 0,
        },
    };
    let record = ClientRecord {
        loss,
        train_acc,
        val_acc,
        test_acc,
        sparsity,
        params_sent: payload.sent,
        params_received: received,
    };
    Ok((payload, record))
}
