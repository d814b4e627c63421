//! Round orchestration: client fan-out, server aggregation, and the
//! centralized oracle baseline.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{SimilaritySource, StrategyKind};
use crate::error::{Error, Result};
use crate::fl::aggregate::{
    aggregate_personalized, alpha_matrix, fedavg_aggregate, parameter_similarity, similarity,
    similarity_matrix,
};
use crate::fl::client::{local_update, ClientRecord, ClientState, Payload};
use crate::fl::strategy::{LocalTraining, Strategy};
use crate::nn::{
    accuracy_from_logits, forward_input, loss_and_grads, loss_only, AdamState, ModelParams,
    PropagatedInput, Regularization, Targets,
};
use crate::partition::js_divergence;

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_id: usize,
    pub strategy: StrategyKind,
    pub train_loss: f64,
    pub task_loss: f64,
    pub l1_term: f64,
    pub prox_term: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub sparsity: f64,
    pub params_sent: usize,
    pub params_received: usize,
}

impl RoundRecord {
    pub fn new(round: usize, client_id: usize, strategy: StrategyKind, r: &ClientRecord) -> Self {
        RoundRecord {
            round,
            client_id,
            strategy,
            train_loss: r.loss.total,
            task_loss: r.loss.task_loss,
            l1_term: r.loss.l1_term,
            prox_term: r.loss.prox_term,
            train_acc: r.train_acc,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            sparsity: r.sparsity,
            params_sent: r.params_sent,
            params_received: r.params_received,
        }
    }
}

/// Server memory between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    /// Last completed round.
    pub round: usize,
    /// Parameters received from each client in the last round.
    pub bank: Vec<ModelParams>,
    pub embeddings: Vec<Option<Array1<f64>>>,
    pub similarity: Option<Array2<f64>>,
    pub alphas: Option<Array2<f64>>,
    /// Parameters sent to each client at the start of the last round.
    pub dispatched: Vec<ModelParams>,
    next: Vec<ModelParams>,
}

impl ServerState {
    /// Round 1 sends the shared initialization to every client.
    pub fn new(init: &ModelParams, num_clients: usize) -> Self {
        ServerState {
            round: 0,
            bank: Vec::new(),
            embeddings: vec![None; num_clients],
            similarity: None,
            alphas: None,
            dispatched: Vec::new(),
            next: vec![init.clone(); num_clients],
        }
    }

    /// Parameters each client will receive next round.
    pub fn pending(&self) -> &[ModelParams] {
        &self.next
    }
}

fn similarity_for(
    server: &ServerState,
    payloads: &[Payload],
    clients: &[ClientState],
    source: SimilaritySource,
) -> Result<Array2<f64>> {
    let bank: Vec<&ModelParams> = payloads
        .iter()
        .map(|p| p.params.as_ref().expect("federated payload"))
        .collect();
    match source {
        SimilaritySource::Functional => {
            let emb: Vec<&Array1<f64>> = payloads
                .iter()
                .map(|p| {
                    p.embedding
                        .as_ref()
                        .ok_or_else(|| Error::Internal("payload lacks an embedding".into()))
                })
                .collect::<Result<_>>()?;
            similarity_matrix(&emb, |a, b| similarity(a, b))
        }
        SimilaritySource::Parameter => similarity_matrix(&bank, |a, b| parameter_similarity(a, b)),
        SimilaritySource::Gradient => {
            let deltas: Vec<ModelParams> = bank
                .iter()
                .zip(&server.dispatched)
                .map(|(after, before)| after.zip_map(before, |a, b| a - b))
                .collect();
            similarity_matrix(&deltas, parameter_similarity)
        }
        SimilaritySource::Label => {
            let dists: Vec<Vec<f64>> = clients
                .iter()
                .map(|c| c.data.label_distribution())
                .collect();
            similarity_matrix(&dists, |a, b| Ok(1.0 - js_divergence(a, b)))
        }
    }
}

/// Aggregates the round's payloads into next round's dispatch.
fn aggregate(
    server: &mut ServerState,
    clients: &[ClientState],
    payloads: Vec<Payload>,
    strategy: &Strategy,
) -> Result<()> {
    if !strategy.is_federated() {
        return Ok(());
    }
    let counts: Vec<usize> = payloads.iter().map(|p| p.train_count).collect();
    if strategy.kind == StrategyKind::FedPub {
        let sim = similarity_for(server, &payloads, clients, strategy.similarity)?;
        let alphas = alpha_matrix(&sim, strategy.tau, strategy.community)?;
        server.embeddings = payloads.iter().map(|p| p.embedding.clone()).collect();
        server.bank = payloads
            .into_iter()
            .map(|p| p.params.expect("federated payload"))
            .collect();
        server.next = aggregate_personalized(&server.bank, &alphas)?;
        server.similarity = Some(sim);
        server.alphas = Some(alphas);
    } else {
        server.bank = payloads
            .into_iter()
            .map(|p| p.params.expect("federated payload"))
            .collect();
        let global = fedavg_aggregate(&server.bank, &counts)?;
        server.next = vec![global; server.bank.len()];
    }
    Ok(())
}

/// Runs one round: dispatch, concurrent local updates, then aggregation.
///
/// Clients never share mutable state, so the output does not depend on the
/// pool size.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    strategy: &Strategy,
    training: &LocalTraining,
    pool: &rayon::ThreadPool,
) -> Result<Vec<RoundRecord>> {
    let round = server.round + 1;
    let federated = strategy.is_federated();
    let incoming = std::mem::take(&mut server.next);
    if federated && incoming.len() != clients.len() {
        return Err(Error::Internal(format!(
            "{} dispatches for {} clients",
            incoming.len(),
            clients.len()
        )));
    }
    let results: Vec<Result<(Payload, ClientRecord)>> = pool.install(|| {
        clients
            .par_iter_mut()
            .enumerate()
            .map(|(i, c)| {
                let msg = if federated { Some(&incoming[i]) } else { None };
                local_update(c, msg, round, strategy, training).map_err(|e| {
                    Error::Internal(format!("client {} in round {round}: {e}", c.id()))
                })
            })
            .collect()
    });
    let mut payloads = Vec::with_capacity(clients.len());
    let mut records = Vec::with_capacity(clients.len());
    for (c, r) in clients.iter().zip(results) {
        let (payload, rec) = r?;
        records.push(RoundRecord::new(round, c.id(), strategy.kind, &rec));
        payloads.push(payload);
    }
    server.dispatched = if federated { incoming } else { Vec::new() };
    server.round = round;
    aggregate(server, clients, payloads, strategy)?;
    Ok(records)
}

/// Node ids of one client expressed in the global graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSplit {
    pub client_id: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// A single model trained on the whole global graph, including the edges
/// no client can see, and scored on each client's nodes.
#[derive(Debug, Clone)]
pub struct Oracle {
    input: PropagatedInput,
    labels: Vec<usize>,
    train_ids: Vec<usize>,
    splits: Vec<GlobalSplit>,
    pub params: ModelParams,
    adam: AdamState,
}

impl Oracle {
    /// Trains on the union of the clients' training nodes.
    pub fn new(
        input: PropagatedInput,
        labels: Vec<usize>,
        splits: Vec<GlobalSplit>,
        init: &ModelParams,
    ) -> Result<Self> {
        let mut train_ids: Vec<usize> = splits
            .iter()
            .flat_map(|s| s.train_ids.iter().copied())
            .collect();
        train_ids.sort_unstable();
        train_ids.dedup();
        if train_ids.is_empty() {
            return Err(Error::param("oracle has no training nodes"));
        }
        Ok(Oracle {
            input,
            labels,
            train_ids,
            splits,
            adam: AdamState::for_params(init),
            params: init.clone(),
        })
    }

    pub fn run_round(
        &mut self,
        round: usize,
        training: &LocalTraining,
    ) -> Result<Vec<RoundRecord>> {
        let targets = Targets::Nodes {
            labels: &self.labels,
            train_ids: &self.train_ids,
        };
        let reg = Regularization::default();
        for _ in 0..training.epochs {
            let (_, grads) = loss_and_grads(&self.params, None, None, &self.input, &targets, reg)?;
            self.adam
                .step(&mut self.params, &grads.params, training.lr)?;
        }
        let loss = loss_only(&self.params, None, None, &self.input, &targets, reg)?;
        let (_, logits) = forward_input(&self.params, None, &self.input)?;
        let acc = |ids: &[usize]| {
            if ids.is_empty() {
                f64::NAN
            } else {
                accuracy_from_logits(&logits.view(), &self.labels, ids)
            }
        };
        Ok(self
            .splits
            .iter()
            .map(|s| {
                let rec = ClientRecord {
                    loss,
                    train_acc: acc(&s.train_ids),
                    val_acc: acc(&s.val_ids),
                    test_acc: acc(&s.test_ids),
                    sparsity: 0.0,
                    params_sent: 0,
                    params_received: 0,
                };
                RoundRecord::new(round, s.client_id, StrategyKind::Oracle, &rec)
            })
            .collect())
    }
}
