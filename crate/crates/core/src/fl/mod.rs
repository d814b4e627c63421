//! Federated orchestration: local updates, similarity-weighted server
//! aggregation, the baselines, and run-directory output.

mod aggregate;
mod checkpoint;
mod client;
mod experiment;
mod server;
mod strategy;

pub use aggregate::{
    aggregate_personalized, aggregation_weights, alpha_matrix, cosine, fedavg_aggregate,
    functional_embedding, gradient_similarity, parameter_similarity, similarity, similarity_matrix,
    weighted_sum, CommunityMode, ProbeGraph,
};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use client::{
    local_update, ClientData, ClientRecord, ClientState, LinkSplit, LocalTask, Payload,
};
pub use experiment::{
    build_graph, build_partition, read_metrics, run_experiment, write_metrics, Experiment,
    RunOutcome, Simulation, CHECKPOINT_DIR, MANIFEST_FILE, METRICS_FILE, METRICS_HEADER,
    REPORT_DIR, SIMILARITY_DIR,
};
pub use server::{run_round, GlobalSplit, Oracle, RoundRecord, ServerState};
pub use strategy::{LocalTraining, Strategy};
