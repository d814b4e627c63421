//! Experiment assembly from a config and the on-disk run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use crate::config::{
    derive_seed, GraphSource, PartitionSpec, ProbeVariant, RunConfig, RunManifest, StrategyKind,
    TaskKind, SEED_GRAPH, SEED_INIT, SEED_PARTITION, SEED_PROBE, SEED_SPLIT,
};
use crate::error::{Error, Result};
use crate::fl::aggregate::ProbeGraph;
use crate::fl::checkpoint::Checkpoint;
use crate::fl::client::{ClientData, ClientState};
use crate::fl::server::{run_round, GlobalSplit, Oracle, RoundRecord, ServerState};
use crate::fl::strategy::{LocalTraining, Strategy};
use crate::graph::{generate_sbm_blocks, induced_subgraph, read_graph, split_nodes, Graph};
use crate::nn::{mean_rows, ModelDims, ModelParams, PropagatedInput};
use crate::partition::{
    make_imbalanced, make_overlapping, partition_balanced, partition_chunks, partition_louvain,
    partition_random, Partition,
};
use crate::report::{write_matrix_csv, write_pgm};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SIMILARITY_DIR: &str = "similarity";
pub const REPORT_DIR: &str = "report";

pub fn build_graph(cfg: &RunConfig) -> Result<Graph> {
    match &cfg.graph {
        GraphSource::Sbm(s) => generate_sbm_blocks(
            &s.block_sizes,
            s.p_in,
            s.p_out,
            s.feat_dim,
            derive_seed(cfg.run_seed, SEED_GRAPH, 0, 0),
        ),
        GraphSource::File { path } => read_graph(path),
    }
}

pub fn build_partition(cfg: &RunConfig, g: &Graph) -> Result<Partition> {
    let seed = derive_seed(cfg.run_seed, SEED_PARTITION, 0, 0);
    let p = match &cfg.partition {
        PartitionSpec::Balanced { clients } => partition_balanced(g, *clients, seed)?,
        PartitionSpec::Louvain { clients } => partition_louvain(g, *clients, seed)?,
        PartitionSpec::Random { clients } => partition_random(g, *clients, seed)?,
        PartitionSpec::Overlapping {
            base_parts,
            samples_per_part,
            node_frac,
        } => make_overlapping(g, *base_parts, *samples_per_part, *node_frac, seed)?,
        PartitionSpec::Imbalanced {
            fine_parts,
            group_sizes,
        } => make_imbalanced(g, *fine_parts, group_sizes, seed)?,
        PartitionSpec::Chunks { size } => partition_chunks(g.num_nodes(), *size)?,
        PartitionSpec::File { path } => Partition::read(path)?,
    };
    p.validate(g.num_nodes())?;
    Ok(p)
}

/// Everything derived deterministically from a config before training.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub graph: Graph,
    pub partition: Partition,
    pub clients: Vec<ClientData>,
    pub dims: ModelDims,
    /// Shared initialization broadcast in round 1.
    pub init: ModelParams,
}

impl Experiment {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.strategy.kind == StrategyKind::Oracle && cfg.task == TaskKind::LinkPred {
            return Err(Error::Config(
                "the oracle strategy supports only the node_clf task".into(),
            ));
        }
        let graph = build_graph(cfg)?;
        let partition = build_partition(cfg, &graph)?;
        let dims = ModelDims {
            input: graph.feat_dim(),
            hidden: cfg.model.hidden,
            classes: graph.num_classes(),
        };
        let init = ModelParams::glorot(dims, derive_seed(cfg.run_seed, SEED_INIT, 0, 0));
        let probe = Arc::new(ProbeGraph::generate(
            &cfg.probe,
            dims.input,
            derive_seed(cfg.run_seed, SEED_PROBE, 0, 0),
        )?);
        let mut clients = Vec::with_capacity(partition.num_clients());
        for (k, ids) in partition.clients.iter().enumerate() {
            let sub = induced_subgraph(&graph, ids)?;
            let client_probe = if cfg.probe.variant == ProbeVariant::Feature {
                Arc::new(probe.with_tiled_feature(&mean_rows(sub.features()))?)
            } else {
                Arc::clone(&probe)
            };
            let data = match cfg.task {
                TaskKind::NodeClf => {
                    let split = split_nodes(
                        &sub,
                        cfg.split.train_frac,
                        cfg.split.val_frac,
                        derive_seed(cfg.run_seed, SEED_SPLIT, k as u64, 0),
                    )?;
                    ClientData::node_task(k, sub, split, client_probe)?
                }
                TaskKind::LinkPred => ClientData::link_task(
                    k,
                    sub,
                    cfg.split.edge_train_frac,
                    cfg.split.edge_val_frac,
                    client_probe,
                    cfg.run_seed,
                )?,
            };
            clients.push(data);
        }
        Ok(Experiment {
            config: cfg.clone(),
            graph,
            partition,
            clients,
            dims,
            init,
        })
    }

    /// Each client's node split mapped back to global node ids.
    pub fn global_splits(&self) -> Vec<GlobalSplit> {
        self.clients
            .iter()
            .map(|c| {
                let ids = c
                    .graph
                    .node_ids()
                    .expect("client graphs are induced subgraphs");
                let map = |v: &[usize]| v.iter().map(|&i| ids[i]).collect::<Vec<_>>();
                let s = c.split().expect("node task");
                GlobalSplit {
                    client_id: c.id,
                    train_ids: map(&s.train_ids),
                    val_ids: map(&s.val_ids),
                    test_ids: map(&s.test_ids),
                }
            })
            .collect()
    }
}

/// A run in progress: client states, server memory and the worker pool.
pub struct Simulation {
    pub strategy: Strategy,
    pub training: LocalTraining,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub oracle: Option<Oracle>,
    pool: rayon::ThreadPool,
}

impl Simulation {
    /// `workers = 0` lets the thread pool pick its size.
    pub fn new(exp: &Experiment, workers: usize) -> Result<Self> {
        let strategy = Strategy::from_config(&exp.config);
        let training = LocalTraining::from_config(&exp.config);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))?;
        let oracle = if strategy.kind == StrategyKind::Oracle {
            let input = PropagatedInput::from_graph(&exp.graph)?;
            Some(Oracle::new(
                input,
                exp.graph.labels().to_vec(),
                exp.global_splits(),
                &exp.init,
            )?)
        } else {
            None
        };
        let clients = if oracle.is_some() {
            Vec::new()
        } else {
            exp.clients
                .iter()
                .map(|d| ClientState::new(d.clone(), &exp.init, strategy.mask_classifier))
                .collect()
        };
        Ok(Simulation {
            server: ServerState::new(&exp.init, exp.clients.len()),
            strategy,
            training,
            clients,
            oracle,
            pool,
        })
    }

    /// Number of completed rounds.
    pub fn round(&self) -> usize {
        self.server.round
    }

    pub fn step(&mut self) -> Result<Vec<RoundRecord>> {
        match &mut self.oracle {
            Some(o) => {
                self.server.round += 1;
                o.run_round(self.server.round, &self.training)
            }
            None => run_round(
                &mut self.server,
                &mut self.clients,
                &self.strategy,
                &self.training,
                &self.pool,
            ),
        }
    }

    /// Final per-client checkpoints (a single one for the oracle).
    pub fn checkpoints(&self) -> Vec<(String, Checkpoint)> {
        let round = self.round();
        if let Some(o) = &self.oracle {
            return vec![(
                "oracle.json".into(),
                Checkpoint::new(round, None, &o.params, None),
            )];
        }
        self.clients
            .iter()
            .map(|c| {
                let masks = self.strategy.uses_masks().then_some(&c.masks);
                (
                    format!("client_{}.json", c.id()),
                    Checkpoint::new(round, Some(c.id()), &c.params, masks),
                )
            })
            .collect()
    }
}

pub fn write_metrics(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    if records.is_empty() {
        w.write_record(METRICS_HEADER)
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const METRICS_HEADER: [&str; 13] = [
    "round",
    "client_id",
    "strategy",
    "train_loss",
    "task_loss",
    "l1_term",
    "prox_term",
    "train_acc",
    "val_acc",
    "test_acc",
    "sparsity",
    "params_sent",
    "params_received",
];

pub fn read_metrics(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Format(format!(
            "{}: unexpected metrics header",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// In-memory results of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<RoundRecord>,
    /// Server similarity matrices saved at the snapshot rounds.
    pub similarity: BTreeMap<usize, Array2<f64>>,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Executes every round of `cfg` and writes the run directory: manifest,
/// metrics table (rewritten after each round), checkpoints, and similarity
/// snapshots.
pub fn run_experiment(cfg: &RunConfig, dir: &Path, workers: usize) -> Result<RunOutcome> {
    let exp = Experiment::prepare(cfg)?;
    for sub in [CHECKPOINT_DIR, SIMILARITY_DIR, REPORT_DIR] {
        create_dir(&dir.join(sub))?;
    }
    RunManifest::new(cfg.clone()).write(&dir.join(MANIFEST_FILE))?;
    Checkpoint::new(0, None, &exp.init, None).write(&dir.join(CHECKPOINT_DIR).join("init.json"))?;

    let rounds = cfg.training.rounds;
    let snapshots: BTreeSet<usize> = cfg
        .output
        .snapshot_rounds
        .iter()
        .copied()
        .chain(std::iter::once(rounds))
        .collect();
    let mut sim = Simulation::new(&exp, workers)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut records = Vec::new();
    let mut similarity = BTreeMap::new();
    write_metrics(&metrics_path, &records)?;
    for _ in 0..rounds {
        let batch = sim.step()?;
        let round = sim.round();
        log::info!(
            "round {round}: mean test accuracy {:.4}",
            batch.iter().map(|r| r.test_acc).sum::<f64>() / batch.len().max(1) as f64
        );
        records.extend(batch);
        write_metrics(&metrics_path, &records)?;
        if snapshots.contains(&round) {
            if let Some(s) = &sim.server.similarity {
                let base = dir.join(SIMILARITY_DIR).join(format!("round_{round}"));
                write_matrix_csv(&base.with_extension("csv"), s)?;
                write_pgm(&base.with_extension("pgm"), s)?;
                similarity.insert(round, s.clone());
            }
        }
    }
    if rounds > 0 {
        let final_dir = dir.join(CHECKPOINT_DIR).join("final");
        create_dir(&final_dir)?;
        for (name, ckpt) in sim.checkpoints() {
            ckpt.write(&final_dir.join(name))?;
        }
    }
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        records,
        similarity,
    })
}
