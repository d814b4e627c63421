//! Experiment configuration, seed derivation and sweep expansion.
//!
//! One TOML document describes a whole run. Every section and field is
//! optional; missing values take the defaults below. A top-level `[sweep]`
//! table maps dotted field paths to lists of values and expands into one
//! config per point of the Cartesian product.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic 64-bit seed for one `(tag, client, round)` stream of a run.
pub fn derive_seed(run_seed: u64, tag: &str, client: u64, round: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(client.to_le_bytes());
    h.update(round.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSource {
    /// Stochastic block model; labels are block indices.
    Sbm(SbmSpec),
    File {
        path: PathBuf,
    },
}

impl Default for GraphSource {
    fn default() -> Self {
        GraphSource::Sbm(SbmSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            block_sizes: vec![100, 100, 100],
            p_in: 0.3,
            p_out: 0.02,
            feat_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Balanced {
        clients: usize,
    },
    Louvain {
        clients: usize,
    },
    Random {
        clients: usize,
    },
    Overlapping {
        base_parts: usize,
        samples_per_part: usize,
        node_frac: f64,
    },
    Imbalanced {
        fine_parts: usize,
        group_sizes: Vec<usize>,
    },
    /// Consecutive node-id ranges of `size` nodes (the last may be shorter).
    Chunks {
        size: usize,
    },
    File {
        path: PathBuf,
    },
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Balanced { clients: 10 }
    }
}

impl PartitionSpec {
    /// Whether clients may share nodes, which selects the default `τ`.
    pub fn is_overlapping(&self) -> bool {
        matches!(self, PartitionSpec::Overlapping { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    /// Edge fractions used by the link task.
    pub edge_train_frac: f64,
    pub edge_val_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_frac: 0.2,
            val_frac: 0.35,
            edge_train_frac: 0.7,
            edge_val_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub mask_classifier: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            mask_classifier: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    /// Learning rate of the mask; `None` uses `lr`, zero freezes the mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_lr: Option<f64>,
    pub l1: f64,
    pub l2: f64,
    pub mask_threshold: f64,
    pub fedprox_mu: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            rounds: 100,
            local_epochs: 1,
            lr: 0.001,
            mask_lr: None,
            l1: 0.001,
            l2: 0.001,
            mask_threshold: 0.5,
            fedprox_mu: 0.01,
        }
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}; expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(StrategyKind {
    FedPub => "fedpub",
    FedAvg => "fedavg",
    FedProx => "fedprox",
    FedPer => "fedper",
    Local => "local",
    Oracle => "oracle",
});

string_enum!(
    /// What the server compares to decide aggregation weights.
    SimilaritySource {
        Functional => "functional",
        Parameter => "parameter",
        Gradient => "gradient",
        Label => "label",
    }
);

string_enum!(CommunityModeKind {
    Implicit => "implicit",
    Explicit => "explicit",
});

string_enum!(
    /// Which output of the model on the probe graph is averaged.
    EmbeddingLayer {
        Hidden => "hidden",
        PreActivation => "pre_activation",
        Logits => "logits",
    }
);

string_enum!(ProbeVariant {
    Sbm => "sbm",
    Er => "er",
    One => "one",
    Feature => "feature",
});

string_enum!(TaskKind {
    NodeClf => "node_clf",
    LinkPred => "link_pred",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Softmax temperature; `None` resolves to 5 for overlapping partitions
    /// and 3 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub similarity: SimilaritySource,
    pub community: CommunityModeKind,
    /// Similarity cut-off used by the explicit community mode.
    pub community_threshold: f64,
    pub embedding_layer: EmbeddingLayer,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::FedPub,
            tau: None,
            similarity: SimilaritySource::Functional,
            community: CommunityModeKind::Implicit,
            community_threshold: 0.5,
            embedding_layer: EmbeddingLayer::Hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub variant: ProbeVariant,
    pub blocks: usize,
    pub block_size: usize,
    pub p_in: f64,
    pub p_out: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            variant: ProbeVariant::Sbm,
            blocks: 5,
            block_size: 100,
            p_in: 0.1,
            p_out: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory; the command line may override it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Rounds whose similarity matrix is saved; the final round always is.
    pub snapshot_rounds: Vec<usize>,
}

/// A fully defaulted experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_seed: u64,
    pub task: TaskKind,
    pub graph: GraphSource,
    pub partition: PartitionSpec,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub strategy: StrategyConfig,
    pub probe: ProbeConfig,
    pub output: OutputConfig,
}

#[allow(clippy::derivable_impls)]
impl Default for TaskKind {
    fn default() -> Self {
        TaskKind::NodeClf
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    check((0.0..=1.0).contains(&p), || {
        format!("{name} = {p} must lie in [0, 1]")
    })
}

fn check_nonneg(name: &str, x: f64) -> Result<()> {
    check(x >= 0.0 && x.is_finite(), || {
        format!("{name} = {x} must be a finite value >= 0")
    })
}

fn check_positive(name: &str, x: usize) -> Result<()> {
    check(x >= 1, || format!("{name} = {x} must be >= 1"))
}

impl RunConfig {
    /// Parses and validates one config document (without a `[sweep]` table).
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Softmax temperature after resolving the partition-dependent default.
    pub fn tau(&self) -> f64 {
        self.strategy
            .tau
            .unwrap_or(if self.partition.is_overlapping() {
                5.0
            } else {
                3.0
            })
    }

    pub fn mask_lr(&self) -> f64 {
        self.training.mask_lr.unwrap_or(self.training.lr)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.graph {
            GraphSource::Sbm(s) => {
                check(!s.block_sizes.is_empty(), || {
                    "graph.block_sizes must not be empty".into()
                })?;
                for &b in &s.block_sizes {
                    check_positive("graph.block_sizes entry", b)?;
                }
                check_prob("graph.p_in", s.p_in)?;
                check_prob("graph.p_out", s.p_out)?;
                check(s.p_out <= s.p_in, || {
                    format!(
                        "graph.p_out = {} must not exceed graph.p_in = {}",
                        s.p_out, s.p_in
                    )
                })?;
                check_positive("graph.feat_dim", s.feat_dim)?;
            }
            GraphSource::File { .. } => {}
        }
        match &self.partition {
            PartitionSpec::Balanced { clients }
            | PartitionSpec::Louvain { clients }
            | PartitionSpec::Random { clients } => check_positive("partition.clients", *clients)?,
            PartitionSpec::Overlapping {
                base_parts,
                samples_per_part,
                node_frac,
            } => {
                check_positive("partition.base_parts", *base_parts)?;
                check_positive("partition.samples_per_part", *samples_per_part)?;
                check(*node_frac > 0.0 && *node_frac <= 1.0, || {
                    format!("partition.node_frac = {node_frac} must lie in (0, 1]")
                })?;
            }
            PartitionSpec::Imbalanced {
                fine_parts,
                group_sizes,
            } => {
                check_positive("partition.fine_parts", *fine_parts)?;
                for &g in group_sizes {
                    check_positive("partition.group_sizes entry", g)?;
                }
                let total: usize = group_sizes.iter().sum();
                check(total <= *fine_parts, || {
                    format!(
                        "partition.group_sizes sum to {total}, more than fine_parts = {fine_parts}"
                    )
                })?;
            }
            PartitionSpec::Chunks { size } => check_positive("partition.size", *size)?,
            PartitionSpec::File { .. } => {}
        }
        let s = &self.split;
        check_prob("split.train_frac", s.train_frac)?;
        check_prob("split.val_frac", s.val_frac)?;
        check(s.train_frac + s.val_frac <= 1.0 + 1e-12, || {
            "split.train_frac + split.val_frac must be <= 1".into()
        })?;
        check(s.train_frac > 0.0, || "split.train_frac must be > 0".into())?;
        check_prob("split.edge_train_frac", s.edge_train_frac)?;
        check_prob("split.edge_val_frac", s.edge_val_frac)?;
        check(s.edge_train_frac + s.edge_val_frac <= 1.0 + 1e-12, || {
            "split.edge_train_frac + split.edge_val_frac must be <= 1".into()
        })?;
        check(s.edge_train_frac > 0.0, || {
            "split.edge_train_frac must be > 0".into()
        })?;

        check_positive("model.hidden", self.model.hidden)?;

        let t = &self.training;
        check(t.lr > 0.0 && t.lr.is_finite(), || {
            format!("training.lr = {} must be > 0", t.lr)
        })?;
        if let Some(m) = t.mask_lr {
            check_nonneg("training.mask_lr", m)?;
        }
        check_nonneg("training.l1", t.l1)?;
        check_nonneg("training.l2", t.l2)?;
        check_nonneg("training.mask_threshold", t.mask_threshold)?;
        check_nonneg("training.fedprox_mu", t.fedprox_mu)?;

        if let Some(tau) = self.strategy.tau {
            check_nonneg("strategy.tau", tau)?;
        }
        let thr = self.strategy.community_threshold;
        check((-1.0..=1.0).contains(&thr), || {
            format!("strategy.community_threshold = {thr} must lie in [-1, 1]")
        })?;

        let p = &self.probe;
        check_positive("probe.blocks", p.blocks)?;
        check_positive("probe.block_size", p.block_size)?;
        check_prob("probe.p_in", p.p_in)?;
        check_prob("probe.p_out", p.p_out)?;
        check(p.p_out <= p.p_in, || {
            format!(
                "probe.p_out = {} must not exceed probe.p_in = {}",
                p.p_out, p.p_in
            )
        })?;
        Ok(())
    }

    /// Seeds handed to each module, recorded in the manifest.
    pub fn module_seeds(&self) -> BTreeMap<String, u64> {
        [
            SEED_GRAPH,
            SEED_PARTITION,
            SEED_SPLIT,
            SEED_INIT,
            SEED_PROBE,
        ]
        .into_iter()
        .map(|tag| (tag.to_string(), derive_seed(self.run_seed, tag, 0, 0)))
        .collect()
    }
}

pub const SEED_GRAPH: &str = "graph";
pub const SEED_PARTITION: &str = "partition";
pub const SEED_SPLIT: &str = "split";
pub const SEED_INIT: &str = "init";
pub const SEED_PROBE: &str = "probe";
pub const SEED_NEGATIVES: &str = "negatives";

/// One expanded point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Directory-safe name such as `training.l1=0.3`; empty without a sweep.
    pub name: String,
    pub config: RunConfig,
}

/// Parses a document that may carry a `[sweep]` table and expands it.
///
/// Each sweep key is a dotted path into the document, for example
/// `"training.l1" = [0.3, 0.5]`. Points are produced in row-major order over
/// the keys sorted by name.
pub fn expand_sweep(text: &str) -> Result<Vec<SweepPoint>> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let sweep = match doc.remove("sweep") {
        None => {
            let config = RunConfig::parse(text)?;
            return Ok(vec![SweepPoint {
                name: String::new(),
                config,
            }]);
        }
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(Error::Config("sweep must be a table of lists".into())),
    };
    let mut axes: Vec<(String, Vec<toml::Value>)> = Vec::new();
    for (key, values) in sweep {
        match values {
            toml::Value::Array(v) if !v.is_empty() => axes.push((key, v)),
            _ => {
                return Err(Error::Config(format!(
                    "sweep.{key} must be a non-empty list"
                )))
            }
        }
    }
    let mut points = Vec::new();
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    for flat in 0..total {
        let mut rest = flat;
        let mut point_doc = doc.clone();
        let mut name_parts = Vec::new();
        let mut picks = vec![0; axes.len()];
        for (a, (_, values)) in axes.iter().enumerate().rev() {
            picks[a] = rest % values.len();
            rest /= values.len();
        }
        for ((key, values), &pick) in axes.iter().zip(&picks) {
            let value = values[pick].clone();
            name_parts.push(format!("{key}={}", value_label(&value)));
            set_path(&mut point_doc, key, value)?;
        }
        let text = toml::to_string(&point_doc).map_err(|e| Error::Internal(e.to_string()))?;
        let config = RunConfig::parse(&text)?;
        points.push(SweepPoint {
            name: name_parts.join(","),
            config,
        });
    }
    Ok(points)
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_path(doc: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty sweep key {path:?}")))?;
    let mut table = doc;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "sweep key {path:?} crosses non-table field {part:?}"
                )))
            }
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

pub fn read_config(path: &Path) -> Result<Vec<SweepPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    expand_sweep(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Everything needed to replay a run, written before round 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub software_version: String,
    /// Seconds since the Unix epoch when the run started.
    pub started_at: u64,
    pub seeds: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        let started_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        RunManifest {
            seeds: config.module_seeds(),
            config,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.hidden, 128);
        assert_eq!(cfg.training.lr, 0.001);
        assert_eq!(cfg.training.l1, 0.001);
        assert_eq!(cfg.training.l2, 0.001);
        assert_eq!(cfg.training.rounds, 100);
        assert_eq!(cfg.training.local_epochs, 1);
        assert_eq!(cfg.training.mask_threshold, 0.5);
        assert_eq!(cfg.training.fedprox_mu, 0.01);
        assert_eq!(cfg.tau(), 3.0);
        assert_eq!(cfg.mask_lr(), 0.001);
    }

    #[test]
    fn tau_default_depends_on_partition() {
        let cfg = RunConfig::parse(
            "[partition]\nkind = \"overlapping\"\nbase_parts = 2\nsamples_per_part = 5\nnode_frac = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.tau(), 5.0);
        let cfg = RunConfig::parse("[strategy]\ntau = 10.0\n").unwrap();
        assert_eq!(cfg.tau(), 10.0);
    }

    #[test]
    fn validation_errors_name_the_field() {
        let err = RunConfig::parse("[training]\nl1 = -1.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("training.l1"), "{err}");
        let err = RunConfig::parse("[training]\nlr = 0.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("training.lr"), "{err}");
        let err = RunConfig::parse("[probe]\np_in = 1.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("probe.p_in"), "{err}");
        let err = RunConfig::parse("[split]\ntrain_frac = 0.8\nval_frac = 0.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("split"), "{err}");
    }

    #[test]
    fn unknown_keys_list_the_valid_ones() {
        let err = RunConfig::parse("[training]\nepochs = 3\n")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("epochs") && err.contains("local_epochs"),
            "{err}"
        );
        let err = RunConfig::parse("bogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("run_seed"), "{err}");
        let err = RunConfig::parse("[strategy]\nkind = \"fedsgd\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("fedpub"), "{err}");
    }

    #[test]
    fn full_scale_values_accepted() {
        let cfg = RunConfig::parse("[training]\nrounds = 100\nlocal_epochs = 1\n").unwrap();
        assert_eq!(cfg.training.rounds, 100);
    }

    #[test]
    fn tagged_sections_parse() {
        let cfg = RunConfig::parse(
            "[graph]\nkind = \"sbm\"\nblock_sizes = [150, 450]\np_in = 0.7\np_out = 0.01\n\n\
             [partition]\nkind = \"chunks\"\nsize = 30\n",
        )
        .unwrap();
        assert_eq!(
            cfg.graph,
            GraphSource::Sbm(SbmSpec {
                block_sizes: vec![150, 450],
                p_in: 0.7,
                p_out: 0.01,
                feat_dim: 32
            })
        );
        assert_eq!(cfg.partition, PartitionSpec::Chunks { size: 30 });
        assert!(RunConfig::parse("[graph]\nkind = \"sbm\"\nfoo = 1\n").is_err());
        assert!(RunConfig::parse("[partition]\nkind = \"chunks\"\n").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let docs = [
            "",
            "run_seed = 7\ntask = \"link_pred\"\n[training]\nmask_lr = 0.0\n[strategy]\ntau = 0.0\nkind = \"fedavg\"\n",
            "[graph]\nkind = \"file\"\npath = \"g.json\"\n[partition]\nkind = \"imbalanced\"\nfine_parts = 6\ngroup_sizes = [3, 2]\n",
            "[output]\nsnapshot_rounds = [1, 20]\ndir = \"out\"\n",
        ];
        for doc in docs {
            let once = RunConfig::parse(doc).unwrap();
            let twice = RunConfig::parse(&once.to_toml().unwrap()).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn sweep_expands_cartesian_product() {
        let points = expand_sweep(
            "[training]\nrounds = 2\n[sweep]\n\"training.l1\" = [0.3, 0.5]\n\"strategy.kind\" = [\"fedpub\", \"fedavg\"]\n",
        )
        .unwrap();
        assert_eq!(points.len(), 4);
        assert_eq!(points[0].name, "strategy.kind=fedpub,training.l1=0.3");
        assert_eq!(points[1].config.training.l1, 0.5);
        assert_eq!(points[2].config.strategy.kind, StrategyKind::FedAvg);
        assert!(points.iter().all(|p| p.config.training.rounds == 2));
        let plain = expand_sweep("").unwrap();
        assert_eq!(plain.len(), 1);
        assert!(plain[0].name.is_empty());
        assert!(expand_sweep("[sweep]\n\"training.l1\" = []\n").is_err());
        assert!(expand_sweep("[sweep]\n\"training.l1\" = [-1.0]\n").is_err());
    }

    #[test]
    fn derive_seed_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(1, "init", 2, 3), derive_seed(1, "init", 2, 3));
        assert_ne!(derive_seed(1, "init", 2, 3), derive_seed(1, "init", 2, 4));
        assert_ne!(derive_seed(1, "init", 2, 3), derive_seed(1, "probe", 2, 3));
        assert_ne!(derive_seed(1, "ab", 0, 0), derive_seed(1, "a", 0, 0));
    }

    #[test]
    fn derived_seeds_do_not_collide() {
        let mut seen = HashSet::new();
        for client in 0..100 {
            for round in 0..100 {
                assert!(seen.insert(derive_seed(42, "train", client, round)));
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = RunManifest::new(RunConfig::default());
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        assert_eq!(m.seeds.len(), 5);
    }

    proptest! {
        #[test]
        fn numeric_fields_round_trip(l1 in 0.0f64..10.0, lr in 1e-6f64..1.0, seed in any::<u64>(), rounds in 0usize..1000) {
            let mut cfg = RunConfig::default();
            cfg.training.l1 = l1;
            cfg.training.lr = lr;
            cfg.training.rounds = rounds;
            cfg.run_seed = seed;
            let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
