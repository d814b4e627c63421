use crate::config::{CommunityModeKind, EmbeddingLayer, RunConfig, SimilaritySource, StrategyKind};
use crate::fl::aggregate::CommunityMode;

/// Federated algorithm plus the options that shape its local objective and
/// server aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub tau: f64,
    /// Coefficient of `Σ|μ|`.
    pub l1: f64,
    /// Coefficient of `‖θ ⊙ μ − θ̄‖²`.
    pub l2: f64,
    /// Test-time and transmission cut-off on `|μ|`.
    pub mask_threshold: f64,
    pub similarity: SimilaritySource,
    pub community: CommunityMode,
    pub embedding_layer: EmbeddingLayer,
    pub fedprox_mu: f64,
    pub mask_classifier: bool,
}

impl Strategy {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let community = match cfg.strategy.community {
            CommunityModeKind::Implicit => CommunityMode::Implicit,
            CommunityModeKind::Explicit => {
                CommunityMode::Explicit(cfg.strategy.community_threshold)
            }
        };
        Strategy {
            kind: cfg.strategy.kind,
            tau: cfg.tau(),
            l1: cfg.training.l1,
            l2: cfg.training.l2,
            mask_threshold: cfg.training.mask_threshold,
            similarity: cfg.strategy.similarity,
            community,
            embedding_layer: cfg.strategy.embedding_layer,
            fedprox_mu: cfg.training.fedprox_mu,
            mask_classifier: cfg.model.mask_classifier,
        }
    }

    /// Whether clients train a private mask.
    pub fn uses_masks(&self) -> bool {
        self.kind == StrategyKind::FedPub
    }

    /// Whether the server receives and dispatches parameters.
    pub fn is_federated(&self) -> bool {
        matches!(
            self.kind,
            StrategyKind::FedPub
                | StrategyKind::FedAvg
                | StrategyKind::FedProx
                | StrategyKind::FedPer
        )
    }
}

/// Optimizer settings of one client's local training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    /// Full-graph gradient steps per round.
    pub epochs: usize,
    pub lr: f64,
    /// Zero freezes the mask.
    pub mask_lr: f64,
}

impl LocalTraining {
    pub fn from_config(cfg: &RunConfig) -> Self {
        LocalTraining {
            epochs: cfg.training.local_epochs,
            lr: cfg.training.lr,
            mask_lr: cfg.mask_lr(),
        }
    }
}
