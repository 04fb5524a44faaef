use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DrlConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Plain fine-tuning.
    Naive,
    /// Naive plus a growing memory of `growing_quota` items per batch.
    Rehearsal,
    /// Batch-level experience replay with a final review pass.
    Berr,
    /// Mini-batch experience replay from a reservoir.
    Replay,
    /// `Replay` with the representation-similarity loss added.
    Drl,
    /// Frozen projection, single-pass linear classifier, reservoir of
    /// projected representations.
    FrozenOnline,
    /// Shared trunk, per-task heads, quota exemplar memory.
    Multihead,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// How BERR folds an incoming batch into its reservoir.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "per_batch")]
pub enum MemoryUpdate {
    /// Reservoir insertion of every sample.
    Reservoir,
    /// Reservoir insertion of a uniform subsample of this many items.
    Subsample(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub lr_replay: f64,
    pub lr_review: f64,
    pub mem_sz: usize,
    pub replay_sz: usize,
    pub review_sz: usize,
    pub growing_quota: usize,
    pub memory_update: MemoryUpdate,
    pub drl: DrlConfig,
    /// Exemplar budget `N` of the multi-head pipeline.
    pub quota_budget: usize,
    /// Epochs for the pipeline's fine-tuning steps.
    pub pipeline_epochs: usize,
    pub prior_correction: bool,
    /// Log current-vs-memory gradient alignment each batch (replay loops).
    pub log_alignment: bool,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Naive,
            epochs: 4,
            minibatch: 32,
            lr: 0.05,
            lr_replay: 0.05,
            lr_review: 0.01,
            mem_sz: 300,
            replay_sz: 100,
            review_sz: 300,
            growing_quota: 20,
            memory_update: MemoryUpdate::Reservoir,
            drl: DrlConfig::default(),
            quota_budget: 100,
            pipeline_epochs: 1,
            prior_correction: false,
            log_alignment: false,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        let mut cfg = Self {
            kind,
            ..Self::default()
        };
        match kind {
            StrategyKind::Drl => {
                cfg.drl.lambda = 1e-3;
                cfg.log_alignment = true;
            }
            StrategyKind::FrozenOnline => cfg.epochs = 1,
            _ => {}
        }
        cfg
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_replay", self.lr_replay),
            ("lr_review", self.lr_review),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        self.drl.validate()?;
        match self.kind {
            StrategyKind::Berr => {
                if self.mem_sz == 0 {
                    return Err(Error::Config("BERR needs mem_sz > 0".into()));
                }
                if self.lr_review > self.lr_replay {
                    return Err(Error::Config(
                        "BERR review learning rate must not exceed the replay rate".into(),
                    ));
                }
            }
            StrategyKind::Drl | StrategyKind::Replay if self.mem_sz == 0 => {
                return Err(Error::Config("replay strategies need mem_sz > 0".into()));
            }
            StrategyKind::FrozenOnline if self.epochs != 1 => {
                return Err(Error::Precondition(format!(
                    "online strategy uses each example once; epochs must be 1, got {}",
                    self.epochs
                )));
            }
            StrategyKind::Multihead if self.quota_budget == 0 => {
                return Err(Error::Config("multi-head pipeline needs quota_budget > 0".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Identity,
    #[default]
    RandomRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the MLP (or trunk).
    pub hidden: Vec<usize>,
    pub projection: ProjectionKind,
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            projection: ProjectionKind::RandomRelu,
            projection_dim: 64,
        }
    }
}

/// Hard caps on a run. A run that would exceed one stops early and is
/// flagged.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub max_steps: Option<u64>,
    pub max_seconds: Option<f64>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == Some(0) {
            return Err(Error::Config("budget max_steps must be positive".into()));
        }
        if let Some(s) = self.max_seconds {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config("budget max_seconds must be positive".into()));
            }
        }
        Ok(())
    }
}
