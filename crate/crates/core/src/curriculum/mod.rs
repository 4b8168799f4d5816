//! Training orchestration: joint, taskwise and continual training, the
//! permutation sweep, and zero-shot evaluation.

mod checkpoint;
mod sweep;
mod train;
mod zeroshot;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::datasets::{DatasetError, EmbeddingRecord, Manifest};
use crate::embedding::{EmbeddingError, FusionMode};
use crate::evalreport::ReportError;
use crate::nn::{NnError, WeightDecayMode};
use crate::replay::{BufferPolicy, ReplayError, ReservoirScope};

pub use checkpoint::{RunCheckpoint, RUN1_MAGIC, RUN1_VERSION};
pub use sweep::{
    order_label, permutations, permutation_sweep, SweepAggregate, SweepOptions, SweepResult, SweepRow,
};
pub use train::{
    evaluate, train, train_continual, train_supervised, train_taskwise, ContinualRunner,
    StreamState,
};
pub use zeroshot::{evaluate_zero_shot, ZERO_SHOT_METHOD};

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("run checkpoint: {0}")]
    Codec(#[from] CodecError),
    #[error("run checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("task {0} appears more than once in the curriculum")]
    RepeatedTask(u16),
    #[error("task {0} is not in the dataset manifest")]
    UnknownTask(u16),
    #[error("curriculum is empty")]
    EmptyCurriculum,
    #[error("no training records for {0}")]
    EmptyTraining(String),
    #[error("no test records for {0}")]
    EmptyEvaluation(String),
    #[error("non-finite loss on task {task_id}, epoch {epoch}, step {step}")]
    NonFiniteLoss { task_id: u16, epoch: usize, step: u64 },
    #[error("operation needs mode {expected}, config has {found}")]
    WrongMode { expected: &'static str, found: TrainMode },
    #[error("the permutation sweep needs exactly 3 tasks, found {0} (enable allow_n to override)")]
    TaskCount(usize),
    #[error("fusion {fusion} cannot combine widths {image} and {text}")]
    FusionWidths { fusion: FusionMode, image: usize, text: usize },
    #[error("no prompt set for task {0}")]
    MissingPrompts(u16),
    #[error("prompt width {prompt} differs from image width {image}")]
    PromptWidth { prompt: usize, image: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("checkpoint does not belong to this run: {0}")]
    CheckpointMismatch(String),
}

impl CurriculumError {
    /// True for failures caused by numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, CurriculumError::NonFiniteLoss { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Joint,
    Taskwise,
    Continual,
    #[serde(rename = "continual-noreplay")]
    ContinualNoReplay,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] =
        [TrainMode::Joint, TrainMode::Taskwise, TrainMode::Continual, TrainMode::ContinualNoReplay];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::Taskwise => "taskwise",
            TrainMode::Continual => "continual",
            TrainMode::ContinualNoReplay => "continual-noreplay",
        }
    }

    pub fn is_continual(self) -> bool {
        matches!(self, TrainMode::Continual | TrainMode::ContinualNoReplay)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = CurriculumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CurriculumError::BadConfig(format!("unknown mode `{s}`")))
    }
}

/// Optimization settings for one curriculum position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl TrainConfig {
    pub fn first_task() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            dropout_rate: 0.2,
            batch_size: 256,
            epochs: 25,
        }
    }

    pub fn later_tasks() -> Self {
        TrainConfig { learning_rate: 5e-6, weight_decay: 2e-5, ..Self::first_task() }
    }

    fn validate(&self, which: &str) -> Result<(), CurriculumError> {
        let bad = |m: String| Err(CurriculumError::BadConfig(format!("{which}: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub fusion: FusionMode,
    pub policy: BufferPolicy,
    pub reservoir_scope: ReservoirScope,
    pub per_class_capacity: usize,
    pub replay_batch: usize,
    pub seed: u64,
    /// Task ids in training order; `None` uses manifest order.
    pub order: Option<Vec<u16>>,
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub first_task: TrainConfig,
    pub later_tasks: TrainConfig,
    pub weight_decay_mode: WeightDecayMode,
    /// Used only when the manifest carries no split assignment.
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TrainMode::Joint,
            fusion: FusionMode::Mul,
            policy: BufferPolicy::Reservoir,
            reservoir_scope: ReservoirScope::PerClass,
            per_class_capacity: 25,
            replay_batch: 64,
            seed: 0,
            order: None,
            hidden_dim: 1024,
            num_hidden_layers: 3,
            first_task: TrainConfig::first_task(),
            later_tasks: TrainConfig::later_tasks(),
            weight_decay_mode: WeightDecayMode::Decoupled,
            test_fraction: 0.2,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        self.first_task.validate("first_task")?;
        self.later_tasks.validate("later_tasks")?;
        if self.hidden_dim == 0 {
            return Err(CurriculumError::BadConfig("hidden_dim must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CurriculumError::BadConfig(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    /// Hyperparameters for curriculum position `position`.
    pub fn train_config(&self, position: usize) -> &TrainConfig {
        if position == 0 { &self.first_task } else { &self.later_tasks }
    }

    /// Row label used in summary tables.
    pub fn method_label(&self) -> String {
        match self.mode {
            TrainMode::Joint => format!("CLIP-{}", self.fusion),
            TrainMode::Taskwise => format!("CLIP-{}-taskwise", self.fusion),
            TrainMode::Continual => format!("CLIP-{}-continual-{}", self.fusion, self.policy),
            TrainMode::ContinualNoReplay => format!("CLIP-{}-continual-noreplay", self.fusion),
        }
    }
}

/// One task of the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u16,
    pub name: String,
    pub label_ids: BTreeSet<u16>,
}

impl TaskSpec {
    pub fn accepts(&self, record: &EmbeddingRecord) -> bool {
        record.task_id == self.task_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Curriculum {
    tasks: Vec<TaskSpec>,
}

impl Curriculum {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self, CurriculumError> {
        if tasks.is_empty() {
            return Err(CurriculumError::EmptyCurriculum);
        }
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for t in &tasks {
            if !ids.insert(t.task_id) {
                return Err(CurriculumError::RepeatedTask(t.task_id));
            }
            if !names.insert(t.name.as_str()) {
                return Err(CurriculumError::BadConfig(format!("duplicate task name `{}`", t.name)));
            }
            if t.label_ids.is_empty() {
                return Err(CurriculumError::BadConfig(format!("task {} has no labels", t.task_id)));
            }
        }
        Ok(Curriculum { tasks })
    }

    /// Tasks from `manifest` in `order` (or manifest order).
    pub fn from_manifest(manifest: &Manifest, order: Option<&[u16]>) -> Result<Self, CurriculumError> {
        let ids: Vec<u16> = match order {
            Some(o) => o.to_vec(),
            None => manifest.tasks.iter().map(|t| t.id).collect(),
        };
        let tasks = ids
            .iter()
            .map(|&id| {
                let t = manifest.task(id).ok_or(CurriculumError::UnknownTask(id))?;
                Ok(TaskSpec {
                    task_id: id,
                    name: t.name.clone(),
                    label_ids: t.labels.iter().copied().collect(),
                })
            })
            .collect::<Result<Vec<_>, CurriculumError>>()?;
        Curriculum::new(tasks)
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn order(&self) -> Vec<u16> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }
}

/// What happened while training one curriculum position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub position: usize,
    pub task_id: u16,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub steps: u64,
    /// Current-task records fed to the optimizer (counted once per epoch).
    pub records_seen: u64,
    /// Tasks of the current-task records that were read.
    pub tasks_touched: Vec<u16>,
    pub replayed: u64,
    /// Source tasks of replayed memory items.
    pub replay_sources: Vec<u16>,
    pub inserted: u64,
    pub final_epoch_loss: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_rejects_repeats_and_unknown_ids() {
        let m = Manifest::floodnet_template(4);
        assert!(Curriculum::from_manifest(&m, None).is_ok());
        assert!(matches!(
            Curriculum::from_manifest(&m, Some(&[1, 1, 2])),
            Err(CurriculumError::RepeatedTask(1))
        ));
        assert!(matches!(
            Curriculum::from_manifest(&m, Some(&[0, 5])),
            Err(CurriculumError::UnknownTask(5))
        ));
        assert!(matches!(Curriculum::from_manifest(&m, Some(&[])), Err(CurriculumError::EmptyCurriculum)));
        let c = Curriculum::from_manifest(&m, Some(&[2, 0])).unwrap();
        assert_eq!(c.order(), vec![2, 0]);
    }

    #[test]
    fn default_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.train_config(0).learning_rate, 1e-4);
        assert_eq!(c.train_config(0).weight_decay, 1e-5);
        for p in 1..4 {
            assert_eq!(c.train_config(p).learning_rate, 5e-6);
            assert_eq!(c.train_config(p).weight_decay, 2e-5);
        }
        assert_eq!((c.first_task.batch_size, c.first_task.epochs), (256, 25));
        assert_eq!(c.first_task.dropout_rate, 0.2);
        assert_eq!((c.hidden_dim, c.per_class_capacity), (1024, 25));
        c.validate().unwrap();
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("online".parse::<TrainMode>().is_err());
    }
}
