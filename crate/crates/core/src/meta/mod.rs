//! Task-embedding meta-learning: the alternating inner/outer loop, its
//! compositional variant, multitask and task-agnostic baselines, k-shot
//! adaptation and evaluation.

mod adapt;
mod eval;
mod pca;
mod train;

use serde::{Deserialize, Serialize};

use crate::benchgen::Family;
use crate::model::ModelError;
use crate::numerics::{AdamConfig, TensorError};

pub use adapt::{
    adapt_task_embedding, evaluate_code, AdaptationResult, CodeEval, CodeTemplate, InnerLoop, StopReason,
};
pub use eval::{
    adapt_test_task, aggregate, aggregate_trials, evaluate, evaluate_task, metric_rows_to_csv, AdaptMethod, AdaptedState,
    Metric, MetricRow, TaskMetric, CSV_HEADER,
};
pub use pca::{pca_project, PcaResult};
pub use train::{
    comp_tam_train, compatibility_violations, multitask_train, tam_train, task_agnostic_train, train, LogEvent, TrainMethod, TrainOptions,
    TrainOutcome, TrainerState,
};

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("invalid training config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("non-finite loss {loss} at inner step {step} (|z| = {z_norm})")]
    NonFiniteLoss { step: usize, loss: f64, z_norm: f64 },
    #[error("non-finite outer gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("task {task} has {found} examples, fewer than the {needed} required")]
    TooFewExamples { task: usize, needed: usize, found: usize },
    #[error("no training tasks")]
    NoTasks,
    #[error("{0}")]
    Method(String),
    #[error("expected a {expected:?} benchmark, got {found:?}")]
    FamilyMismatch { expected: Family, found: Family },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TamConfig {
    /// Inner-loop z updates per task (training and validation).
    pub max_inner_steps: usize,
    pub inner_optimizer: AdamConfig,
    pub outer_optimizer: AdamConfig,
    /// Optimizer for the multitask embedding table.
    pub embedding_optimizer: AdamConfig,
    /// Examples sampled per outer iteration.
    pub examples_per_task: usize,
    /// Consecutive non-improving steps before the inner loop stops; `None`
    /// disables early stopping.
    pub early_stop_patience: Option<usize>,
    /// A step improves when it lowers the best loss by more than this.
    pub improvement_tolerance: f64,
    pub max_outer_iterations: usize,
    pub k_values: Vec<usize>,
    pub adaptation_steps_at_test: usize,
    pub finetune_steps: usize,
    pub finetune_optimizer: AdamConfig,
    /// Validate every this many outer iterations; 0 disables validation.
    pub validation_interval: usize,
    pub validation_k: usize,
    /// Evaluation examples per validation task (all when 0).
    pub validation_examples: usize,
    /// Multitask compositional training: chance that one slot of a training
    /// task is replaced by the unknown-primitive embedding.
    pub unknown_slot_probability: f64,
    pub seed: u64,
}

impl Default for TamConfig {
    fn default() -> Self {
        Self {
            max_inner_steps: 25,
            inner_optimizer: AdamConfig::with_learning_rate(1e-2),
            outer_optimizer: AdamConfig::with_learning_rate(1e-3),
            embedding_optimizer: AdamConfig::with_learning_rate(1e-2),
            examples_per_task: 300,
            early_stop_patience: Some(1),
            improvement_tolerance: 1e-6,
            max_outer_iterations: 2000,
            k_values: vec![1, 5, 10, 20],
            adaptation_steps_at_test: 25,
            finetune_steps: 100,
            finetune_optimizer: AdamConfig::with_learning_rate(1e-3),
            validation_interval: 250,
            validation_k: 20,
            validation_examples: 100,
            unknown_slot_probability: 0.25,
            seed: 0,
        }
    }
}

impl TamConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.examples_per_task == 0 {
            v.push("examples_per_task must be positive".into());
        }
        if self.k_values.is_empty() {
            v.push("k_values must not be empty".into());
        }
        if self.k_values.contains(&0) {
            v.push("k_values must be positive".into());
        }
        let max_k = self.k_values.iter().copied().max().unwrap_or(0).max(self.validation_k);
        if self.examples_per_task < max_k {
            v.push(format!(
                "examples_per_task ({}) must be at least the largest k ({max_k})",
                self.examples_per_task
            ));
        }
        if self.early_stop_patience == Some(0) {
            v.push("early_stop_patience must be positive or null".into());
        }
        if !(self.improvement_tolerance >= 0.0) {
            v.push("improvement_tolerance must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.unknown_slot_probability) {
            v.push("unknown_slot_probability must lie in [0, 1]".into());
        }
        for (name, opt) in [
            ("inner_optimizer", &self.inner_optimizer),
            ("outer_optimizer", &self.outer_optimizer),
            ("embedding_optimizer", &self.embedding_optimizer),
            ("finetune_optimizer", &self.finetune_optimizer),
        ] {
            if !(opt.learning_rate >= 0.0 && opt.learning_rate.is_finite()) {
                v.push(format!("{name}.learning_rate must be finite and non-negative"));
            }
            if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
                v.push(format!("{name} betas must lie in [0, 1)"));
            }
            if !(opt.epsilon > 0.0) {
                v.push(format!("{name}.epsilon must be positive"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), MetaError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MetaError::Config(v))
        }
    }
}
