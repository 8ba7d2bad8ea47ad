//! Synthetic benchmark generation: classification, transduction and
//! path-finding task families, plain and compositional.

pub mod grid;
pub mod io;
pub mod split;
pub mod task;
pub mod transforms;

pub use grid::{Cell, Grid};
pub use io::{load_split, read_split, serialize_split, write_split};
pub use split::{
    build_split, dedup_tasks, primitive_inventory, probe_inputs, task_signature, BenchmarkSplit,
    CompositionalSplit, GenConfig, GenStats, Primitive, SplitMeta, Task, TaskSet,
};
pub use task::{
    classify, eval_classification_pipeline, eval_transduction_pipeline, gen_pathfinding_example,
    Example, Family, Mode, PipelineOutput, Target, TaskKind, TaskSpec, Token,
};
pub use transforms::{
    ElementwiseKind, ElementwiseTransform, FilterKind, FilterTransform, LabelerTransform,
    PositionFn, RearrangeTransform, SubstitutionTransform,
};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("labeler applied to an empty sequence")]
    EmptySequence,
    #[error("position {position} out of range for length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("expected a {expected:?} task, got {found:?}")]
    WrongFamily { expected: Family, found: Family },
    #[error("task rejected: {0}")]
    Rejected(String),
    #[error("obstacle resampling cap of {attempts} exceeded: {detail}")]
    ResampleCap { attempts: usize, detail: String },
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("insufficient unique {set} tasks: got {got} of {wanted} after {candidates} candidates")]
    Shortfall {
        set: String,
        wanted: usize,
        got: usize,
        candidates: usize,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("truncated split: task record {task} has {found} of {expected} examples")]
    Truncated {
        task: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
