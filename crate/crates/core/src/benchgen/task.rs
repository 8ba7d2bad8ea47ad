//! Task specifications, their input/output pipelines, and example sampling.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Cell, Grid};
use super::transforms::{
    ElementwiseTransform, FilterTransform, LabelerTransform, RearrangeTransform,
    SubstitutionTransform,
};
use super::GenError;

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Classification,
    Transduction,
    Pathfinding,
}

impl Family {
    pub fn is_sequence_output(&self) -> bool {
        !matches!(self, Family::Classification)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Plain,
    Compositional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TaskKind {
    Classification {
        elementwise: ElementwiseTransform,
        filter: FilterTransform,
        labeler: LabelerTransform,
        /// Raw pipeline outputs; the label of an example is its index here.
        class_map: Vec<i64>,
    },
    Transduction {
        elementwise: ElementwiseTransform,
        substitution: SubstitutionTransform,
        rearrange: RearrangeTransform,
    },
    Pathfinding {
        start: Cell,
        end: Cell,
        waypoint: Option<Cell>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    /// Global primitive ids, one per slot, in compositional benchmarks.
    pub primitive_ids: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Label(u32),
    Sequence(Vec<Token>),
}

impl Target {
    pub fn label(&self) -> Option<usize> {
        match self {
            Target::Label(l) => Some(*l as usize),
            Target::Sequence(_) => None,
        }
    }

    pub fn tokens(&self) -> Option<&[Token]> {
        match self {
            Target::Label(_) => None,
            Target::Sequence(s) => Some(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<Token>,
    pub y: Target,
}

/// Output of a pipeline on one input, or the reason it has none.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PipelineOutput<T> {
    Value(T),
    Discard,
}

impl TaskSpec {
    pub fn family(&self) -> Family {
        match self.kind {
            TaskKind::Classification { .. } => Family::Classification,
            TaskKind::Transduction { .. } => Family::Transduction,
            TaskKind::Pathfinding { .. } => Family::Pathfinding,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.kind {
            TaskKind::Classification { class_map, .. } => Some(class_map.len()),
            _ => None,
        }
    }
}

fn to_values(x: &[Token]) -> Vec<i64> {
    x.iter().map(|&t| i64::from(t)).collect()
}

/// Raw output of `labeler(filter(elementwise(x)))`; discards inputs whose
/// filtered subsequence is empty.
pub fn eval_classification_raw(
    elementwise: &ElementwiseTransform,
    filter: &FilterTransform,
    labeler: &LabelerTransform,
    x: &[Token],
) -> PipelineOutput<i64> {
    let kept = filter.apply(&elementwise.apply(&to_values(x)));
    match labeler.apply(&kept) {
        Ok(v) => PipelineOutput::Value(v),
        Err(_) => PipelineOutput::Discard,
    }
}

/// Classification pipeline of `spec` on `x`.
pub fn eval_classification_pipeline(spec: &TaskSpec, x: &[Token]) -> Result<PipelineOutput<i64>, GenError> {
    match &spec.kind {
        TaskKind::Classification {
            elementwise,
            filter,
            labeler,
            ..
        } => Ok(eval_classification_raw(elementwise, filter, labeler, x)),
        _ => Err(GenError::WrongFamily {
            expected: Family::Classification,
            found: spec.family(),
        }),
    }
}

/// Class index of `x` under a built classification task; inputs outside the
/// chosen classes are discarded.
pub fn classify(spec: &TaskSpec, x: &[Token]) -> Result<PipelineOutput<usize>, GenError> {
    let TaskKind::Classification { class_map, .. } = &spec.kind else {
        return Err(GenError::WrongFamily {
            expected: Family::Classification,
            found: spec.family(),
        });
    };
    Ok(match eval_classification_pipeline(spec, x)? {
        PipelineOutput::Value(raw) => match class_map.iter().position(|&c| c == raw) {
            Some(i) => PipelineOutput::Value(i),
            None => PipelineOutput::Discard,
        },
        PipelineOutput::Discard => PipelineOutput::Discard,
    })
}

pub fn eval_transduction_raw(
    elementwise: &ElementwiseTransform,
    substitution: &SubstitutionTransform,
    rearrange: &RearrangeTransform,
    x: &[Token],
) -> Result<Vec<i64>, GenError> {
    let stage1 = elementwise.apply(&to_values(x));
    let stage2 = substitution.apply(&stage1)?;
    rearrange.apply(&stage2)
}

/// Output sequence of a transduction task; discarded when any output token
/// falls outside `0..vocab_size`.
pub fn eval_transduction_pipeline(
    spec: &TaskSpec,
    x: &[Token],
    vocab_size: usize,
) -> Result<PipelineOutput<Vec<Token>>, GenError> {
    let TaskKind::Transduction {
        elementwise,
        substitution,
        rearrange,
    } = &spec.kind
    else {
        return Err(GenError::WrongFamily {
            expected: Family::Transduction,
            found: spec.family(),
        });
    };
    let out = eval_transduction_raw(elementwise, substitution, rearrange, x)?;
    if out.iter().any(|&v| v < 0 || v >= vocab_size as i64) {
        return Ok(PipelineOutput::Discard);
    }
    Ok(PipelineOutput::Value(out.into_iter().map(|v| v as Token).collect()))
}

pub fn sample_sequence(rng: &mut impl Rng, vocab_size: usize, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.random_range(0..vocab_size as Token)).collect()
}

/// Picks the `num_classes` most frequent raw outputs over `pool` (ties go to
/// the smaller value).
pub fn select_classes(
    elementwise: &ElementwiseTransform,
    filter: &FilterTransform,
    labeler: &LabelerTransform,
    pool: &[Vec<Token>],
    num_classes: usize,
) -> Result<Vec<i64>, GenError> {
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for x in pool {
        if let PipelineOutput::Value(v) = eval_classification_raw(elementwise, filter, labeler, x) {
            *counts.entry(v).or_default() += 1;
        }
    }
    if counts.len() < num_classes {
        return Err(GenError::Rejected(format!(
            "only {} distinct outputs, need {num_classes}",
            counts.len()
        )));
    }
    let mut ranked: Vec<(i64, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(num_classes).map(|(v, _)| v).collect())
}

/// Parameters for filling a task with examples.
#[derive(Debug, Clone, Copy)]
pub struct SamplingLimits {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub examples: usize,
    /// Candidate inputs drawn before giving up on a task.
    pub max_draws: usize,
}

/// Builds a class-balanced classification task, or rejects it.
///
/// The class map comes from `frequency_pool`; examples are then drawn from
/// `rng` until every class holds `examples / C` inputs.
pub fn build_classification_task(
    elementwise: ElementwiseTransform,
    filter: FilterTransform,
    labeler: LabelerTransform,
    frequency_pool: &[Vec<Token>],
    num_classes: usize,
    limits: &SamplingLimits,
    rng: &mut impl Rng,
) -> Result<(TaskSpec, Vec<Example>), GenError> {
    check_quota(limits.examples, num_classes)?;
    let class_map = select_classes(&elementwise, &filter, &labeler, frequency_pool, num_classes)?;
    let spec = TaskSpec {
        kind: TaskKind::Classification {
            elementwise,
            filter,
            labeler,
            class_map,
        },
        primitive_ids: None,
    };
    let examples = fill_classification_examples(&spec, limits, rng)?;
    Ok((spec, examples))
}

fn check_quota(examples: usize, num_classes: usize) -> Result<(), GenError> {
    if num_classes == 0 || examples % num_classes != 0 {
        return Err(GenError::Config(format!(
            "examples per task ({examples}) must be a positive multiple of the class count ({num_classes})"
        )));
    }
    Ok(())
}

/// Draws a class-balanced, shuffled example set for a task whose class map
/// is already fixed.
pub fn fill_classification_examples(
    spec: &TaskSpec,
    limits: &SamplingLimits,
    rng: &mut impl Rng,
) -> Result<Vec<Example>, GenError> {
    let num_classes = spec.num_classes().ok_or(GenError::WrongFamily {
        expected: Family::Classification,
        found: spec.family(),
    })?;
    check_quota(limits.examples, num_classes)?;
    let quota = limits.examples / num_classes;
    let mut per_class: Vec<Vec<Example>> = vec![Vec::new(); num_classes];
    let mut filled = 0;
    for _ in 0..limits.max_draws {
        if filled == num_classes {
            break;
        }
        let x = sample_sequence(rng, limits.vocab_size, limits.seq_len);
        if let PipelineOutput::Value(c) = classify(spec, &x)? {
            if per_class[c].len() < quota {
                per_class[c].push(Example {
                    x,
                    y: Target::Label(c as u32),
                });
                if per_class[c].len() == quota {
                    filled += 1;
                }
            }
        }
    }
    if filled < num_classes {
        let deficits: Vec<String> = per_class
            .iter()
            .enumerate()
            .filter(|(_, v)| v.len() < quota)
            .map(|(c, v)| format!("class {c}: {}/{quota}", v.len()))
            .collect();
        return Err(GenError::Rejected(format!(
            "class quota not met after {} draws ({})",
            limits.max_draws,
            deficits.join(", ")
        )));
    }
    let mut examples: Vec<Example> = per_class.into_iter().flatten().collect();
    shuffle(&mut examples, rng);
    Ok(examples)
}

pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}

/// Draws in-range examples for a transduction task, or rejects it.
pub fn build_transduction_examples(
    spec: &TaskSpec,
    limits: &SamplingLimits,
    rng: &mut impl Rng,
) -> Result<Vec<Example>, GenError> {
    let mut examples = Vec::with_capacity(limits.examples);
    for _ in 0..limits.max_draws {
        if examples.len() == limits.examples {
            break;
        }
        let x = sample_sequence(rng, limits.vocab_size, limits.seq_len);
        if let PipelineOutput::Value(y) = eval_transduction_pipeline(spec, &x, limits.vocab_size)? {
            examples.push(Example {
                x,
                y: Target::Sequence(y),
            });
        }
    }
    if examples.len() < limits.examples {
        return Err(GenError::Rejected(format!(
            "only {}/{} in-range examples after {} draws",
            examples.len(),
            limits.examples,
            limits.max_draws
        )));
    }
    Ok(examples)
}

#[derive(Debug, Clone, Copy)]
pub struct GridSettings {
    pub size: usize,
    pub num_blobs: usize,
    /// Added to rasterized path cells in target sequences.
    pub target_offset: usize,
    pub max_resample: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            size: 10,
            num_blobs: 8,
            target_offset: 100,
            max_resample: 1000,
        }
    }
}

/// Path through the optional waypoint: the two legs are joined with the
/// waypoint appearing once.
pub fn task_path(grid: &Grid, start: Cell, end: Cell, waypoint: Option<Cell>) -> Option<Vec<Cell>> {
    match waypoint {
        None => grid.shortest_path(start, end),
        Some(w) => {
            let mut first = grid.shortest_path(start, w)?;
            let second = grid.shortest_path(w, end)?;
            first.extend_from_slice(&second[1..]);
            Some(first)
        }
    }
}

/// One path-finding example: random blobs as the source, the (waypoint)
/// shortest path with target offset as the target.
pub fn gen_pathfinding_example(
    spec: &TaskSpec,
    settings: &GridSettings,
    rng: &mut impl Rng,
) -> Result<Example, GenError> {
    let TaskKind::Pathfinding {
        start,
        end,
        waypoint,
    } = spec.kind
    else {
        return Err(GenError::WrongFamily {
            expected: Family::Pathfinding,
            found: spec.family(),
        });
    };
    let n = settings.size;
    let keep_free: Vec<Cell> = [Some(start), Some(end), waypoint].into_iter().flatten().collect();
    if keep_free.iter().any(|c| c.0 >= n || c.1 >= n) {
        return Err(GenError::Config(format!("task cells outside the {n}x{n} grid")));
    }
    let mut unreachable = 0;
    let mut blocked = 0;
    for _ in 0..settings.max_resample {
        let blobs: Vec<Cell> = (0..settings.num_blobs)
            .map(|_| Cell::from_raster(rng.random_range(0..n * n), n))
            .collect();
        let grid = Grid::with_blobs(n, &blobs);
        if keep_free.iter().any(|&c| grid.is_occupied(c)) {
            blocked += 1;
            continue;
        }
        match task_path(&grid, start, end, waypoint) {
            Some(path) => {
                return Ok(Example {
                    x: blobs.iter().map(|b| b.rasterize(n) as Token).collect(),
                    y: Target::Sequence(
                        path.iter()
                            .map(|c| (c.rasterize(n) + settings.target_offset) as Token)
                            .collect(),
                    ),
                })
            }
            None => unreachable += 1,
        }
    }
    Err(GenError::ResampleCap {
        attempts: settings.max_resample,
        detail: format!("{blocked} blocked endpoint(s), {unreachable} unreachable"),
    })
}
