use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapt::{adapt_task_embedding, evaluate_code, CodeTemplate, InnerLoop, StopReason};
use super::eval::{evaluate, AdaptMethod, Metric};
use super::{MetaError, TamConfig};
use crate::benchgen::{BenchmarkSplit, Example, Family, Mode, Task};
use crate::model::{Architecture, Model, ModelConfig, ModelParams, SlotValue, TaskCodeValue};
use crate::numerics::{AdamState, Tensor};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMethod {
    Tam,
    CompTam,
    Multitask,
    TaskAgnostic,
}

impl TrainMethod {
    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::Tam => "tam",
            TrainMethod::CompTam => "comp-tam",
            TrainMethod::Multitask => "multitask",
            TrainMethod::TaskAgnostic => "task-agnostic",
        }
    }

    /// Test-time adaptation paired with this method during validation.
    pub fn validation_adaptation(self, compositional_model: bool) -> AdaptMethod {
        match self {
            TrainMethod::Tam => AdaptMethod::TamZ,
            TrainMethod::CompTam => AdaptMethod::CompSlot,
            TrainMethod::Multitask if !compositional_model => AdaptMethod::TamZ,
            TrainMethod::Multitask | TrainMethod::TaskAgnostic => AdaptMethod::None,
        }
    }
}

/// JSON-lines training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogEvent {
    Outer {
        iteration: usize,
        task: usize,
        inner_steps: usize,
        initial_loss: f64,
        final_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        stop_reason: Option<StopReason>,
        #[serde(skip_serializing_if = "Option::is_none")]
        unknown_slot: Option<usize>,
    },
    Validation {
        iteration: usize,
        metric: Metric,
        value: f64,
        best: bool,
    },
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: ModelParams,
    pub outer: AdamState,
    /// Accumulated outer gradient of the current iteration.
    pub delta: Vec<Vec<f64>>,
    /// Completed outer iterations.
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub method: TrainMethod,
    /// Best parameters by validation (final ones without validation).
    pub params: ModelParams,
    pub final_params: ModelParams,
    pub optimizer: AdamState,
    /// Multitask embedding table, one row per training task.
    pub task_embeddings: Vec<Vec<f64>>,
    pub log: Vec<LogEvent>,
    pub best_iteration: Option<usize>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Keep the multitask embedding table at zero.
    pub freeze_task_embeddings: bool,
    /// Called after every outer update.
    pub observer: Option<&'a mut dyn FnMut(&TrainerState)>,
}

/// Every mismatch between a benchmark, a model and a training method.
pub fn compatibility_violations(split: &BenchmarkSplit, mc: &ModelConfig, method: TrainMethod) -> Vec<String> {
    let family = split.family();
    let want = if family == Family::Classification {
        Architecture::Encoder
    } else {
        Architecture::Decoder
    };
    let mut v = Vec::new();
    if mc.architecture != want {
        v.push(format!("{family:?} benchmarks need the {want:?} architecture"));
    }
    let gen = &split.meta.config;
    if mc.vocab_size < gen.model_vocab() {
        v.push(format!("model vocab_size {} below benchmark vocabulary {}", mc.vocab_size, gen.model_vocab()));
    }
    if family == Family::Classification && mc.num_classes != gen.num_classes {
        v.push(format!("model num_classes {} differs from benchmark {}", mc.num_classes, gen.num_classes));
    }
    let comp = split.meta.compositional.as_ref();
    match (method, comp) {
        (TrainMethod::CompTam, None) => v.push("comp-tam needs a compositional benchmark".into()),
        (TrainMethod::CompTam, Some(_)) if !mc.is_compositional() => {
            v.push("comp-tam needs a model with num_primitives".into())
        }
        (TrainMethod::Tam, _) if mc.is_compositional() => {
            v.push("tam trains a dense task embedding; unset num_primitives".into())
        }
        _ => {}
    }
    if let (Some(c), Some(n)) = (comp, mc.num_primitives) {
        if c.num_primitives() != n {
            v.push(format!("model num_primitives {n} differs from the inventory size {}", c.num_primitives()));
        }
    }
    if mc.is_compositional() && comp.is_none() {
        v.push("num_primitives is set but the benchmark is not compositional".into());
    }
    v
}

fn zeros_like(params: &ModelParams) -> Vec<Vec<f64>> {
    params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect()
}

fn sample_batch<'a>(rng: &mut ChaCha8Rng, tasks: &'a [Task], n: usize) -> (usize, Vec<&'a Example>) {
    let task = rng.random_range(0..tasks.len());
    let ex = &tasks[task].examples;
    let idx = sample(rng, ex.len(), n);
    (task, idx.iter().map(|i| &ex[i]).collect())
}

/// Runs `method` on the training tasks of `split`.
pub fn train(
    split: &BenchmarkSplit,
    model: &Model,
    method: TrainMethod,
    cfg: &TamConfig,
    jobs: usize,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome, MetaError> {
    cfg.validate()?;
    let v = compatibility_violations(split, model.config(), method);
    if !v.is_empty() {
        return Err(MetaError::Config(v));
    }
    if split.train.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let merged;
    let tasks: &[Task] = if method == TrainMethod::TaskAgnostic {
        merged = vec![Task {
            spec: split.train[0].spec.clone(),
            examples: split.train.iter().flat_map(|t| t.examples.iter().cloned()).collect(),
        }];
        &merged
    } else {
        &split.train
    };
    for (i, t) in tasks.iter().enumerate() {
        if t.examples.len() < cfg.examples_per_task {
            return Err(MetaError::TooFewExamples {
                task: i,
                needed: cfg.examples_per_task,
                found: t.examples.len(),
            });
        }
    }
    let compositional = model.config().is_compositional();
    if compositional && tasks.iter().any(|t| t.spec.primitive_ids.is_none()) {
        return Err(MetaError::Method("compositional training needs primitive ids on every task".into()));
    }

    let params = model.init_params();
    let mut state = TrainerState {
        outer: AdamState::new(cfg.outer_optimizer, &params.tensors),
        delta: zeros_like(&params),
        params,
        iteration: 0,
        rng: rng_for(cfg.seed, "outer", 0),
    };
    let zlen = if compositional { 0 } else { model.config().task_embedding_len() };
    let table_rows = if method == TrainMethod::Multitask { tasks.len() } else { 0 };
    let mut table: Vec<Tensor> = (0..table_rows).map(|_| Tensor::zeros(&[zlen.max(1)])).collect();
    let mut table_adam: Vec<AdamState> = (0..table_rows)
        .map(|_| AdamState::for_shapes(cfg.embedding_optimizer, vec![vec![zlen.max(1)]]))
        .collect();
    let inner = InnerLoop::training(cfg);
    let mut log = Vec::with_capacity(cfg.max_outer_iterations);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let val_method = method.validation_adaptation(compositional);
    let metric = Metric::for_family(split.family());

    for iteration in 0..cfg.max_outer_iterations {
        let (task, batch) = sample_batch(&mut state.rng, tasks, cfg.examples_per_task);
        state.delta.iter_mut().for_each(|d| d.iter_mut().for_each(|v| *v = 0.0));
        let ids = tasks[task].spec.primitive_ids.map(|ids| ids.map(SlotValue::Primitive));
        let event = match method {
            TrainMethod::Tam | TrainMethod::CompTam => {
                let (template, unknown) = match (method, ids) {
                    (TrainMethod::CompTam, Some(slots)) => {
                        let u = state.rng.random_range(0..3);
                        (CodeTemplate::Slots { slots, free: Some(u) }, Some(u))
                    }
                    _ => (CodeTemplate::Dense, None),
                };
                let r = adapt_task_embedding(model, &state.params, &batch, &template, &inner, Some(&mut state.delta), false)?;
                LogEvent::Outer {
                    iteration,
                    task,
                    inner_steps: r.steps_taken,
                    initial_loss: r.loss_trace[0],
                    final_loss: r.best_loss,
                    stop_reason: Some(r.stop_reason),
                    unknown_slot: unknown,
                }
            }
            TrainMethod::Multitask | TrainMethod::TaskAgnostic => {
                let (template, z, unknown) = match ids {
                    Some(mut slots) if method == TrainMethod::Multitask => {
                        let mut unknown = None;
                        if state.rng.random_bool(cfg.unknown_slot_probability) {
                            let u = state.rng.random_range(0..3);
                            slots[u] = SlotValue::Unknown;
                            unknown = Some(u);
                        }
                        (CodeTemplate::Fixed(TaskCodeValue::Composite(slots)), Vec::new(), unknown)
                    }
                    _ if method == TrainMethod::Multitask && !compositional => {
                        (CodeTemplate::Dense, table[task].data().to_vec(), None)
                    }
                    _ => (CodeTemplate::Fixed(TaskCodeValue::Zero), Vec::new(), None),
                };
                let eval = evaluate_code(model, &state.params, &template, &z, &batch, true)?;
                if !eval.loss.is_finite() {
                    return Err(MetaError::NonFiniteLoss {
                        step: 0,
                        loss: eval.loss,
                        z_norm: z.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    });
                }
                state.delta = eval.theta_grads.expect("requested");
                if !options.freeze_task_embeddings && !z.is_empty() {
                    table_adam[task].step(std::slice::from_mut(&mut table[task]), &[eval.z_grad])?;
                }
                LogEvent::Outer {
                    iteration,
                    task,
                    inner_steps: 0,
                    initial_loss: eval.loss,
                    final_loss: eval.loss,
                    stop_reason: None,
                    unknown_slot: unknown,
                }
            }
        };
        if state.delta.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetaError::NonFiniteGradient { iteration });
        }
        state.outer.step(&mut state.params.tensors, &state.delta)?;
        state.iteration = iteration + 1;
        log.push(event);
        if let Some(obs) = options.observer.as_deref_mut() {
            obs(&state);
        }

        if cfg.validation_interval > 0 && state.iteration % cfg.validation_interval == 0 && !split.val.is_empty() {
            let k = if val_method == AdaptMethod::None { 0 } else { cfg.validation_k };
            let metrics = evaluate(
                model,
                &state.params,
                &split.val,
                split.family(),
                val_method,
                k,
                split.meta.config.support_size,
                cfg.validation_examples,
                &TamConfig {
                    adaptation_steps_at_test: cfg.max_inner_steps,
                    ..cfg.clone()
                },
                split.meta.compositional.as_ref(),
                jobs,
            )?;
            let value = metrics.iter().map(|m| m.value).sum::<f64>() / metrics.len() as f64;
            let improved = best.as_ref().is_none_or(|(b, _, _)| metric.better(value, *b));
            if improved {
                best = Some((value, state.iteration, state.params.clone()));
            }
            log.push(LogEvent::Validation {
                iteration: state.iteration,
                metric,
                value,
                best: improved,
            });
        }
    }
    let (params, best_iteration) = match best {
        Some((_, it, p)) => (p, Some(it)),
        None => (state.params.clone(), None),
    };
    Ok(TrainOutcome {
        method,
        params,
        final_params: state.params,
        optimizer: state.outer,
        task_embeddings: table.into_iter().map(|t| t.data()[..zlen].to_vec()).collect(),
        log,
        best_iteration,
    })
}

pub fn tam_train(split: &BenchmarkSplit, model: &Model, cfg: &TamConfig) -> Result<TrainOutcome, MetaError> {
    train(split, model, TrainMethod::Tam, cfg, 1, TrainOptions::default())
}

pub fn comp_tam_train(split: &BenchmarkSplit, model: &Model, cfg: &TamConfig) -> Result<TrainOutcome, MetaError> {
    if split.mode() != Mode::Compositional {
        return Err(MetaError::Config(vec!["comp-tam needs a compositional benchmark".into()]));
    }
    train(split, model, TrainMethod::CompTam, cfg, 1, TrainOptions::default())
}

pub fn multitask_train(split: &BenchmarkSplit, model: &Model, cfg: &TamConfig) -> Result<TrainOutcome, MetaError> {
    train(split, model, TrainMethod::Multitask, cfg, 1, TrainOptions::default())
}

pub fn task_agnostic_train(split: &BenchmarkSplit, model: &Model, cfg: &TamConfig) -> Result<TrainOutcome, MetaError> {
    train(split, model, TrainMethod::TaskAgnostic, cfg, 1, TrainOptions::default())
}
