use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapt::{adapt_task_embedding, evaluate_code, AdaptationResult, CodeTemplate, InnerLoop, StopReason};
use super::{MetaError, TamConfig};
use crate::benchgen::{CompositionalSplit, Example, Family, Mode, Task};
use crate::model::{Model, ModelParams, SlotValue, TaskCodeValue};
use crate::numerics::{AdamState, Tensor};

const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMethod {
    /// Evaluate at the zero (or unknown-slot) code without adaptation.
    None,
    TamZ,
    CompSlot,
    FinetuneFull,
}

impl AdaptMethod {
    pub fn name(self) -> &'static str {
        match self {
            AdaptMethod::None => "none",
            AdaptMethod::TamZ => "tam-z",
            AdaptMethod::CompSlot => "comp-slot",
            AdaptMethod::FinetuneFull => "finetune-full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedState {
    /// Fine-tuned parameters; `None` when the shared parameters were frozen.
    pub params: Option<ModelParams>,
    pub code: TaskCodeValue,
    pub adaptation: Option<AdaptationResult>,
}

impl AdaptedState {
    pub fn params<'a>(&'a self, shared: &'a ModelParams) -> &'a ModelParams {
        self.params.as_ref().unwrap_or(shared)
    }
}

/// The code a task gets before adaptation: zeros for dense models, known
/// primitives plus the unknown embedding at unseen slots for compositional
/// ones.
pub(crate) fn base_template(model: &Model, task: &Task, comp: Option<&CompositionalSplit>) -> Result<CodeTemplate, MetaError> {
    if !model.config().is_compositional() {
        return Ok(CodeTemplate::Dense);
    }
    let ids = task
        .spec
        .primitive_ids
        .ok_or_else(|| MetaError::Method("compositional model needs tasks with primitive ids".into()))?;
    let unseen = comp.map(|c| c.unseen_slots(ids)).unwrap_or_default();
    let mut slots = ids.map(SlotValue::Primitive);
    for &s in &unseen {
        slots[s] = SlotValue::Unknown;
    }
    Ok(CodeTemplate::Fixed(TaskCodeValue::Composite(slots)))
}

/// Adapts to a test task from its first `k` examples.
pub fn adapt_test_task(
    model: &Model,
    params: &ModelParams,
    task: &Task,
    k: usize,
    method: AdaptMethod,
    cfg: &TamConfig,
    comp: Option<&CompositionalSplit>,
) -> Result<AdaptedState, MetaError> {
    let base = base_template(model, task, comp)?;
    if method == AdaptMethod::None {
        return Ok(AdaptedState {
            params: None,
            code: base.code_value(&vec![0.0; base.z_len(model)]),
            adaptation: None,
        });
    }
    if k == 0 {
        return Err(MetaError::Method(format!("{} adaptation needs k > 0", method.name())));
    }
    let support: Vec<&Example> = task.support(k).iter().collect();
    match method {
        AdaptMethod::None => unreachable!(),
        AdaptMethod::TamZ => {
            if model.config().is_compositional() {
                return Err(MetaError::Method("tam-z needs a dense task embedding; use comp-slot".into()));
            }
            let r = adapt_task_embedding(model, params, &support, &CodeTemplate::Dense, &InnerLoop::test(cfg), None, false)?;
            Ok(AdaptedState {
                params: None,
                code: TaskCodeValue::Dense(r.z_best.clone()),
                adaptation: Some(r),
            })
        }
        AdaptMethod::CompSlot => {
            let comp = comp.ok_or_else(|| MetaError::Method("comp-slot needs a compositional split".into()))?;
            if !model.config().is_compositional() {
                return Err(MetaError::Method("comp-slot needs a compositional model".into()));
            }
            let ids = task.spec.primitive_ids.expect("checked by base_template");
            let unseen = comp.unseen_slots(ids);
            if unseen.len() > 1 {
                return Err(MetaError::Method(format!("task has {} unseen primitives", unseen.len())));
            }
            let template = CodeTemplate::Slots {
                slots: ids.map(SlotValue::Primitive),
                free: unseen.first().copied(),
            };
            let r = adapt_task_embedding(model, params, &support, &template, &InnerLoop::test(cfg), None, false)?;
            Ok(AdaptedState {
                params: None,
                code: template.code_value(&r.z_best),
                adaptation: Some(r),
            })
        }
        AdaptMethod::FinetuneFull => finetune_full(model, params, &support, &base, cfg),
    }
}

/// Fine-tunes every parameter (and the dense code, if any) on the support
/// set, keeping the lowest-loss iterate.
fn finetune_full(
    model: &Model,
    params: &ModelParams,
    support: &[&Example],
    template: &CodeTemplate,
    cfg: &TamConfig,
) -> Result<AdaptedState, MetaError> {
    let n = template.z_len(model);
    let mut work = params.clone();
    let mut z = Tensor::zeros(&[n.max(1)]);
    let mut shapes: Vec<Vec<usize>> = work.tensors.iter().map(|t| t.shape().to_vec()).collect();
    shapes.push(vec![n.max(1)]);
    let mut adam = AdamState::for_shapes(cfg.finetune_optimizer, shapes);
    let mut best = (f64::INFINITY, work.clone(), vec![0.0; n]);
    let mut trace = Vec::new();
    let mut stale = 0;
    let mut steps = 0;
    let mut stop = StopReason::MaxSteps;
    for step in 0..=cfg.finetune_steps {
        let eval = evaluate_code(model, &work, template, &z.data()[..n], support, true)?;
        if !eval.loss.is_finite() {
            return Err(MetaError::NonFiniteLoss {
                step,
                loss: eval.loss,
                z_norm: z.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
        }
        trace.push(eval.loss);
        if step == 0 || eval.loss < best.0 - cfg.improvement_tolerance {
            best = (eval.loss, work.clone(), z.data()[..n].to_vec());
            stale = 0;
        } else {
            stale += 1;
        }
        if step == cfg.finetune_steps {
            break;
        }
        if cfg.early_stop_patience.is_some_and(|p| stale >= p) {
            stop = StopReason::NoImprovement;
            break;
        }
        let mut grads = eval.theta_grads.expect("requested");
        let mut zg = eval.z_grad;
        zg.resize(n.max(1), 0.0);
        grads.push(zg);
        let mut all = std::mem::take(&mut work.tensors);
        all.push(z);
        adam.step(&mut all, &grads)?;
        z = all.pop().expect("z tensor");
        work.tensors = all;
        steps += 1;
    }
    let (best_loss, best_params, z_best) = best;
    Ok(AdaptedState {
        params: Some(best_params),
        code: template.code_value(&z_best),
        adaptation: Some(AdaptationResult {
            z_best,
            best_loss,
            loss_trace: trace,
            steps_taken: steps,
            stop_reason: stop,
            trajectory: Vec::new(),
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    Perplexity,
}

impl Metric {
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Classification => Metric::Accuracy,
            _ => Metric::Perplexity,
        }
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Accuracy => a > b,
            Metric::Perplexity => a < b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub metric: Metric,
    pub value: f64,
    /// Mean per-example (classification) or per-token negative log-likelihood.
    pub mean_nll: f64,
    /// Scored examples or tokens.
    pub count: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Consecutive runs of equal input length, at most `EVAL_CHUNK` long.
fn chunks<'a>(examples: &'a [Example]) -> Vec<Vec<&'a Example>> {
    let mut out: Vec<Vec<&Example>> = Vec::new();
    for e in examples {
        match out.last_mut() {
            Some(c) if c.len() < EVAL_CHUNK && c[0].x.len() == e.x.len() => c.push(e),
            _ => out.push(vec![e]),
        }
    }
    out
}

/// Accuracy or teacher-forced perplexity of one task under a fixed code.
pub fn evaluate_task(
    model: &Model,
    params: &ModelParams,
    code: &TaskCodeValue,
    examples: &[Example],
    family: Family,
) -> Result<TaskMetric, MetaError> {
    if examples.is_empty() {
        return Err(MetaError::Method("no evaluation examples".into()));
    }
    let metric = Metric::for_family(family);
    let mut correct = 0usize;
    let mut total_nll = 0.0;
    let mut count = 0usize;
    for chunk in chunks(examples) {
        let (_, tokens, total) = model.loss_value(params, code, &chunk)?;
        total_nll += total;
        count += tokens;
        if metric == Metric::Accuracy {
            let logits = model.predict(params, code, &chunk)?;
            for (rows, e) in logits.iter().zip(&chunk) {
                if Some(argmax(&rows[0])) == e.y.label() {
                    correct += 1;
                }
            }
        }
    }
    let mean_nll = total_nll / count as f64;
    let value = match metric {
        Metric::Accuracy => correct as f64 / count as f64,
        Metric::Perplexity => mean_nll.exp(),
    };
    Ok(TaskMetric {
        metric,
        value,
        mean_nll,
        count,
    })
}

/// Adapts to every task with its first `k` examples and scores it on the
/// examples after the first `support_size` (at most `max_eval` of them when
/// nonzero). Tasks run on `jobs` threads; results keep task order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    params: &ModelParams,
    tasks: &[Task],
    family: Family,
    method: AdaptMethod,
    k: usize,
    support_size: usize,
    max_eval: usize,
    cfg: &TamConfig,
    comp: Option<&CompositionalSplit>,
    jobs: usize,
) -> Result<Vec<TaskMetric>, MetaError> {
    if k > support_size {
        return Err(MetaError::Method(format!("k = {k} exceeds the support pool of {support_size}")));
    }
    let one = |task: &Task| -> Result<TaskMetric, MetaError> {
        if task.spec.family() != family {
            return Err(MetaError::FamilyMismatch {
                expected: family,
                found: task.spec.family(),
            });
        }
        let state = adapt_test_task(model, params, task, k, method, cfg, comp)?;
        let mut eval = task.eval_examples(support_size);
        if max_eval > 0 && eval.len() > max_eval {
            eval = &eval[..max_eval];
        }
        evaluate_task(model, state.params(params), &state.code, eval, family)
    };
    if jobs <= 1 {
        return tasks.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| MetaError::Method(format!("thread pool: {e}")))?;
    pool.install(|| tasks.par_iter().map(one).collect())
}

pub const CSV_HEADER: &str = "method,family,mode,k,mean,std,n_tasks,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub family: Family,
    pub mode: Mode,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub n_tasks: usize,
    /// `None` for rows aggregated over seeds.
    pub seed: Option<u64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation across tasks.
pub fn aggregate(method: &str, family: Family, mode: Mode, k: usize, seed: u64, metrics: &[TaskMetric]) -> MetricRow {
    let values: Vec<f64> = metrics.iter().map(|m| m.value).collect();
    let (mean, std) = mean_std(&values);
    MetricRow {
        method: method.into(),
        family,
        mode,
        k,
        mean,
        std,
        n_tasks: metrics.len(),
        seed: Some(seed),
    }
}

/// Combines per-seed rows with equal (method, family, mode, k): mean and
/// sample standard deviation of the per-seed means.
pub fn aggregate_trials(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut out: Vec<(MetricRow, Vec<f64>)> = Vec::new();
    for r in rows {
        let key = |o: &MetricRow| o.method == r.method && o.family == r.family && o.mode == r.mode && o.k == r.k;
        match out.iter_mut().find(|(o, _)| key(o)) {
            Some((_, v)) => v.push(r.mean),
            None => out.push((r.clone(), vec![r.mean])),
        }
    }
    out.into_iter()
        .map(|(mut row, means)| {
            let (mean, std) = mean_std(&means);
            row.mean = mean;
            row.std = std;
            row.seed = None;
            row
        })
        .collect()
}

fn kebab<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

pub fn metric_rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let seed = r.seed.map_or_else(|| "all".to_string(), |s| s.to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            kebab(&r.family),
            kebab(&r.mode),
            r.k,
            r.mean,
            r.std,
            r.n_tasks,
            seed
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{
        ElementwiseKind, ElementwiseTransform, FilterKind, FilterTransform, LabelerTransform, Target, TaskKind, TaskSpec,
    };
    use crate::model::ModelConfig;

    fn encoder(zero_head: bool) -> Model {
        Model::new(ModelConfig {
            num_layers: 1,
            embed_dim: 8,
            num_heads: 2,
            feedforward_dim: 16,
            max_positions: 16,
            zero_init_output: zero_head,
            init_seed: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn task(n: usize) -> Task {
        Task {
            spec: TaskSpec {
                kind: TaskKind::Classification {
                    elementwise: ElementwiseTransform::new(ElementwiseKind::Add, 1).unwrap(),
                    filter: FilterTransform::new(FilterKind::GreaterThan, 3, false).unwrap(),
                    labeler: LabelerTransform::Count,
                    class_map: vec![0, 1, 2, 3],
                },
                primitive_ids: None,
            },
            examples: (0..n)
                .map(|i| Example {
                    x: vec![(i % 12) as u32, ((i * 7) % 12) as u32, 4, 5, (i % 5) as u32],
                    y: Target::Label((i % 4) as u32),
                })
                .collect(),
        }
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn zero_steps_evaluates_at_zero() {
        let m = encoder(false);
        let p = m.init_params();
        let t = task(40);
        let cfg = TamConfig {
            adaptation_steps_at_test: 0,
            ..TamConfig::default()
        };
        let s = adapt_test_task(&m, &p, &t, 5, AdaptMethod::TamZ, &cfg, None).unwrap();
        assert_eq!(s.code, TaskCodeValue::Dense(vec![0.0; 8]));
        assert!(s.params.is_none());
    }

    #[test]
    fn finetune_with_zero_learning_rate_keeps_parameters() {
        let m = encoder(false);
        let p = m.init_params();
        let t = task(40);
        let mut cfg = TamConfig {
            finetune_steps: 3,
            early_stop_patience: None,
            ..TamConfig::default()
        };
        cfg.finetune_optimizer.learning_rate = 0.0;
        let s = adapt_test_task(&m, &p, &t, 10, AdaptMethod::FinetuneFull, &cfg, None).unwrap();
        assert_eq!(s.params.as_ref().unwrap(), &p);
        assert_eq!(s.adaptation.unwrap().steps_taken, 3);
        assert!(adapt_test_task(&m, &p, &t, 0, AdaptMethod::FinetuneFull, &cfg, None).is_err());
    }

    #[test]
    fn finetune_lowers_support_loss() {
        let m = encoder(false);
        let p = m.init_params();
        let t = task(40);
        let cfg = TamConfig {
            finetune_steps: 20,
            early_stop_patience: None,
            ..TamConfig::default()
        };
        let s = adapt_test_task(&m, &p, &t, 10, AdaptMethod::FinetuneFull, &cfg, None).unwrap();
        let a = s.adaptation.unwrap();
        assert!(a.best_loss < a.loss_trace[0]);
    }

    #[test]
    fn uniform_and_perfect_accuracy() {
        let m = encoder(true);
        let p = m.init_params();
        let t = task(400);
        let r = evaluate_task(&m, &p, &TaskCodeValue::Zero, &t.examples, Family::Classification).unwrap();
        // zero head: every logit ties, so the prediction is class 0
        assert!((r.value - 0.25).abs() < 1e-12);
        assert!((r.mean_nll - 4f64.ln()).abs() < 1e-12);

        let mut perfect = p.clone();
        let hb = perfect.index_of("head.bias").unwrap();
        perfect.tensors[hb] = Tensor::vector(vec![100.0, 0.0, 0.0, 0.0]);
        let only_zero: Vec<Example> = t.examples.iter().filter(|e| e.y.label() == Some(0)).cloned().collect();
        let r = evaluate_task(&m, &perfect, &TaskCodeValue::Zero, &only_zero, Family::Classification).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn rows_and_csv() {
        let m = |v| TaskMetric {
            metric: Metric::Accuracy,
            value: v,
            mean_nll: 0.0,
            count: 1,
        };
        let a = aggregate("tam", Family::Classification, Mode::Plain, 5, 1, &[m(0.5), m(0.7)]);
        assert!((a.mean - 0.6).abs() < 1e-12);
        assert!((a.std - 0.02f64.sqrt()).abs() < 1e-12);
        let b = aggregate("tam", Family::Classification, Mode::Plain, 5, 2, &[m(0.8)]);
        let all = aggregate_trials(&[a, b]);
        assert_eq!(all.len(), 1);
        assert!((all[0].mean - 0.7).abs() < 1e-12);
        let csv = metric_rows_to_csv(&all);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("tam,classification,plain,5,"));
        assert!(lines[1].ends_with(",2,all"));
    }
}
