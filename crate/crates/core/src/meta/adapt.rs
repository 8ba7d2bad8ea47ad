use serde::{Deserialize, Serialize};

use super::{MetaError, TamConfig};
use crate::benchgen::Example;
use crate::model::{Model, ModelParams, SlotValue, TaskCode, TaskCodeValue};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor, Var};

/// How an adaptable vector `z` becomes a task code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeTemplate {
    /// `z` is the whole dense task embedding.
    Dense,
    /// Fixed slot entries; `z` replaces slot `free` when set.
    Slots { slots: [SlotValue; 3], free: Option<usize> },
    /// A fixed code with nothing to adapt.
    Fixed(TaskCodeValue),
}

impl CodeTemplate {
    pub fn z_len(&self, model: &Model) -> usize {
        match self {
            CodeTemplate::Dense => model.config().task_embedding_len(),
            CodeTemplate::Slots { free: Some(_), .. } => model.config().embed_dim,
            _ => 0,
        }
    }

    pub fn code_value(&self, z: &[f64]) -> TaskCodeValue {
        match self {
            CodeTemplate::Dense => TaskCodeValue::Dense(z.to_vec()),
            CodeTemplate::Slots { slots, free } => {
                let mut s = slots.clone();
                if let Some(i) = *free {
                    s[i] = SlotValue::Free(z.to_vec());
                }
                TaskCodeValue::Composite(s)
            }
            CodeTemplate::Fixed(code) => code.clone(),
        }
    }

    fn bind(&self, model: &Model, tape: &mut Tape, z: &[f64]) -> Result<(TaskCode, Option<Var>), MetaError> {
        let code = model.bind_code(tape, &self.code_value(z), true)?;
        let var = match (&code, self) {
            (TaskCode::Dense(v), CodeTemplate::Dense) => Some(*v),
            (TaskCode::Composite(slots), CodeTemplate::Slots { free: Some(i), .. }) => match slots[*i] {
                crate::model::Slot::Free(v) => Some(v),
                _ => None,
            },
            _ => None,
        };
        Ok((code, var))
    }
}

/// Loss of one batch under a code, with optional gradients.
#[derive(Debug, Clone)]
pub struct CodeEval {
    pub loss: f64,
    /// Per-parameter gradients when requested.
    pub theta_grads: Option<Vec<Vec<f64>>>,
    pub z_grad: Vec<f64>,
}

pub fn evaluate_code(
    model: &Model,
    params: &ModelParams,
    template: &CodeTemplate,
    z: &[f64],
    batch: &[&Example],
    theta_grads: bool,
) -> Result<CodeEval, MetaError> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, params, theta_grads);
    let (code, zvar) = template.bind(model, &mut tape, z)?;
    let out = model.nll(&mut tape, &p, &code, batch)?;
    let loss = tape.value(out.loss)[0];
    if loss.is_finite() && (theta_grads || zvar.is_some()) {
        tape.backward(out.loss)?;
    }
    let theta = theta_grads.then(|| {
        p.vars
            .iter()
            .zip(&params.tensors)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    });
    let z_grad = zvar
        .and_then(|v| tape.grad(v).map(<[f64]>::to_vec))
        .unwrap_or_else(|| vec![0.0; z.len()]);
    Ok(CodeEval {
        loss,
        theta_grads: theta,
        z_grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    NoImprovement,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub z_best: Vec<f64>,
    pub best_loss: f64,
    /// Batch loss at z_0, z_1, ..., one entry per evaluation.
    pub loss_trace: Vec<f64>,
    pub steps_taken: usize,
    pub stop_reason: StopReason,
    /// z at every evaluation, when recording was requested.
    pub trajectory: Vec<Vec<f64>>,
}

/// Inner-loop settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoop {
    pub max_steps: usize,
    pub optimizer: AdamConfig,
    pub patience: Option<usize>,
    pub tolerance: f64,
}

impl InnerLoop {
    pub fn training(cfg: &TamConfig) -> Self {
        Self {
            max_steps: cfg.max_inner_steps,
            optimizer: cfg.inner_optimizer,
            patience: cfg.early_stop_patience,
            tolerance: cfg.improvement_tolerance,
        }
    }

    pub fn test(cfg: &TamConfig) -> Self {
        Self {
            max_steps: cfg.adaptation_steps_at_test,
            ..Self::training(cfg)
        }
    }
}

/// Optimizes `z` from zero with the parameters frozen. The batch loss is
/// evaluated at every iterate (z_0 included); with an accumulator, the
/// parameter gradient of each of those evaluations is added to it.
pub fn adapt_task_embedding(
    model: &Model,
    params: &ModelParams,
    batch: &[&Example],
    template: &CodeTemplate,
    inner: &InnerLoop,
    mut accumulator: Option<&mut [Vec<f64>]>,
    record_trajectory: bool,
) -> Result<AdaptationResult, MetaError> {
    let n = template.z_len(model);
    let max_steps = if n == 0 { 0 } else { inner.max_steps };
    let mut z = vec![Tensor::zeros(&[n.max(1)])];
    let mut adam = AdamState::for_shapes(inner.optimizer, vec![vec![n.max(1)]]);
    let mut result = AdaptationResult {
        z_best: vec![0.0; n],
        best_loss: f64::INFINITY,
        loss_trace: Vec::with_capacity(max_steps + 1),
        steps_taken: 0,
        stop_reason: StopReason::MaxSteps,
        trajectory: Vec::new(),
    };
    let mut stale = 0;
    for step in 0..=max_steps {
        let zs = &z[0].data()[..n];
        let eval = evaluate_code(model, params, template, zs, batch, accumulator.is_some())?;
        if !eval.loss.is_finite() {
            return Err(MetaError::NonFiniteLoss {
                step,
                loss: eval.loss,
                z_norm: zs.iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
        }
        if let (Some(acc), Some(g)) = (accumulator.as_deref_mut(), &eval.theta_grads) {
            for (a, g) in acc.iter_mut().zip(g) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        if record_trajectory {
            result.trajectory.push(zs.to_vec());
        }
        result.loss_trace.push(eval.loss);
        if eval.loss < result.best_loss - inner.tolerance || step == 0 {
            result.best_loss = eval.loss;
            result.z_best = zs.to_vec();
            stale = 0;
        } else {
            stale += 1;
        }
        if step == max_steps {
            break;
        }
        if inner.patience.is_some_and(|p| stale >= p) {
            result.stop_reason = StopReason::NoImprovement;
            break;
        }
        adam.step(&mut z, &[eval.z_grad])?;
        result.steps_taken += 1;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::Target;
    use crate::model::{Architecture, Conditioning, ModelConfig};

    fn model(arch: Architecture, cond: Conditioning) -> Model {
        Model::new(ModelConfig {
            num_layers: 1,
            embed_dim: 8,
            num_heads: 2,
            feedforward_dim: 16,
            vocab_size: 12,
            max_positions: 16,
            num_classes: 4,
            architecture: arch,
            conditioning: cond,
            adapter_bottleneck: 2,
            zero_init_output: false,
            init_seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn batch() -> Vec<Example> {
        (0..12u32)
            .map(|i| Example {
                x: vec![i % 12, (i * 5) % 12, 3, (i * 7) % 12, 1],
                y: Target::Label((i % 4) as u32),
            })
            .collect()
    }

    fn inner(steps: usize, patience: Option<usize>) -> InnerLoop {
        InnerLoop {
            max_steps: steps,
            optimizer: AdamConfig::with_learning_rate(5e-2),
            patience,
            tolerance: 1e-6,
        }
    }

    #[test]
    fn zero_budget_returns_zero_embedding() {
        let m = model(Architecture::Encoder, Conditioning::InputToken);
        let p = m.init_params();
        let b = batch();
        let refs: Vec<&Example> = b.iter().collect();
        let r = adapt_task_embedding(&m, &p, &refs, &CodeTemplate::Dense, &inner(0, Some(1)), None, false).unwrap();
        assert_eq!(r.steps_taken, 0);
        assert_eq!(r.z_best, vec![0.0; 8]);
        assert_eq!(r.loss_trace.len(), 1);
    }

    #[test]
    fn best_tracking_and_step_count() {
        for cond in [Conditioning::InputToken, Conditioning::Adapter, Conditioning::LayerNorm] {
            let m = model(Architecture::Encoder, cond);
            let p = m.init_params();
            let b = batch();
            let refs: Vec<&Example> = b.iter().collect();
            let r = adapt_task_embedding(&m, &p, &refs, &CodeTemplate::Dense, &inner(25, None), None, false).unwrap();
            assert_eq!(r.steps_taken, 25);
            assert_eq!(r.stop_reason, StopReason::MaxSteps);
            let min = r.loss_trace.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(r.best_loss <= min + 1e-6);
            assert!(r.best_loss <= r.loss_trace[0]);
            assert!(r.best_loss < r.loss_trace[0], "{cond:?} did not improve");
            let at_best = evaluate_code(&m, &p, &CodeTemplate::Dense, &r.z_best, &refs, false).unwrap();
            assert_eq!(at_best.loss, r.best_loss);

            let early = adapt_task_embedding(&m, &p, &refs, &CodeTemplate::Dense, &inner(25, Some(1)), None, false).unwrap();
            assert!(early.steps_taken <= 25);
            if early.stop_reason == StopReason::NoImprovement {
                assert_eq!(early.loss_trace.len(), early.steps_taken + 1);
            }
        }
    }

    #[test]
    fn accumulated_gradient_replays() {
        let m = model(Architecture::Decoder, Conditioning::Adapter);
        let p = m.init_params();
        let b: Vec<Example> = (0..6u32)
            .map(|i| Example {
                x: vec![i, 2, 3, 4],
                y: Target::Sequence(vec![(i + 1) % 12, 3]),
            })
            .collect();
        let refs: Vec<&Example> = b.iter().collect();
        let mut acc: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        let r = adapt_task_embedding(&m, &p, &refs, &CodeTemplate::Dense, &inner(5, None), Some(&mut acc), true).unwrap();
        assert_eq!(r.trajectory.len(), 6);
        let mut replay: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        for z in &r.trajectory {
            let g = evaluate_code(&m, &p, &CodeTemplate::Dense, z, &refs, true).unwrap();
            for (a, g) in replay.iter_mut().zip(g.theta_grads.unwrap()) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        assert_eq!(acc, replay);
    }
}
