//! Gradient checks and reference-example validations.

use tamlab::benchgen::{
    eval_transduction_pipeline, Cell, ElementwiseKind, ElementwiseTransform, Example, Grid, PipelineOutput,
    RearrangeTransform, SubstitutionTransform, Target, TaskKind, TaskSpec,
};
use tamlab::model::{Architecture, Bound, Conditioning, Model, ModelConfig, TaskCode};
use tamlab::numerics::{finite_difference_check, GradCheckConfig, Tensor};

use crate::CliError;

/// Printed obstacle blobs and offset target paths on a 10x10 grid.
pub const PATH_EXAMPLES: [(&[usize], &[usize]); 3] = [
    (&[39, 78, 51, 9, 31, 63, 44, 69], &[170, 160, 150, 140, 130, 121, 112, 103, 114]),
    (&[12, 35, 99, 22, 62, 44, 25, 21], &[170, 161, 152, 143, 134, 124, 114]),
    (&[90, 99, 1, 96, 34, 50, 94, 31], &[170, 171, 162, 152, 143, 133, 123, 114]),
];

fn transduction_oracle() -> Result<(), String> {
    let spec = TaskSpec {
        kind: TaskKind::Transduction {
            elementwise: ElementwiseTransform::new(ElementwiseKind::Add, 2).map_err(|e| e.to_string())?,
            substitution: SubstitutionTransform::ReplaceValue { from: 2, to: 1 },
            rearrange: RearrangeTransform::Reverse,
        },
        primitive_ids: None,
    };
    match eval_transduction_pipeline(&spec, &[0, 5, 0, 3, 6], 12).map_err(|e| e.to_string())? {
        PipelineOutput::Value(y) if y == [8, 5, 1, 7, 1] => Ok(()),
        other => Err(format!("got {other:?}")),
    }
}

fn grid_encoding() -> Result<(), String> {
    let checks = [
        (Cell(7, 0).rasterize(10), 70),
        (Cell(1, 4).rasterize(10), 14),
        (Cell(1, 4).rasterize(10) + 100, 114),
    ];
    match checks.iter().find(|(a, b)| a != b) {
        None => Ok(()),
        Some((a, b)) => Err(format!("{a} != {b}")),
    }
}

fn path_lengths() -> Result<(), String> {
    for (i, (blobs, target)) in PATH_EXAMPLES.iter().enumerate() {
        let cells: Vec<Cell> = blobs.iter().map(|&b| Cell::from_raster(b, 10)).collect();
        let grid = Grid::with_blobs(10, &cells);
        let start = Cell::from_raster(target[0] - 100, 10);
        let end = Cell::from_raster(target[target.len() - 1] - 100, 10);
        let path = grid.shortest_path(start, end).ok_or(format!("example {}: unreachable", i + 1))?;
        if path.len() != target.len() {
            return Err(format!("example {}: optimum {} vs printed {}", i + 1, path.len(), target.len()));
        }
    }
    Ok(())
}

fn gradients() -> Result<(), String> {
    for arch in [Architecture::Encoder, Architecture::Decoder] {
        for cond in [Conditioning::InputToken, Conditioning::Adapter, Conditioning::LayerNorm] {
            let model = Model::new(ModelConfig {
                num_layers: 1,
                embed_dim: 8,
                num_heads: 2,
                feedforward_dim: 16,
                max_positions: 16,
                architecture: arch,
                conditioning: cond,
                adapter_bottleneck: 2,
                zero_init_output: false,
                init_seed: 1,
                ..ModelConfig::default()
            })
            .map_err(|e| e.to_string())?;
            let mut params = model.init_params().tensors;
            let n = params.len();
            let zlen = model.config().task_embedding_len();
            params.push(Tensor::vector((0..zlen).map(|i| 0.03 * ((i % 7) as f64 - 3.0)).collect()));
            let batch: Vec<Example> = (0..3u32)
                .map(|i| Example {
                    x: vec![i, 4, 7, (i * 5) % 12],
                    y: match arch {
                        Architecture::Encoder => Target::Label(i % 4),
                        Architecture::Decoder => Target::Sequence(vec![(i + 2) % 12, 9]),
                    },
                })
                .collect();
            let refs: Vec<&Example> = batch.iter().collect();
            let report = finite_difference_check::<tamlab::model::ModelError, _>(
                &params,
                |tape, vars| {
                    let p = Bound { vars: vars[..n].to_vec() };
                    Ok(model.nll(tape, &p, &TaskCode::Dense(vars[n]), &refs)?.loss)
                },
                &GradCheckConfig {
                    max_coords_per_tensor: Some(8),
                    ..GradCheckConfig::default()
                },
            )
            .map_err(|e| e.to_string())?;
            if !report.passed {
                return Err(format!("{arch:?}/{cond:?}: max relative error {:.2e}", report.max_rel_error));
            }
        }
    }
    Ok(())
}

pub fn run() -> Result<(), CliError> {
    let checks: [(&str, fn() -> Result<(), String>); 4] = [
        ("transduction pipeline reference", transduction_oracle),
        ("grid cell encoding", grid_encoding),
        ("reference path lengths", path_lengths),
        ("gradient check, all architectures and conditioning modes", gradients),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok    {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!("{failed} self-check(s) failed")));
    }
    Ok(())
}
