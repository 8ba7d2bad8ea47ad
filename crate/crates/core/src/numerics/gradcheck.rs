use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference half step `h`.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates where both gradients are below this magnitude count as
    /// agreeing exactly.
    pub abs_floor: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < abs_floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn eval<E>(
    f: &mut impl FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    params: &[Tensor],
    grad: bool,
) -> Result<(Tape, Vec<Var>, Var), E>
where
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            tape.param(p.shape().to_vec(), p.data().to_vec(), grad)
                .map_err(E::from)
        })
        .collect::<Result<_, _>>()?;
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(loss).to_vec()).into());
    }
    Ok((tape, vars, loss))
}

/// Compares tape gradients of the scalar built by `f` against central finite
/// differences `(f(p + h) - f(p - h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and one leaf per entry of `params`.
pub fn finite_difference_check<E, F>(
    params: &[Tensor],
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
{
    if !(cfg.step > 0.0) {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            msg: format!("step must be positive, got {}", cfg.step),
        }
        .into());
    }
    let (mut tape, vars, loss) = eval(&mut f, params, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        passed: true,
    };
    let mut probe = |work: &mut Vec<Tensor>, ti: usize, ci: usize, delta: f64| -> Result<f64, E> {
        let orig = work[ti].data()[ci];
        work[ti].data_mut()[ci] = orig + delta;
        let out = eval(&mut f, work, false);
        work[ti].data_mut()[ci] = orig;
        let (tape, _, loss) = out?;
        let v = tape.value(loss)[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                tensor: ti,
                coord: ci,
            }
            .into());
        }
        Ok(v)
    };
    for ti in 0..work.len() {
        let n = work[ti].numel();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(limit) if limit < n => {
                let mut c = sample(&mut rng, n, limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for ci in coords {
            let plus = probe(&mut work, ti, ci, cfg.step)?;
            let minus = probe(&mut work, ti, ci, -cfg.step)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ti][ci];
            let err = relative_error(a, numeric, cfg.abs_floor);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, ci, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches() {
        let params = vec![Tensor::vector(vec![3.0])];
        let report = finite_difference_check::<TensorError, _>(
            &params,
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = vec![Tensor::vector(vec![1.0, 2.0])];
        let report = finite_difference_check::<TensorError, _>(
            &params,
            |t, _| t.constant(vec![1], vec![4.0]),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly 0 has a kink; finite differences see slope 1/2.
        let params = vec![Tensor::vector(vec![0.0])];
        let report = finite_difference_check::<TensorError, _>(
            &params,
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_values_name_the_coordinate() {
        // (1.3e154)^2 is finite; one step up overflows.
        let params = vec![Tensor::vector(vec![1.0, 1.3e154])];
        let cfg = GradCheckConfig {
            step: 1e153,
            ..GradCheckConfig::default()
        };
        let err = finite_difference_check::<TensorError, _>(
            &params,
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { tensor: 0, coord: 1 }), "{err:?}");
    }
}
