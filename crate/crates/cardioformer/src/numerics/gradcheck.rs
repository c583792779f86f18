//! Finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::{NumResult, NumericsError};

/// Compares analytic gradients against central differences.
///
/// `build` constructs a scalar-valued expression from the given leaves; it is
/// re-run from scratch for every perturbed coordinate, so it must be a pure
/// function of the leaf values. Returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)` over every coordinate of every
/// leaf. Runs in `f64`: central differences with `step` around 1e-5 resolve
/// gradients to roughly 1e-10, far below the tolerances asserted on top.
pub fn grad_check<F>(build: F, points: &[Tensor<f64>], step: f64) -> NumResult<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> NumResult<Var<'g, f64>>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(NumericsError::InvalidArgument {
            op: "grad_check",
            detail: format!("step {step} outside [1e-6, 1e-4]"),
        });
    }
    let graph = Graph::new();
    let vars: Vec<Var<'_, f64>> = points
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect::<NumResult<_>>()?;
    let out = build(&graph, &vars)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut worst = 0.0f64;
    for (pi, point) in points.iter().enumerate() {
        for idx in 0..point.len() {
            let x = point.data()[idx];
            let plus = eval_at(&build, points, pi, idx, x + step)?;
            let minus = eval_at(&build, points, pi, idx, x - step)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[idx];
            let rel = (a - numeric).abs() / f64::max(1.0, a.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn eval_at<F>(
    build: &F,
    points: &[Tensor<f64>],
    point_index: usize,
    coord: usize,
    value: f64,
) -> NumResult<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> NumResult<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_, f64>> = points
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = if i == point_index {
                t.with_value_at(coord, value)
            } else {
                t.clone()
            };
            graph.param(t)
        })
        .collect::<NumResult<_>>()?;
    let out = build(&graph, &vars)?;
    graph.value(out).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-6;
    const TRIALS: usize = 10;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let volume = shape.iter().product();
        let data = (0..volume).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Reduces any tensor to a scalar through ops whose gradients are
    /// already covered by the closed-form tests, so failures localize to
    /// the op under test.
    fn to_scalar<'g>(
        g: &'g Graph<f64>,
        mut v: Var<'g, f64>,
    ) -> NumResult<Var<'g, f64>> {
        while !g.shape(v).is_empty() {
            v = g.mean(v, 0)?;
        }
        Ok(v)
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..TRIALS {
            let a = random_tensor(&mut rng, vec![3, 4]);
            let b = random_tensor(&mut rng, vec![4, 2]);
            let err = grad_check(
                |g, vars| to_scalar(g, g.matmul(vars[0], vars[1])?),
                &[a, b],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "matmul gradient error {err}");
        }
    }

    #[test]
    fn matmul_batched_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..TRIALS {
            let a = random_tensor(&mut rng, vec![2, 3, 4]);
            let shared = random_tensor(&mut rng, vec![4, 2]);
            let err = grad_check(
                |g, vars| to_scalar(g, g.matmul(vars[0], vars[1])?),
                &[a.clone(), shared],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "shared-rhs gradient error {err}");

            let batched = random_tensor(&mut rng, vec![2, 4, 3]);
            let err = grad_check(
                |g, vars| to_scalar(g, g.matmul(vars[0], vars[1])?),
                &[a, batched],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "batched-rhs gradient error {err}");
        }
    }

    #[test]
    fn matmul_nt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..TRIALS {
            let a = random_tensor(&mut rng, vec![2, 3, 4]);
            let b = random_tensor(&mut rng, vec![2, 5, 4]);
            let err = grad_check(
                |g, vars| to_scalar(g, g.matmul_nt(vars[0], vars[1])?),
                &[a, b],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "matmul_nt gradient error {err}");
        }
    }

    #[test]
    fn add_mul_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..TRIALS {
            let x = random_tensor(&mut rng, vec![3, 4]);
            let v = random_tensor(&mut rng, vec![4]);
            let s = random_tensor(&mut rng, vec![]);
            let err = grad_check(
                |g, vars| {
                    let a = g.add(vars[0], vars[1])?;
                    let b = g.mul(a, vars[2])?;
                    let c = g.mul(b, vars[0])?;
                    to_scalar(g, c)
                },
                &[x, v, s],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "broadcast gradient error {err}");
        }
    }

    #[test]
    fn relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..TRIALS {
            // Keep coordinates away from the kink at zero, where the
            // two-sided difference straddles the nondifferentiable point.
            let data: Vec<f64> = (0..12)
                .map(|_| {
                    let v: f64 = rng.random_range(0.1..2.0);
                    if rng.random::<bool>() {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let x = Tensor::new(vec![3, 4], data).unwrap();
            let err = grad_check(|g, vars| to_scalar(g, g.relu(vars[0])?), &[x], STEP).unwrap();
            assert!(err < TOL, "relu gradient error {err}");
        }
    }

    #[test]
    fn softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..TRIALS {
            let x = random_tensor(&mut rng, vec![2, 5]);
            let axis = trial % 2;
            let err = grad_check(
                |g, vars| {
                    let y = g.softmax(vars[0], axis)?;
                    let weighted = g.mul(y, vars[0])?;
                    to_scalar(g, weighted)
                },
                &[x],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "softmax gradient error {err}");
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..TRIALS {
            let x = random_tensor(&mut rng, vec![3, 6]);
            let gamma = random_tensor(&mut rng, vec![6]);
            let beta = random_tensor(&mut rng, vec![6]);
            let err = grad_check(
                |g, vars| {
                    let y = g.layer_norm_affine(vars[0], vars[1], vars[2], 1e-5)?;
                    let sq = g.mul(y, y)?;
                    to_scalar(g, sq)
                },
                &[x, gamma, beta],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "layer_norm gradient error {err}");
        }
    }

    #[test]
    fn batch_norm_gradients() {
        // The batch statistics couple every position, which both amplifies
        // finite-difference noise and exercises the full backward rule;
        // tolerance is relaxed accordingly.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..TRIALS {
            let x = random_tensor(&mut rng, vec![5, 3]);
            let err = grad_check(
                |g, vars| {
                    let (y, _, _) = g.batch_norm_train(vars[0], 1e-5)?;
                    let cubed = g.mul(g.mul(y, y)?, y)?;
                    to_scalar(g, cubed)
                },
                &[x],
                STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "batch_norm gradient error {err}");
        }
    }

    #[test]
    fn mean_concat_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..TRIALS {
            let a = random_tensor(&mut rng, vec![2, 3]);
            let b = random_tensor(&mut rng, vec![2, 4]);
            let err = grad_check(
                |g, vars| {
                    let joined = g.concat(&[vars[0], vars[1]], 1)?;
                    let piece = g.slice(joined, 1, 1, 4)?;
                    let sq = g.mul(piece, piece)?;
                    to_scalar(g, g.mean(sq, 1)?)
                },
                &[a, b],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "mean/concat/slice gradient error {err}");
        }
    }

    #[test]
    fn dropout_gradients_with_fixed_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..TRIALS {
            let x = random_tensor(&mut rng, vec![3, 4]);
            let mask_data: Vec<f64> = (0..12)
                .map(|_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::new(vec![3, 4], mask_data).unwrap();
            let err = grad_check(
                |g, vars| {
                    let y = g.dropout_with_mask(vars[0], &mask, 0.3)?;
                    let sq = g.mul(y, y)?;
                    to_scalar(g, sq)
                },
                &[x],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "dropout gradient error {err}");
        }
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..TRIALS {
            let logits = random_tensor(&mut rng, vec![4, 3]);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let err = grad_check(
                |g, vars| g.cross_entropy_from_logits(vars[0], &labels),
                &[logits],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "cross_entropy gradient error {err}");
        }
    }

    #[test]
    fn reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_tensor(&mut rng, vec![2, 6]);
        let err = grad_check(
            |g, vars| {
                let r = g.reshape(vars[0], vec![3, 4])?;
                let sq = g.mul(r, r)?;
                to_scalar(g, sq)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "reshape gradient error {err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::vector(&[1.0]);
        assert!(grad_check(|g, vars| g.mean(vars[0], 0), &[x], 0.0).is_err());
    }
}
