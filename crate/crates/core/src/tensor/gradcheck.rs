//! Central finite-difference gradient checking.
//!
//! The numeric side rebuilds the forward pass from scratch for every
//! perturbed coordinate, so it shares nothing with the backward rules it
//! verifies.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Builds a scalar loss from tape-registered inputs.
pub trait LossBuilder<S: Scalar>: Fn(&mut Tape<S>, &[Var]) -> Result<Var> {}
impl<S: Scalar, F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>> LossBuilder<S> for F {}

fn eval_loss<S: Scalar>(inputs: &[Tensor<S>], build: &impl LossBuilder<S>) -> Result<S> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), false)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Analytic gradients of the loss w.r.t. every input, via the tape.
pub fn analytic_gradient<S: Scalar>(
    inputs: &[Tensor<S>],
    build: &impl LossBuilder<S>,
) -> Result<Vec<Tensor<S>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

/// Central difference for one coordinate of one input.
fn numeric_coord<S: Scalar>(
    inputs: &[Tensor<S>],
    build: &impl LossBuilder<S>,
    input_idx: usize,
    coord: usize,
    step: S,
) -> Result<S> {
    let bump = |delta: S| -> Result<S> {
        let mut perturbed: Vec<Tensor<S>> = inputs.to_vec();
        let mut data = perturbed[input_idx].data().to_vec();
        data[coord] += delta;
        perturbed[input_idx] = Tensor::from_vec(perturbed[input_idx].shape().to_vec(), data)?;
        eval_loss(&perturbed, build)
    };
    let plus = bump(step)?;
    let minus = bump(-step)?;
    Ok((plus - minus) / (step + step))
}

/// Relative error with a unit floor: |a - n| / max(1, |a|, |n|).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Verify analytic against central-difference gradients.
///
/// Checks every coordinate when an input has at most `coords_limit` of them,
/// otherwise a seeded random subset of that size. Returns the worst relative
/// error observed.
pub fn check_gradients<S: Scalar>(
    inputs: &[Tensor<S>],
    build: impl LossBuilder<S>,
    step: S,
    coords_limit: usize,
    seed: u64,
) -> Result<f64> {
    let analytic = analytic_gradient(inputs, &build)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= coords_limit {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(coords_limit);
            all
        };
        for c in coords {
            let num = numeric_coord(inputs, &build, i, c, step)?;
            let ana = analytic[i].data()[c];
            let e = rel_err(ana.as_f64(), num.as_f64());
            if e > worst {
                worst = e;
            }
        }
    }
    Ok(worst)
}

/// One gradient check per tensor primitive on random 64-bit inputs in
/// [-1, 1]; returns `(primitive name, worst relative error)` pairs.
///
/// Non-differentiable-at-a-point cases are avoided by construction (relu
/// inputs are kept away from zero).
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5f64;
    let limit = 512;
    let mut results = Vec::new();

    // Fixed random weights turn each op output into a scalar loss without
    // washing gradients out to a constant.
    {
        let a = Tensor::rand_sym(vec![3, 4], &mut rng);
        let b = Tensor::rand_sym(vec![3, 4], &mut rng);
        let w = Tensor::rand_sym(vec![3, 4], &mut rng);
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
        ] {
            let wc = w.clone();
            let err = check_gradients(
                &[a.clone(), b.clone()],
                move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let out = match f {
                        0 => tape.add(vars[0], vars[1])?,
                        1 => tape.sub(vars[0], vars[1])?,
                        _ => tape.mul(vars[0], vars[1])?,
                    };
                    let wv = tape.constant(wc.clone());
                    let prod = tape.mul(out, wv)?;
                    tape.sum_all(prod)
                },
                step,
                limit,
                seed,
            )?;
            results.push((name, err));
        }
    }

    {
        let a = Tensor::rand_sym(vec![2, 5], &mut rng);
        let w = Tensor::rand_sym(vec![2, 5], &mut rng);
        let err = check_gradients(
            &[a],
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.scale(vars[0], 0.37)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("scale", err));
    }

    {
        let a = Tensor::rand_sym(vec![3, 4], &mut rng);
        let b = Tensor::rand_sym(vec![4, 2], &mut rng);
        let w = Tensor::rand_sym(vec![3, 2], &mut rng);
        let wc = w.clone();
        let err = check_gradients(
            &[a.clone(), b.clone()],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.matmul(vars[0], vars[1])?;
                let wv = tape.constant(wc.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("matmul", err));

        let err = check_gradients(
            &[a, b],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.spatial_aggregate(vars[0], vars[1])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("spatial_aggregate", err));
    }

    {
        let x = Tensor::rand_sym(vec![2, 3, 8], &mut rng);
        let k = Tensor::rand_sym(vec![4, 3, 3], &mut rng);
        let w = Tensor::rand_sym(vec![2, 4, 8], &mut rng);
        let err = check_gradients(
            &[x, k],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.conv1d(vars[0], vars[1], 2)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("conv1d", err));
    }

    {
        let x = Tensor::rand_sym(vec![3, 5], &mut rng);
        let w = Tensor::rand_sym(vec![3, 5], &mut rng);
        let wc = w.clone();
        let err = check_gradients(
            std::slice::from_ref(&x),
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.sigmoid(vars[0])?;
                let wv = tape.constant(wc.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("sigmoid", err));

        // keep relu inputs away from the kink at zero
        let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let err = check_gradients(
            &[xr],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.relu(vars[0])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("relu", err));
    }

    {
        let a = Tensor::rand_sym(vec![2, 3, 4], &mut rng);
        let b = Tensor::rand_sym(vec![2, 2, 4], &mut rng);
        let w = Tensor::rand_sym(vec![2, 5, 4], &mut rng);
        let err = check_gradients(
            &[a, b],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.concat(&[vars[0], vars[1]], 1)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("concat", err));
    }

    {
        let a = Tensor::rand_sym(vec![2, 6, 3], &mut rng);
        let w = Tensor::rand_sym(vec![2, 2, 3], &mut rng);
        let err = check_gradients(
            &[a],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let parts = tape.split(vars[0], 1, &[2, 2, 2])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(parts[1], wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("split", err));
    }

    {
        let a = Tensor::rand_sym(vec![3, 4], &mut rng);
        let w = Tensor::rand_sym(vec![12], &mut rng);
        let err = check_gradients(
            &[a],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.reshape(vars[0], vec![12])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("reshape", err));
    }

    {
        let a = Tensor::rand_sym(vec![2, 3, 4], &mut rng);
        let w = Tensor::rand_sym(vec![4, 2, 3], &mut rng);
        let err = check_gradients(
            &[a],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.permute(vars[0], &[2, 0, 1])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("permute", err));
    }

    {
        let a = Tensor::rand_sym(vec![3, 4], &mut rng);
        let err = check_gradients(
            std::slice::from_ref(&a),
            |tape: &mut Tape<f64>, vars: &[Var]| tape.sum_all(vars[0]),
            step,
            limit,
            seed,
        )?;
        results.push(("sum_all", err));

        let err = check_gradients(
            &[a],
            |tape: &mut Tape<f64>, vars: &[Var]| tape.mean_all(vars[0]),
            step,
            limit,
            seed,
        )?;
        results.push(("mean_all", err));
    }

    {
        let a = Tensor::rand_sym(vec![2, 3, 4], &mut rng);
        let v = Tensor::rand_sym(vec![3], &mut rng);
        let w = Tensor::rand_sym(vec![2, 3, 4], &mut rng);
        let err = check_gradients(
            &[a, v],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.add_vec_axis(vars[0], vars[1], 1)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("add_vec_axis", err));
    }

    {
        let a = Tensor::rand_sym(vec![2, 8], &mut rng);
        let w = Tensor::rand_sym(vec![2, 4], &mut rng);
        let err = check_gradients(
            &[a],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.downsample(vars[0], 2)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("downsample", err));
    }

    {
        let a = Tensor::rand_sym(vec![2, 4], &mut rng);
        let w = Tensor::rand_sym(vec![2, 8], &mut rng);
        let err = check_gradients(
            &[a],
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let out = tape.upsample_repeat(vars[0], 2)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv)?;
                tape.sum_all(prod)
            },
            step,
            limit,
            seed,
        )?;
        results.push(("upsample_repeat", err));
    }

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_central_differences() {
        for (name, err) in primitive_suite(20240811).unwrap() {
            assert!(err <= 1e-5, "{name}: worst relative error {err:.3e} exceeds 1e-5");
        }
    }

    #[test]
    fn rel_err_floors_at_one() {
        assert!(rel_err(1e-9, 2e-9) < 1e-8);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
