#![allow(dead_code)]

pub mod criteria;
pub mod gradcases;
pub mod oracles;
pub mod toy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spkcon_core::numerics::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in ±[lo, hi] (bounded away from zero when `lo > 0`).
pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor<f64> {
    let mut t = rand_tensor(rng, &[rows, dim], 0.0, 1.0);
    for i in 0..rows {
        let r = t.row_mut(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

pub fn rand_unit_rows_f32(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor<f32> {
    rand_unit_rows(rng, rows, dim).cast()
}

/// Worst relative error between the tape gradient and central finite
/// differences, at 64-bit precision.
///
/// The scalar objective is `Σ proj ⊙ build(inputs)` with a fixed random
/// projection, so every output element contributes.
pub fn gradient_error<F>(inputs: &[Tensor<f64>], seed: u64, step: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut proj_rng = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let objective = |inputs: &[Tensor<f64>], with_grad: bool| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                if with_grad {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape0, _, out0) = objective(inputs, false);
    let proj = rand_tensor(&mut proj_rng, tape0.value(out0).shape(), 0.5, 1.5);
    let scalar = |tape: &Tape<f64>, out: Var| -> f64 {
        tape.value(out)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let (mut tape, vars, out) = objective(inputs, true);
    let p = tape.constant(proj.clone());
    let weighted = tape.mul(out, p).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();

    // Rounding noise in a central difference grows like eps/step.
    let floor = (1e-11 / step).max(1e-6);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= step;
            let (tp, _, op) = objective(&plus, false);
            let (tm, _, om) = objective(&minus, false);
            let numeric = (scalar(&tp, op) - scalar(&tm, om)) / (2.0 * step);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
