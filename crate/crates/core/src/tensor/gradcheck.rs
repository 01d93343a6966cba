//! Central finite-difference check of the backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Seeded uniform(-1, 1) tensors of the given shapes.
pub fn random_inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(s.to_vec(), data).expect("positive extents")
        })
        .collect()
}

/// Max over all input entries of `|analytic - numeric| / max(1, |numeric|)`
/// for the function built by `build` on seeded random inputs.
///
/// Non-scalar outputs are reduced with a fixed random weighting so every
/// output entry participates.
pub fn gradient_check<F>(build: F, shapes: &[&[usize]], seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradient_check_at(build, random_inputs(shapes, seed), seed)
}

pub fn gradient_check_at<F>(build: F, inputs: Vec<Tensor>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut weights: Option<Tensor> = None;

    let mut eval = |inputs: &[Tensor], track: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = build(&mut g, &vars)?;
        let loss = if g.value(out).is_scalar() {
            out
        } else {
            let w = weights
                .get_or_insert_with(|| {
                    let shape = g.shape(out).to_vec();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
                    Tensor::new(shape, data).expect("output shape")
                })
                .clone();
            let wv = g.constant(w);
            let prod = g.mul(out, wv)?;
            g.sum(prod)
        };
        let value = g.value(loss).item()?;
        let grads = if track {
            g.backward(loss)?;
            vars.iter()
                .map(|&v| {
                    g.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; g.value(v).len()])
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(&inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.clone();
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.len() {
            let orig = tensor.data()[ei];
            probe[ti].data_mut()[ei] = orig + FD_STEP;
            let (plus, _) = eval(&probe, false)?;
            probe[ti].data_mut()[ei] = orig - FD_STEP;
            let (minus, _) = eval(&probe, false)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic[ti][ei] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
