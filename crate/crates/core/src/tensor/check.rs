//! Central finite differences, the independent oracle for every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::Result;

/// Step for central differences in 64-bit arithmetic.
pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared absolutely rather than relatively;
/// below it the finite-difference rounding error (≈1e-10) dominates.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `(f(x + h) - f(x - h)) / 2h` for coordinate `coord` of `x`.
pub fn central_difference<F>(x: &mut Tensor, coord: usize, mut f: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let orig = x.data()[coord];
    x.data_mut()[coord] = orig + FD_STEP;
    let plus = f(x)?;
    x.data_mut()[coord] = orig - FD_STEP;
    let minus = f(x)?;
    x.data_mut()[coord] = orig;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

/// Checks the full Jacobian of `build` against finite differences.
///
/// The scalar probed is `Σ out ⊙ R` with a fixed random `R`, so every output
/// coordinate contributes. Returns the maximum relative error over all input
/// coordinates.
pub fn max_op_gradient_error<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe =
        |xs: &[Tensor], weights: Option<&Tensor>| -> Result<(Tape, Vec<Var>, Var, Tensor)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let out = build(&mut tape, &vars)?;
            let w = match weights {
                Some(w) => w.clone(),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let shape = tape.shape(out).to_vec();
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?
                }
            };
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv)?;
            let loss = tape.sum(prod);
            Ok((tape, vars, loss, w))
        };

    let (tape, vars, loss, weights) = probe(inputs, None)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.grad(v);
        for coord in 0..xs[k].len() {
            let mut x = xs[k].clone();
            let numeric = central_difference(&mut x, coord, |x| {
                xs[k] = x.clone();
                let (t, _, l, _) = probe(&xs, Some(&weights))?;
                Ok(t.value(l).item())
            })?;
            xs[k] = inputs[k].clone();
            worst = worst.max(relative_error(analytic.data()[coord], numeric));
        }
    }
    Ok(worst)
}

/// Uniform(−1, 1) tensor for tests and checks.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches")
}
