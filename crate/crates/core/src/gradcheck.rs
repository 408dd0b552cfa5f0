//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it shares no code
//! with the reverse sweep it verifies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut diff = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Result of checking one differentiable function.
#[derive(Clone, Debug)]
pub struct GradCheck<T> {
    pub analytic: Vec<Tensor<T>>,
    pub numeric: Vec<Tensor<T>>,
}

impl<T: Scalar> GradCheck<T> {
    /// Largest per-input relative error.
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(a.data(), n.data()))
            .fold(0.0, f64::max)
    }
}

fn projected_loss<T: Scalar, F>(inputs: &[Tensor<T>], grad: bool, f: &F, seed: u64) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = if tape.value(out).numel() == 1 {
        out
    } else {
        // Random projection so every output element contributes.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let r = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng);
        let r = tape.constant(r);
        let prod = tape.mul(out, r)?;
        tape.sum(prod)?
    };
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of `f` at `inputs` with central
/// differences of step `step`.
///
/// Non-scalar outputs are reduced to a scalar by a fixed random projection
/// derived from `seed`.
pub fn check<T: Scalar, F>(inputs: &[Tensor<T>], step: T, seed: u64, f: F) -> Result<GradCheck<T>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, vars, loss) = projected_loss(inputs, true, &f, seed)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |ins: &[Tensor<T>]| -> Result<T> {
        let (tape, _, loss) = projected_loss(ins, false, &f, seed)?;
        Ok(tape.value(loss).data()[0])
    };
    let two = T::one() + T::one();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (two * step);
        }
        numeric.push(g);
    }
    Ok(GradCheck { analytic, numeric })
}
