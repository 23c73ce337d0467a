//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: Scalar = 1e-5;

/// Compares the tape gradient of the scalar function `f` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, coordinate by coordinate over
/// every input, and returns the largest relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` must build its graph from the supplied input vars only; it is
/// re-evaluated twice per coordinate on a fresh tape.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: Scalar) -> Result<Scalar>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |values: &[Tensor]| -> Result<Scalar> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NotScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut worst: Scalar = 0.0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_sum_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let err = grad_check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                Ok(t.sum(c))
            },
            &[a, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn swiglu_sum_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5, 2]),
        ];
        let err = grad_check(
            |t, v| {
                let y = t.swiglu(v[0], v[1], v[2], v[3])?;
                Ok(t.sum(y))
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::ones(&[3]);
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // stop-gradient through a constant copy: analytic 0, numeric nonzero
        let x = Tensor::full(&[2], 0.5);
        let err = grad_check(
            |t, v| {
                let copy = t.constant(t.value(v[0]).clone());
                let y = t.mul(copy, copy)?;
                Ok(t.sum(y))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
