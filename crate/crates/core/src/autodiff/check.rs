use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative discrepancy between the tape gradient of `f` at `x` and
/// a central finite difference with the given `step`.
///
/// Per coordinate the error is `|a − c| / (|a| + |c| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {step}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point);
        let out = f(&mut tape, xv)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        v.check_finite("grad_check objective")?;
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.value(out).check_finite("grad_check objective")?;
    let analytic = tape.backward(out)?.get(xv).cloned().expect("param gradient");
    analytic.check_finite("grad_check gradient")?;

    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[k] += step;
        let mut minus = x.clone();
        minus.data_mut()[k] -= step;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[k];
        worst = worst.max((a - central).abs() / (a.abs() + central.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&mut rng, 1, 5);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform(&mut rng, 1, 4);
        let w = uniform(&mut rng, 4, 1);
        let err = grad_check(
            |t, x| {
                let wv = t.constant(w.clone());
                t.matmul(x, wv)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn two_layer_tanh_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(&mut rng, 3, 4);
        let w1 = uniform(&mut rng, 4, 8);
        let b1 = uniform(&mut rng, 1, 8);
        let w2 = uniform(&mut rng, 8, 2);
        let err = grad_check(
            |t, x| {
                let (w1, b1, w2) = (
                    t.constant(w1.clone()),
                    t.constant(b1.clone()),
                    t.constant(w2.clone()),
                );
                let h = t.matmul(x, w1)?;
                let h = t.add_row(h, b1)?;
                let h = t.tanh(h)?;
                let o = t.matmul(h, w2)?;
                let o = t.tanh(o)?;
                let sq = t.mul(o, o)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_non_finite_and_bad_step() {
        let x = Tensor::row(&[1.0]);
        let nan = |t: &mut Tape, x: Var| t.scale(x, f64::NAN);
        assert!(matches!(grad_check(nan, &x, 1e-6), Err(Error::NonFinite(_))));
        assert!(grad_check(|t, x| Ok(t.sum_all(x)), &x, 0.0).is_err());
    }
}
