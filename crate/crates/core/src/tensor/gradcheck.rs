use super::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` records its computation on the tape it is handed, starting from the
/// leaf holding `x`, and returns a scalar [`Var`]. The result is the maximum
/// over elements of `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !x.is_finite() {
        return Err(Error::NonFinite("grad_check input"));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point, false);
        let out = f(&mut tape, v)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    scalar(&tape, out)?;
    let analytic = if tape.requires_grad(out) {
        tape.backward(out)?.take(v).unwrap_or_else(|| Tensor::zeros(x.shape()))
    } else {
        Tensor::zeros(x.shape())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("grad_check finite difference"));
        }
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn scalar(tape: &Tape, out: Var) -> Result<f64> {
    let t = tape.value(out);
    if t.len() != 1 {
        return Err(shape_err(
            "grad_check",
            format!("function must return a scalar, got {:?}", t.shape()),
        ));
    }
    let v = t.data()[0];
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("grad_check function value"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(v).unwrap().data(), &[2.0, 4.0]);

        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let err = grad_check(|tape, _| Ok(tape.leaf(Tensor::scalar(4.0), false)), &x, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(matches!(
            grad_check(|tape, v| tape.sum(v), &x, 1e-4),
            Err(Error::NonFinite(_))
        ));
    }
}
