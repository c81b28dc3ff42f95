use super::{NumericsError, Tape, Tensor, Var};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the function on the given tape from the input node and returns
/// the scalar output. Returns the largest per-coordinate relative error
/// `|analytic - numeric| / (|analytic| + 1e-8)`. Values passed through
/// [`Tape::detach`] are held at their unperturbed values, so the numeric
/// derivative matches stop-gradient semantics.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    grad_check_with(f, x, h, |_| None)
}

/// [`grad_check`] for functions with their own error type, restricted to
/// the coordinates selected by `pick` (all when it returns `None`).
pub fn grad_check_with<F, E>(
    f: F,
    x: &Tensor,
    h: f64,
    pick: impl Fn(usize) -> Option<Vec<usize>>,
) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.get(xv)?;
    let frozen = tape.detached_values().to_vec();

    let eval = |point: Vec<f64>| -> Result<f64, E> {
        let mut tape = Tape::replaying(frozen.clone());
        let v = tape.constant(Tensor::new(x.shape().to_vec(), point)?);
        let out = f(&mut tape, v)?;
        let y = tape.value(out).item()?;
        if y.is_finite() {
            Ok(y)
        } else {
            Err(NumericsError::NonFinite { op: "grad_check" }.into())
        }
    };

    let coords = pick(x.len()).unwrap_or_else(|| (0..x.len()).collect());
    let mut worst: f64 = 0.0;
    for i in coords {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.square(v);
                Ok(t.sum(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        // log at 0 - h is NaN
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let res = grad_check(
            |t, v| {
                let l = t.log(v);
                Ok(t.sum(l))
            },
            &x,
            1e-4,
        );
        assert!(res.is_err());
    }

    #[test]
    fn detached_values_are_held_fixed() {
        // f(x) = sum(x * detach(x)); d/dx = detach(x) = x
        let x = Tensor::new(vec![3], vec![0.5, -2.0, 1.5]).unwrap();
        let err = grad_check(
            |t, v| {
                let d = t.detach(v);
                let p = t.mul(v, d)?;
                Ok(t.sum(p))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
