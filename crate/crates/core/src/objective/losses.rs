use crate::numerics::{NumericsError, Tape, Tensor, Var};

use super::ObjectiveError;

/// `KL(N(mu, sigma^2) || N(0, I))` summed over latent dims, averaged over
/// the batch.
pub fn kl_gaussian(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var, ObjectiveError> {
    let s = tape.value(sigma);
    if s.data().iter().any(|&v| !(v > 0.0)) {
        return Err(ObjectiveError::NonPositiveSigma);
    }
    let batch = s.rows() as f64;
    let mu2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let ls = tape.log(sigma);
    let ls = tape.scale(ls, -2.0);
    let a = tape.add(mu2, s2)?;
    let a = tape.add(a, ls)?;
    let a = tape.add_scalar(a, -1.0);
    let total = tape.sum(a);
    Ok(tape.scale(total, 0.5 / batch))
}

/// Closed-form KL on plain values.
pub fn kl_gaussian_value(mu: &Tensor, sigma: &Tensor) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let (m, s) = (tape.constant(mu.clone()), tape.constant(sigma.clone()));
    let kl = kl_gaussian(&mut tape, m, s)?;
    Ok(tape.value(kl).item()?)
}

/// `sqrt(||a - b||^2 + c^2) - c` per example, averaged over the batch.
pub fn pseudo_huber(tape: &mut Tape, a: Var, b: Var, c: f64) -> Result<Var, NumericsError> {
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d);
    let per = tape.row_sum(d2);
    let per = tape.add_scalar(per, c * c);
    let per = tape.sqrt(per);
    let per = tape.add_scalar(per, -c);
    Ok(tape.mean(per))
}

pub fn pseudo_huber_value(a: &Tensor, b: &Tensor, c: f64) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = pseudo_huber(&mut tape, av, bv, c)?;
    tape.value(l).item()
}

/// Default pseudo-Huber constant for data of dimension `dim`.
pub fn default_huber_constant(dim: usize) -> f64 {
    0.00054 * (dim as f64).sqrt()
}

/// `||a - b||^2` per example, averaged over the batch.
pub fn squared_error(tape: &mut Tape, a: Var, b: Var) -> Result<Var, NumericsError> {
    let batch = tape.value(a).rows() as f64;
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d);
    let s = tape.sum(d2);
    Ok(tape.scale(s, 1.0 / batch))
}

/// Cross-entropy of (possibly soft) targets under Bernoulli logits,
/// summed over dims and averaged over the batch.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: Var) -> Result<Var, NumericsError> {
    let batch = tape.value(logits).rows() as f64;
    let sp = tape.softplus(logits);
    let tl = tape.mul(targets, logits)?;
    let per = tape.sub(sp, tl)?;
    let s = tape.sum(per);
    Ok(tape.scale(s, 1.0 / batch))
}

/// Mean per-dimension binary cross-entropy of binary data under logits.
pub fn bernoulli_recon(logits: &Tensor, x: &Tensor) -> Result<f64, ObjectiveError> {
    if x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(ObjectiveError::NonBinaryTarget);
    }
    if logits.shape() != x.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "bernoulli_recon",
            lhs: logits.shape().to_vec(),
            rhs: x.shape().to_vec(),
        }
        .into());
    }
    let total: f64 = logits
        .data()
        .iter()
        .zip(x.data())
        .map(|(&l, &t)| crate::numerics::softplus_value(l) - t * l)
        .sum();
    Ok(total / x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gaussian_value(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0])).unwrap(), 0.0);
        assert_relative_eq!(
            kl_gaussian_value(&t(&[1, 1], &[1.0]), &t(&[1, 1], &[1.0])).unwrap(),
            0.5
        );
        let expected = 0.5 * (4.0 - 1.0 - 2.0 * 2f64.ln());
        assert_relative_eq!(
            kl_gaussian_value(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[2.0])).unwrap(),
            expected,
            epsilon = 1e-15
        );
        assert_relative_eq!(expected, 0.8069, epsilon = 1e-4);
        // batch averaging
        let two = kl_gaussian_value(&t(&[2, 1], &[1.0, 0.0]), &t(&[2, 1], &[1.0, 1.0])).unwrap();
        assert_relative_eq!(two, 0.25);
        assert!(matches!(
            kl_gaussian_value(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[0.0])),
            Err(ObjectiveError::NonPositiveSigma)
        ));
    }

    #[test]
    fn pseudo_huber_examples() {
        let a = t(&[1, 2], &[3.0, 0.0]);
        assert_eq!(pseudo_huber_value(&a, &a, 0.1).unwrap(), 0.0);
        let b = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(pseudo_huber_value(&a, &b, 0.0).unwrap(), 3.0);
        assert_relative_eq!(pseudo_huber_value(&a, &b, 4.0).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn bernoulli_examples() {
        let one = t(&[1, 1], &[1.0]);
        assert_relative_eq!(
            bernoulli_recon(&t(&[1, 1], &[0.0]), &one).unwrap(),
            std::f64::consts::LN_2
        );
        assert!(bernoulli_recon(&t(&[1, 1], &[50.0]), &one).unwrap() < 1e-20);
        assert_relative_eq!(
            bernoulli_recon(&t(&[1, 1], &[3f64.ln()]), &one).unwrap(),
            (4.0f64 / 3.0).ln(),
            epsilon = 1e-15
        );
        assert!(matches!(
            bernoulli_recon(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[0.5])),
            Err(ObjectiveError::NonBinaryTarget)
        ));
    }

    #[test]
    fn squared_error_is_per_example_sum() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 0.0]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        let l = squared_error(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.0);
    }
}
