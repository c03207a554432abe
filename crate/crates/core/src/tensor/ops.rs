use super::Real;
use crate::error::{Error, Result};

/// Norm below which a vector counts as degenerate for [`cosine`].
pub const EPSILON_NORM: f64 = 1e-12;

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut out = logits.to_vec();
    softmax_unchecked(&mut out);
    Ok(out)
}

/// In-place softmax for callers that already guarantee a nonempty, finite
/// slice.
pub fn softmax_unchecked<T: Real>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

/// Vector-Jacobian product of softmax: given the forward output `y` and
/// upstream gradient `dy`, returns `y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward<T: Real>(y: &[T], dy: &[T]) -> Vec<T> {
    let s = dot(y, dy);
    y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - s)).collect()
}

/// Cosine similarity; 0 when either vector's norm is below [`EPSILON_NORM`].
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked<T: Real>(a: &[T], b: &[T]) -> T {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let eps = T::lit(EPSILON_NORM);
    if na < eps || nb < eps {
        return T::zero();
    }
    let c = dot(a, b) / (na * nb);
    c.max(-T::one()).min(T::one())
}

/// Gradient of `upstream · cosine(a, b)` with respect to `a` and `b`.
pub fn cosine_backward<T: Real>(a: &[T], b: &[T], upstream: T) -> (Vec<T>, Vec<T>) {
    let na2 = dot(a, a);
    let nb2 = dot(b, b);
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let eps = T::lit(EPSILON_NORM);
    if na < eps || nb < eps {
        return (vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
    }
    let inv = T::one() / (na * nb);
    let c = dot(a, b) * inv;
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| upstream * (y * inv - c * x / na2))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| upstream * (x * inv - c * y / nb2))
        .collect();
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_single() {
        let y = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[-123.5f64]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_two_logits() {
        // 1/(1+e), e/(1+e)
        let y = softmax(&[1.0f64, 2.0]).unwrap();
        assert!((y[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((y[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax::<f64>(&[]), Err(Error::EmptyInput)));
        assert!(matches!(
            softmax(&[1.0f64, f64::NAN]),
            Err(Error::NonFiniteInput)
        ));
        assert!(matches!(
            softmax(&[f32::INFINITY]),
            Err(Error::NonFiniteInput)
        ));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let y = softmax(&[1000.0f32, 999.0, -1000.0]).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0f64, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_degenerate_and_mismatch() {
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1e-13f64], &[1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine(&[1.0f64], &[1.0, 2.0]),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
    }
}
