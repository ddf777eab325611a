//! Finite-difference helpers used to check analytic gradients.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Centered finite-difference gradient of a scalar function at `x`.
pub fn central_difference<T, F>(x: &Tensor<T>, h: f64, mut f: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    let step = T::from_f64_lossy(h);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push(T::from_f64_lossy((plus - minus) / (2.0 * h)));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).as_f64()));
    let scale = norm(&mut a.data().iter().map(|x| x.as_f64()))
        .max(norm(&mut b.data().iter().map(|x| x.as_f64())));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = central_difference(&x, 1e-4, |t| Ok(t.data().iter().map(|v| v * v).sum())).unwrap();
        let exact = x.scale(2.0);
        assert!(relative_error(&g, &exact) < 1e-8);
    }

    #[test]
    fn relative_error_of_zeros_is_zero() {
        let z = Tensor::<f64>::zeros(&[4]);
        assert_eq!(relative_error(&z, &z), 0.0);
    }
}
