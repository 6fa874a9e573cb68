use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Plain gradient descent: `p <- p - lr * grad(p)`, then clears every gradient.
///
/// All gradients are checked before any parameter is touched, so a missing
/// gradient leaves the whole set unchanged.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::MissingGradient { index });
    }
    for p in params.iter_mut() {
        let grad = p.grad().expect("checked above").to_vec();
        for (v, g) in p.values_mut().iter_mut().zip(grad) {
            *v -= lr * g;
        }
        p.clear_grad();
    }
    Ok(())
}

/// Zero-mean Gaussian weights with standard deviation `sqrt(2 / fan_in)`,
/// where `fan_in` is the product of every extent after the first.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng)).requiring_grad()
}
