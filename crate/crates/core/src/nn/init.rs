use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;

/// I.i.d. Gaussian weights with mean 0 and variance `2 / fan_in`.
pub fn he_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Config("fan_in must be positive".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    Ok(Tensor::from_fn(shape, |_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal))))
}
