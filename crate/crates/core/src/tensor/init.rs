use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Refills `weight` with draws from N(0, sqrt(2 / fan_in)).
pub fn kaiming_init<R: Rng + ?Sized>(mut weight: Tensor, fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Config("kaiming init needs fan_in >= 1".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    for w in weight.data_mut() {
        *w = dist.sample(rng) as f32;
    }
    Ok(weight)
}
