use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Glorot-uniform initialization: `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
///
/// A 2-D shape uses its two extents as the fans; a 1-D shape of length `n`
/// is treated as a `1×n` row.
pub fn xavier_init<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let (fan_a, fan_b) = match *shape {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => {
            return Err(Error::shape(
                "xavier_init",
                format!("expected 1-D or 2-D shape, got {shape:?}"),
            ))
        }
    };
    let bound = (6.0 / (fan_a + fan_b) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}
