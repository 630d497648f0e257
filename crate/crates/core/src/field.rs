//! Shared field type and small elementwise helpers.

use ndarray::Array3;

use crate::error::{Error, Result};

/// A `C x H x W` image-shaped field.
pub type Field = Array3<f64>;

pub(crate) fn shape3(field: &Field) -> [usize; 3] {
    let s = field.shape();
    [s[0], s[1], s[2]]
}

pub(crate) fn ensure_same_shape(expected: &Field, got: &Field) -> Result<()> {
    if expected.shape() != got.shape() {
        return Err(Error::dims(expected.shape(), got.shape()));
    }
    Ok(())
}

/// Fill a field with independent standard normal draws, in row-major order.
pub fn standard_normal<R: rand::Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Field {
    Field::from_shape_simple_fn(shape, || rng.sample(rand_distr::StandardNormal))
}

pub fn rmse(a: &Field, b: &Field) -> f64 {
    let n = a.len() as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

pub fn max_abs_diff(a: &Field, b: &Field) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
