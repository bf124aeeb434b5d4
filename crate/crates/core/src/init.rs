//! Parameter initialisers.

use rand::Rng;

use crate::diffcore::Array;

/// Uniform Glorot initialisation for a `[rows, cols]` weight.
pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    uniform(&[rows, cols], a, rng)
}

pub(crate) fn uniform<R: Rng>(shape: &[usize], a: f64, rng: &mut R) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..=a)).collect()).expect("shape matches data")
}
