use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::matrix::Matrix;
use crate::real::Real;

/// He-normal weights for a `fan_in x fan_out` matrix.
pub fn he_normal<T: Real, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix<T> {
    scaled_normal(fan_in, fan_out, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn scaled_normal<T: Real, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}

pub fn filled<T: Real>(rows: usize, cols: usize, v: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(v))
}
