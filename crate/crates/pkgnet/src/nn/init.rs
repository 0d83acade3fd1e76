//! Seeded weight initialization. Every draw goes through the caller's RNG in
//! a fixed order, which is what makes teacher/student construction and whole
//! training runs reproducible from a single seed.

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> ArrayD<f32> {
    let dist = Normal::new(0.0f32, std).expect("std must be finite");
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He (fan-in) normal init for a conv weight `(oc, ic, k, k)`.
pub fn he_conv<R: Rng>(rng: &mut R, oc: usize, ic: usize, k: usize) -> Array4<f32> {
    let std = (2.0 / (ic * k * k) as f32).sqrt();
    normal(rng, &[oc, ic, k, k], std).into_dimensionality().unwrap()
}

/// He normal init for a transposed-conv weight `(ic, oc, k, k)`.
pub fn he_conv_transpose<R: Rng>(rng: &mut R, ic: usize, oc: usize, k: usize) -> Array4<f32> {
    let std = (2.0 / (ic * k * k) as f32).sqrt();
    normal(rng, &[ic, oc, k, k], std).into_dimensionality().unwrap()
}

pub fn zeros1(n: usize) -> Array1<f32> {
    Array1::zeros(n)
}
