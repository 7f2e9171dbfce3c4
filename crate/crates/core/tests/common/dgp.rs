//! Small linear data-generating processes shared by test targets.

use mixmed::data::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random linear mediation data: `p` exposures sharing a common factor,
/// two confounders, and random path coefficients.
pub fn random_linear(n: usize, p: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = DMatrix::from_fn(n, 2, |_, _| normal(&mut rng));
    let load: f64 = rng.random_range(0.0..0.9);
    let common: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let x = DMatrix::from_fn(n, p, |i, _| load * common[i] + 0.3 * c[(i, 0)] + normal(&mut rng));
    let a: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bx: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bm: f64 = rng.random_range(-1.0..1.0);
    let m = DVector::from_fn(n, |i, _| {
        (0..p).map(|j| a[j] * x[(i, j)]).sum::<f64>() + c[(i, 0)] - 0.5 * c[(i, 1)] + normal(&mut rng)
    });
    let y = DVector::from_fn(n, |i, _| {
        (0..p).map(|j| bx[j] * x[(i, j)]).sum::<f64>() + bm * m[i] + 0.7 * c[(i, 1)] + 2.0 + normal(&mut rng)
    });
    Dataset::new(x, m, y, c).unwrap()
}

/// One exposure and one confounder with `M = a·x + c + e`, `Y = bx·x + bm·M + c + e`.
pub fn single_exposure(n: usize, a: f64, bm: f64, bx: f64, rng: &mut ChaCha8Rng) -> Dataset {
    let c: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let x: Vec<f64> = c.iter().map(|ci| 0.3 * ci + normal(rng)).collect();
    let m: Vec<f64> = (0..n).map(|i| a * x[i] + c[i] + normal(rng)).collect();
    let y: Vec<f64> = (0..n).map(|i| bx * x[i] + bm * m[i] + c[i] + normal(rng)).collect();
    Dataset::new(DMatrix::from_vec(n, 1, x), DVector::from_vec(m), DVector::from_vec(y), DMatrix::from_vec(n, 1, c))
        .unwrap()
}
