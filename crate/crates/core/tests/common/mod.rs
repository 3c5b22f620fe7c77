#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
}

/// Rows `mu + L z` with `LL' = sigma`.
pub fn mvn(mu: &DVector<f64>, sigma: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let z = standard_normal(n, mu.len(), &mut r);
    shift_scale(z, mu, sigma)
}

/// Multivariate t with `nu` degrees of freedom, rescaled to covariance `sigma`.
pub fn mvt(mu: &DVector<f64>, sigma: &DMatrix<f64>, nu: f64, n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let mut z = standard_normal(n, mu.len(), &mut r);
    let chi = ChiSquared::new(nu).unwrap();
    let scale = ((nu - 2.0) / nu).sqrt();
    for mut row in z.row_iter_mut() {
        let w: f64 = chi.sample(&mut r);
        row *= scale * (nu / w).sqrt();
    }
    shift_scale(z, mu, sigma)
}

/// Data whose sample mean is exactly `mu` and whose unbiased sample
/// covariance is exactly `sigma`.
pub fn exact_moments(mu: &DVector<f64>, sigma: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
    let p = mu.len();
    let mut z = standard_normal(n, p, &mut rng(seed));
    let m = z.row_mean();
    for mut row in z.row_iter_mut() {
        row -= &m;
    }
    let sz = z.tr_mul(&z) / (n as f64 - 1.0);
    let lz = sz.cholesky().unwrap().l();
    let white = z * lz.transpose().try_inverse().unwrap();
    shift_scale(white, mu, sigma)
}

fn shift_scale(z: DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let l = sigma.clone().cholesky().unwrap().l();
    let mut y = z * l.transpose();
    for mut row in y.row_iter_mut() {
        row += mu.transpose();
    }
    y
}

/// `ΛΦΛ' + θI`.
pub fn factor_cov(lambda: &DMatrix<f64>, phi: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    lambda * phi * lambda.transpose() + DMatrix::identity(lambda.nrows(), lambda.nrows()) * theta
}

/// Two correlated factors with two indicators each.
pub fn two_factor_cov(rho: f64) -> DMatrix<f64> {
    let lambda = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.8, 0.0, 0.0, 1.0, 0.0, 0.7]);
    let phi = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
    factor_cov(&lambda, &phi, 0.5)
}

/// Nine indicators on three correlated factors.
pub fn three_factor_cov() -> DMatrix<f64> {
    let mut lambda = DMatrix::zeros(9, 3);
    let l = [0.9, 0.5, 0.6, 1.0, 1.1, 0.9, 0.6, 0.7, 0.8];
    for (i, v) in l.iter().enumerate() {
        lambda[(i, i / 3)] = *v;
    }
    let phi = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.3, 0.4, 1.0, 0.2, 0.3, 0.2, 1.0]);
    factor_cov(&lambda, &phi, 0.6)
}

/// Four-wave simplex with autoregression 0.8, unit true-score variance and
/// error variance `ev`.
pub fn simplex_cov(ev: f64) -> DMatrix<f64> {
    DMatrix::from_fn(4, 4, |i, j| {
        let lag = (i as i32 - j as i32).unsigned_abs();
        0.8_f64.powi(lag as i32) + if i == j { ev } else { 0.0 }
    })
}

pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
