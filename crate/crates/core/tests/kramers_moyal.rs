//! Kramers–Moyal estimates on exactly sampled OU transitions.

use latent_sde::diagnostics::{KmConfig, km_coefficients, least_squares_slope};
use latent_sde::sde::{Path, TimeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const THETA: f64 = 1.0;
const SIGMA: f64 = 0.8;
const DT: f64 = 0.01;

fn exact_ou(n_paths: usize, steps: usize, seed: u64) -> Vec<Path> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (-THETA * DT).exp();
    let s = SIGMA * ((1.0 - a * a) / (2.0 * THETA)).sqrt();
    let stationary = SIGMA / (2.0 * THETA).sqrt();
    let grid = TimeGrid::new(0.0, DT, steps).unwrap();
    (0..n_paths)
        .map(|_| {
            let z0: f64 = StandardNormal.sample(&mut rng);
            let mut x = stationary * z0;
            let mut v = vec![x];
            for _ in 0..steps {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = a * x + s * z;
                v.push(x);
            }
            Path::new(grid, 1, v).unwrap()
        })
        .collect()
}

#[test]
fn ou_drift_and_diffusion_recovered() {
    let paths = exact_ou(200, 2000, 11);
    let cfg = KmConfig { n_bins: 21, range: Some((-0.8, 0.8)), bandwidth: Some(0.1), ..KmConfig::default() };
    let km = km_coefficients(&paths, &cfg).unwrap();
    assert!(km.valid.iter().all(|v| *v));
    // exact one-step moments: m1 = (a−1)x/Δt, m2 = ((a−1)²x² + s²)/Δt
    let a = (-THETA * DT).exp();
    let var = SIGMA * SIGMA * (1.0 - a * a) / (2.0 * THETA);
    for (i, &c) in km.bin_centers.iter().enumerate() {
        let m2 = ((a - 1.0).powi(2) * c * c + var) / DT;
        assert!((km.m2[i] - m2).abs() < 0.05 * m2, "m2 at {c}: {} vs {m2}", km.m2[i]);
    }
    let pts: Vec<(f64, f64)> = km.bin_centers.iter().copied().zip(km.m1.iter().copied()).collect();
    let slope = least_squares_slope(&pts).unwrap();
    assert!((slope - (a - 1.0) / DT).abs() < 0.15, "m1 slope {slope}");
}

#[test]
fn factorial_convention_halves_m2() {
    let paths = exact_ou(20, 500, 3);
    let base = KmConfig { n_bins: 9, range: Some((-0.5, 0.5)), ..KmConfig::default() };
    let plain = km_coefficients(&paths, &base).unwrap();
    let fact = km_coefficients(&paths, &KmConfig { factorial: true, ..base }).unwrap();
    for (p, f) in plain.m2.iter().zip(&fact.m2) {
        assert!((p - 2.0 * f).abs() <= 1e-12 * p.abs());
    }
    assert_eq!(plain.m1, fact.m1);
}

#[test]
fn sparse_bins_are_invalid() {
    let paths = exact_ou(5, 100, 4);
    let cfg = KmConfig { n_bins: 5, range: Some((5.0, 6.0)), bandwidth: Some(0.1), ..KmConfig::default() };
    let km = km_coefficients(&paths, &cfg).unwrap();
    assert!(km.valid.iter().all(|v| !*v));
    assert!(km.m2.iter().all(|v| v.is_nan()));
}
