//! Cholesky solver checks against an independent Gauss-elimination oracle.

mod common;

use bdgp_core::bdgp::{assemble_cov, chol_solve, CovMode, RegionParams};
use bdgp_core::grid::GridGeom;
use bdgp_core::partition::Partition;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[test]
fn chol_solve_matches_dense_inverse_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(1717);
    let geom = GridGeom::pixel_space(5, 5).unwrap();
    let partition = Partition::from_labels(geom, vec![1u32; 25]).unwrap();
    for _ in 0..10 {
        // a random 5x5 SPD system: squared-exponential kernel over random
        // pixels plus a nugget
        let sigma = rng.random_range(0.5..2.0);
        let ell = rng.random_range(0.5..1.5);
        let theta = RegionParams::new(vec![sigma; 2], vec![ell; 2]).unwrap();
        let mut pixels: Vec<usize> = (0..25).collect();
        for i in (1..pixels.len()).rev() {
            let j = rng.random_range(0..=i);
            pixels.swap(i, j);
        }
        pixels.truncate(5);
        let cov = assemble_cov(&partition, &pixels, &theta, CovMode::Latent, 0.0, 1e-8).unwrap();
        let rhs_vec: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rhs = DMatrix::from_column_slice(5, 1, &rhs_vec);
        let solution = chol_solve(&cov, &rhs).unwrap();

        // oracle: explicit inverse by Gauss elimination
        let k_rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| cov.matrix()[(i, j)]).collect())
            .collect();
        let expected = common::gauss_solve(&k_rows, &rhs_vec);
        for i in 0..5 {
            let rel = (solution[(i, 0)] - expected[i]).abs() / expected[i].abs().max(1e-12);
            assert!(rel <= 1e-10, "component {i}: {} vs {}", solution[(i, 0)], expected[i]);
        }

        // residual check: K x reproduces the rhs
        let reconstructed = cov.matrix() * &solution;
        for i in 0..5 {
            let rel =
                (reconstructed[(i, 0)] - rhs_vec[i]).abs() / rhs_vec[i].abs().max(1e-12);
            assert!(rel <= 1e-8);
        }
    }

    // identity system and the scalar case
    let theta = RegionParams::new(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
    let cov = assemble_cov(&partition, &[7], &theta, CovMode::Latent, 0.0, 0.0).unwrap();
    let x = chol_solve(&cov, &DMatrix::from_element(1, 1, 2.0)).unwrap();
    assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
}
