//! Matrix-free operator against the dense assembly and SPD checks.

use anisolve::{flat_box_geometry, Field, GridShape, StencilOperator};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn operator(n: usize, ny: usize, nz: usize, nu: f64) -> StencilOperator {
    let mut g = flat_box_geometry(n, nz, nu, 0.01, 1.0).unwrap();
    if ny != n {
        g = anisolve::Geometry::flat_box_block(g.params, n, ny, nz);
    }
    StencilOperator::new(g, GridShape::new(n, ny, nz, 1).unwrap(), 0).unwrap()
}

fn random_field(shape: GridShape, rng: &mut ChaCha8Rng) -> Field {
    Field::from_fn(shape, |_, _, _| rng.random::<f64>() - 0.5)
}

#[test]
fn apply_matches_dense_assembly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(nx, ny, nz, nu) in &[
        (4, 4, 2, 8.4),
        (8, 8, 4, 8.4),
        (8, 4, 3, 33.6),
        (16, 16, 16, 8.4),
        (16, 8, 32, 2.1),
    ] {
        let op = operator(nx, ny, nz, nu);
        let dense = op.assemble_dense().unwrap();
        for _ in 0..3 {
            let x = random_field(*op.shape(), &mut rng);
            let y = op.apply(&x).unwrap().interior_values();
            let want = dense.mul_vec(&x.interior_values());
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = y.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-13 * scale, "{nx}x{ny}x{nz}: {err} vs scale {scale}");
        }
    }
}

#[test]
fn operator_is_symmetric() {
    let op = operator(8, 8, 6, 8.4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let u = random_field(*op.shape(), &mut rng);
        let v = random_field(*op.shape(), &mut rng);
        let auv = op.apply(&u).unwrap().dot(&v).unwrap();
        let uav = u.dot(&op.apply(&v).unwrap()).unwrap();
        assert!((auv - uav).abs() <= 1e-13 * auv.abs().max(uav.abs()), "{auv} vs {uav}");
    }
    let dense = op.assemble_dense().unwrap();
    for r in 0..dense.n() {
        for c in 0..r {
            assert_eq!(dense.get(r, c), dense.get(c, r));
        }
    }
}

#[test]
fn smallest_eigenvalue_is_positive() {
    for nu in [2.1, 8.4, 84.0] {
        let op = operator(4, 4, 2, nu);
        let dense = op.assemble_dense().unwrap();
        let m = DMatrix::from_row_slice(dense.n(), dense.n(), dense.as_slice());
        let eig = SymmetricEigen::new(m);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        // the zero-order term bounds the spectrum from below by one
        assert!(min > 1.0 - 1e-9, "nu {nu}: {min}");
    }
}

#[test]
fn coarse_levels_are_rediscretised_flat_boxes() {
    use anisolve::{MultigridConfig, MultigridHierarchy};
    let fine = flat_box_geometry(16, 4, 8.4, 0.01, 1.0).unwrap();
    let config = MultigridConfig { levels: 3, ..Default::default() };
    let h = MultigridHierarchy::new(fine.clone(), GridShape::new(16, 16, 4, 1).unwrap(), config).unwrap();
    for l in 0..3 {
        let level = h.level(l);
        let n = level.shape().nx();
        // same omega on a grid of n columns: nu scales with the mesh width
        let nu = 2.0 * fine.params.omega * n as f64;
        let direct = operator(n, n, 4, nu);
        let a = level.op.assemble_dense().unwrap();
        let b = direct.assemble_dense().unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "level {l}: {x} vs {y}");
        }
    }
}
