//! Right-hand sides and the manufactured solution.
//!
//! Every value depends only on the global cell it belongs to, so a field
//! generated rank by rank is identical to the one generated on a single
//! domain.

use std::f64::consts::PI;

use anisolve::{Field, Geometry, GridShape, RankTopology, StencilOperator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RhsMode;

/// `u*(x, y, z) = sin(pi x) sin(pi y) cos(pi z / H)` at cell centres.
pub fn exact_solution(x: f64, y: f64, z: f64, depth: f64) -> f64 {
    (PI * x).sin() * (PI * y).sin() * (PI * z / depth).cos()
}

/// The manufactured solution on the subdomain of `rank`, interior only.
pub fn manufactured_solution(global: &Geometry, topology: &RankTopology, rank: usize) -> Field {
    let mut u = Field::zeros(*topology.local_shape());
    fill_exact(&mut u, global, topology, rank, false);
    u
}

/// Writes `u*` into the interior and, with `halos`, into the halo cells
/// that lie inside the global domain.
fn fill_exact(u: &mut Field, global: &Geometry, topology: &RankTopology, rank: usize, halos: bool) {
    let p = &global.params;
    let local = *topology.local_shape();
    let global_n = topology.global_shape().nx() as isize;
    let (di, dj) = topology.global_offset(rank);
    let lo = if halos { 0 } else { 1 };
    for j in lo..=local.ny() as isize + 1 - lo {
        for i in lo..=local.nx() as isize + 1 - lo {
            let (gi, gj) = (i + di as isize, j + dj as isize);
            if gi < 1 || gj < 1 || gi > global_n || gj > global_n {
                continue;
            }
            let corner = (i == 0 || i == local.nx() as isize + 1) && (j == 0 || j == local.ny() as isize + 1);
            if corner {
                continue;
            }
            let x = (gi as f64 - 0.5) * p.h;
            let y = (gj as f64 - 0.5) * p.h;
            for k in 0..local.nz() {
                let z = (k as f64 + 0.5) * p.h_z;
                u.set(i, j, k as isize, exact_solution(x, y, z, p.depth))
                    .expect("index inside the padded grid");
            }
        }
    }
}

/// The local right-hand side of `rank`.
pub fn local_rhs(mode: RhsMode, seed: u64, global: &Geometry, topology: &RankTopology, rank: usize) -> Field {
    let shape = *topology.local_shape();
    match mode {
        RhsMode::Zero => Field::zeros(shape),
        RhsMode::Random => random_rhs(seed, topology, rank),
        RhsMode::Manufactured => {
            let mut u = Field::zeros(shape);
            fill_exact(&mut u, global, topology, rank, true);
            let op = StencilOperator::new(topology.local_geometry(global), shape, 0).expect("conforming shape");
            op.apply(&u).expect("conforming field")
        }
    }
}

/// U[0,1) values; global column `(gi, gj)` draws its `n_z` values from
/// stream `(gj - 1) n_x + gi - 1` of a generator seeded with `seed`.
fn random_rhs(seed: u64, topology: &RankTopology, rank: usize) -> Field {
    let shape: GridShape = *topology.local_shape();
    let global_n = topology.global_shape().nx() as u64;
    let (di, dj) = topology.global_offset(rank);
    let mut f = Field::zeros(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in 1..=shape.ny() {
        for i in 1..=shape.nx() {
            let column = (j + dj - 1) as u64 * global_n + (i + di - 1) as u64;
            rng.set_stream(column);
            rng.set_word_pos(0);
            for k in 0..shape.nz() {
                f.set(i as isize, j as isize, k as isize, rng.random::<f64>())
                    .expect("interior index");
            }
        }
    }
    f
}
