use std::f64::consts::PI;

use approx::assert_relative_eq;
use hydrokam_core::functionals::{half_log_laplacian, variational_sup_check, VariationalCheck};
use hydrokam_core::linalg::{largest_eigenvalue, CyclicTridiag};
use hydrokam_core::seed::rng_from_seed;
use hydrokam_core::torus::{
    h_minus1_norm, random_smooth_density, random_smooth_field, w1_circle, w1_circle_atomic, GridDensity,
    GridField, TorusGrid,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

fn circle_dist(x: f64, y: f64) -> f64 {
    let d = (x - y).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..n {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

/// Optimal coupling of `n` unit-mass atoms per side. The transport polytope
/// for equal masses is the Birkhoff polytope, so a permutation is optimal.
fn w1_by_permutations(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    permutations(a.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| circle_dist(a[i], b[j])).sum::<f64>() / n)
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn atomic_w1_matches_exhaustive_couplings() {
    let mut rng = rng_from_seed(11);
    for trial in 0..300 {
        let n = 1 + trial % 6;
        // a few distinct sites so that repeated atoms carry unequal masses
        let sites: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < 0.5 {
                        sites[rng.random_range(0..sites.len())]
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        };
        let (a, b) = (draw(n), draw(n));
        let w = 1.0 / n as f64;
        let aw: Vec<(f64, f64)> = a.iter().map(|&x| (x, w)).collect();
        let bw: Vec<(f64, f64)> = b.iter().map(|&x| (x, w)).collect();
        let got = w1_circle_atomic(&aw, &bw).unwrap();
        let want = w1_by_permutations(&a, &b);
        assert!((got - want).abs() <= 1e-8, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn grid_w1_matches_fine_atomization() {
    // each cell of a cell-constant density is a uniform measure; replace it
    // by K equal atoms at the sub-cell midpoints, error O(dx / K)
    let g = TorusGrid::new(32).unwrap();
    let mut rng = rng_from_seed(12);
    let k = 200;
    for _ in 0..10 {
        let rho = random_smooth_density(g, 3, 1.0, &mut rng);
        let gamma = random_smooth_density(g, 3, 1.0, &mut rng);
        let atoms = |d: &GridDensity| -> Vec<(f64, f64)> {
            let mut out = Vec::new();
            for (i, v) in d.values().iter().enumerate() {
                for s in 0..k {
                    let x = (i as f64 + (s as f64 + 0.5) / k as f64) * g.dx();
                    out.push((x, v * g.dx() / k as f64));
                }
            }
            out
        };
        let a = atoms(&rho);
        let mut b = atoms(&gamma);
        // equalize total mass to round-off
        let diff: f64 = a.iter().map(|p| p.1).sum::<f64>() - b.iter().map(|p| p.1).sum::<f64>();
        b[0].1 += diff;
        let want = w1_circle_atomic(&a, &b).unwrap();
        let got = w1_circle(&rho, &gamma).unwrap();
        assert!((got - want).abs() <= 2.0 * g.dx() / k as f64, "{got} vs {want}");
    }
}

#[test]
fn h_minus1_norm_is_the_sup_over_test_functions() {
    // ||m||^2 / 2 = sup_phi <m, phi> - |D phi|^2 / 2 over phi in the span of
    // the modes present in m
    let g = TorusGrid::new(64).unwrap();
    let mut rng = rng_from_seed(13);
    let modes = 6;
    for _ in 0..20 {
        let m = random_smooth_field(g, modes, 1.0, &mut rng);
        // (test function, its derivative)
        let mut basis: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for k in 1..=modes {
            let w = 2.0 * PI * k as f64;
            let x = g.nodes();
            basis.push((x.iter().map(|x| (w * x).cos()).collect(), x.iter().map(|x| -w * (w * x).sin()).collect()));
            basis.push((x.iter().map(|x| (w * x).sin()).collect(), x.iter().map(|x| w * (w * x).cos()).collect()));
        }
        let n = basis.len();
        let l = DVector::from_iterator(n, basis.iter().map(|(b, _)| g.inner(m.values(), b)));
        let q = DMatrix::from_fn(n, n, |i, j| g.inner(&basis[i].1, &basis[j].1));
        let a = q.lu().solve(&l).unwrap();
        let sup = 0.5 * l.dot(&a);
        let norm = h_minus1_norm(&m).finite().unwrap();
        assert!((sup - 0.5 * norm * norm).abs() <= 1e-6, "{sup} vs {}", 0.5 * norm * norm);
    }
}

#[test]
fn largest_eigenvalue_matches_dense_solver() {
    let mut rng = rng_from_seed(14);
    for n in [2usize, 3, 7, 20, 60] {
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let e: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                d[i]
            } else if i + 1 == j {
                e[i]
            } else if j + 1 == i {
                e[j]
            } else {
                0.0
            }
        });
        let want = SymmetricEigen::new(a).eigenvalues.max();
        assert_relative_eq!(largest_eigenvalue(&d, &e), want, epsilon = 1e-10, max_relative = 1e-12);
    }
}

#[test]
fn cyclic_solve_matches_dense_lu() {
    let mut rng = rng_from_seed(15);
    for n in [3usize, 4, 9, 33] {
        let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upper: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let diag: Vec<f64> = (0..n).map(|_| 3.0 + rng.random::<f64>()).collect();
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] += diag[i];
            a[(i, (i + n - 1) % n)] += lower[i];
            a[(i, (i + 1) % n)] += upper[i];
        }
        let want = a.lu().solve(&DVector::from_vec(rhs.clone())).unwrap();
        let got = CyclicTridiag { lower, diag, upper }.solve(&rhs).unwrap();
        for i in 0..n {
            assert!((got[i] - want[i]).abs() <= 1e-12, "n = {n}, i = {i}");
        }
    }
}

#[test]
fn fisher_information_is_a_sup_over_test_fields() {
    // log rho is a trigonometric polynomial with the tested modes
    let g = TorusGrid::new(64).unwrap();
    let mut rng = rng_from_seed(16);
    for _ in 0..10 {
        let rho = random_smooth_density(g, 4, 1.0, &mut rng);
        let r = variational_sup_check(VariationalCheck::Fisher { rho: &rho, modes: 4 }).unwrap();
        assert!(r.holds, "gap {}", r.gap);
    }
}

#[test]
fn lagrangian_is_the_legendre_transform_of_the_hamiltonian() {
    let g = TorusGrid::new(64).unwrap();
    let mut rng = rng_from_seed(17);
    for _ in 0..10 {
        let rho = random_smooth_density(g, 3, 1.0, &mut rng);
        let drift = half_log_laplacian(&rho).unwrap();
        let push = random_smooth_field(g, 5, 1.0, &mut rng);
        let rho_dot = GridField::new(g, drift.iter().zip(push.values()).map(|(a, b)| a + b).collect()).unwrap();
        let r = variational_sup_check(VariationalCheck::Legendre {
            rho: &rho,
            rho_dot: &rho_dot,
            modes: 5,
        })
        .unwrap();
        assert!(r.holds, "gap {}", r.gap);
    }
}
