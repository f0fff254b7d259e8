//! Entropy, Fisher information, the Hamiltonian `H(rho, phi)`, its Legendre
//! dual, the comparison operators and their variational checks.

mod potential;

pub use potential::{Bridge, RegularizedPotential};

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::dense_solve;
use crate::torus::{
    derivative_values, h_minus1_distance_sq, h_minus1_sq_values, second_derivative_values,
    Extended, GridDensity, GridField, TorusGrid,
};

/// Densities at or below this floor make the Fisher information infinite.
pub const FISHER_FLOOR: f64 = 1e-13;

/// `dx * sum rho log rho` with `0 log 0 = 0`.
pub fn entropy(rho: &GridDensity) -> f64 {
    let s: f64 = rho
        .values()
        .iter()
        .map(|&r| if r > 0.0 { r * r.ln() } else { 0.0 })
        .sum();
    rho.grid().dx() * s
}

/// `dx * sum |D log rho|^2`, infinite when `min rho <= FISHER_FLOOR`.
pub fn fisher(rho: &GridDensity) -> Extended {
    if rho.min() <= FISHER_FLOOR {
        return Extended::Infinite;
    }
    let d = derivative_values(&rho.log_values());
    Extended::Finite(rho.grid().inner(&d, &d))
}

fn require_positive(rho: &GridDensity) -> Result<()> {
    if rho.min() <= 0.0 {
        return Err(Error::InvalidDensity(format!(
            "strictly positive density required, min {:e}",
            rho.min()
        )));
    }
    Ok(())
}

fn require_grid(expected: TorusGrid, got: TorusGrid) -> Result<()> {
    if expected != got {
        return Err(Error::GridMismatch {
            expected: expected.m(),
            got: got.m(),
        });
    }
    Ok(())
}

/// `1/2 D^2 log rho`.
pub fn half_log_laplacian(rho: &GridDensity) -> Result<Vec<f64>> {
    require_positive(rho)?;
    Ok(second_derivative_values(&rho.log_values())
        .into_iter()
        .map(|v| 0.5 * v)
        .collect())
}

/// `H(rho, phi) = <phi, 1/2 D^2 log rho> + 1/2 \int |D phi|^2`.
pub fn hamiltonian_h(rho: &GridDensity, phi: &GridField) -> Result<f64> {
    require_grid(rho.grid(), phi.grid())?;
    let phi = phi.mean_free();
    let g = rho.grid();
    let drift = half_log_laplacian(rho)?;
    let dphi = derivative_values(phi.values());
    Ok(g.inner(phi.values(), &drift) + 0.5 * g.inner(&dphi, &dphi))
}

/// `L(rho, rho_dot) = 1/2 || rho_dot - 1/2 D^2 log rho ||_{-1}^2`; infinite
/// unless `rho_dot` has mean zero.
pub fn lagrangian_l(rho: &GridDensity, rho_dot: &GridField) -> Result<Extended> {
    require_grid(rho.grid(), rho_dot.grid())?;
    if rho_dot.mean().abs() > crate::torus::MEAN_ZERO_TOL {
        return Ok(Extended::Infinite);
    }
    let drift = half_log_laplacian(rho)?;
    let r: Vec<f64> = rho_dot
        .values()
        .iter()
        .zip(&drift)
        .map(|(a, b)| a - b)
        .collect();
    Ok(Extended::Finite(0.5 * h_minus1_sq_values(&r)))
}

/// Values of the two comparison Hamiltonians and the terms they are built from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HamiltonianReport {
    pub h0_value: Extended,
    pub h1_value: Extended,
    pub gap: f64,
    pub entropy_rho: f64,
    pub entropy_gamma: f64,
    pub metric_sq: f64,
    pub fisher_rho: Option<f64>,
    pub fisher_gamma: Option<f64>,
    /// Weighted combination that must be `<= 0` for the extended operators.
    pub combination: Option<f64>,
}

/// `H_0 f_0 (rho)` and `H_1 f_1 (gamma)` for `f_0 = k/2 d^2(., gamma)` and
/// `f_1 = -k/2 d^2(rho, .)`; both read `k/2 (S(gamma) - S(rho)) + k^2/2 d^2`.
pub fn apply_h0_h1(k: f64, rho: &GridDensity, gamma: &GridDensity) -> Result<HamiltonianReport> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(Error::InvalidParameter(format!("k must be nonnegative, got {k}")));
    }
    require_grid(rho.grid(), gamma.grid())?;
    let s_rho = entropy(rho);
    let s_gamma = entropy(gamma);
    let d2 = h_minus1_distance_sq(rho, gamma)?;
    let h0 = 0.5 * k * (s_gamma - s_rho) + 0.5 * k * k * d2;
    let h1 = 0.5 * k * (s_gamma - s_rho) + 0.5 * k * k * d2;
    Ok(HamiltonianReport {
        h0_value: Extended::Finite(h0),
        h1_value: Extended::Finite(h1),
        gap: h0 - h1,
        entropy_rho: s_rho,
        entropy_gamma: s_gamma,
        metric_sq: d2,
        fisher_rho: None,
        fisher_gamma: None,
        combination: None,
    })
}

/// Extended operators on `f_0 = (1-delta) d^2/(2 eps_c) + delta S(rho)/2` and
/// `f_1 = -(1+delta) d^2/(2 eps_c) - delta S(gamma)/2`:
///
/// `H0bar f_0(rho) = (1-delta)[(S(gamma)-S(rho))/(2 eps_c) + d^2/(2 eps_c^2)] - delta/8 I(rho)`,
/// `H1bar f_1(gamma) = (1+delta)[(S(gamma)-S(rho))/(2 eps_c) + d^2/(2 eps_c^2)] + delta/8 I(gamma)`.
pub fn barh_apply(
    delta: f64,
    eps_c: f64,
    rho: &GridDensity,
    gamma: &GridDensity,
) -> Result<HamiltonianReport> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidParameter(format!("delta must lie in [0, 1), got {delta}")));
    }
    if !(eps_c > 0.0 && eps_c < 1.0) {
        return Err(Error::InvalidParameter(format!("eps_c must lie in (0, 1), got {eps_c}")));
    }
    require_grid(rho.grid(), gamma.grid())?;
    require_positive(rho)?;
    require_positive(gamma)?;
    let s_rho = entropy(rho);
    let s_gamma = entropy(gamma);
    let d2 = h_minus1_distance_sq(rho, gamma)?;
    let i_rho = fisher(rho).to_f64();
    let i_gamma = fisher(gamma).to_f64();
    let core = (s_gamma - s_rho) / (2.0 * eps_c) + d2 / (2.0 * eps_c * eps_c);
    let h0 = (1.0 - delta) * core - delta / 8.0 * i_rho;
    let h1 = (1.0 + delta) * core + delta / 8.0 * i_gamma;
    let combination = h0 / (1.0 - delta) - h1 / (1.0 + delta)
        + delta / 8.0 * (i_rho / (1.0 - delta) + i_gamma / (1.0 + delta));
    Ok(HamiltonianReport {
        h0_value: Extended::Finite(h0),
        h1_value: Extended::Finite(h1),
        gap: h0 - h1,
        entropy_rho: s_rho,
        entropy_gamma: s_gamma,
        metric_sq: d2,
        fisher_rho: Some(i_rho),
        fisher_gamma: Some(i_gamma),
        combination: Some(combination),
    })
}

/// Inputs for [`variational_sup_check`]. `modes` is the number of Fourier
/// frequencies in the truncated test class.
#[derive(Clone, Copy, Debug)]
pub enum VariationalCheck<'a> {
    /// `sup_eta <g, 1/2 D^2 log rho + D eta> - 1/2 \int eta^2` over
    /// `eta = c_0 + sum_{k<=modes} (a_k cos + b_k sin)`.
    Nisio {
        rho: &'a GridDensity,
        g: &'a GridField,
        modes: usize,
    },
    /// `sup_phi <rho_dot, phi> - H(rho, phi)` against `L(rho, rho_dot)`.
    Legendre {
        rho: &'a GridDensity,
        rho_dot: &'a GridField,
        modes: usize,
    },
    /// `sup_xi 2 <D xi, log rho> - \int xi^2` against `I(rho)`.
    Fisher { rho: &'a GridDensity, modes: usize },
    /// `\int gamma log rho <= S(gamma)`.
    Jensen {
        gamma: &'a GridDensity,
        rho: &'a GridDensity,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariationalReport {
    /// Brute-force value over the truncated class (or the left side for Jensen).
    pub sup_value: f64,
    /// Closed form (or the right side for Jensen).
    pub closed_form: f64,
    pub gap: f64,
    /// Maximizer of the truncated problem, when there is one.
    pub argmax: Option<GridField>,
    pub holds: bool,
}

/// Tolerance on the closed-form agreement of the sup checks.
pub const SUP_TOL: f64 = 1e-6;

fn trig_basis(grid: TorusGrid, modes: usize, with_constant: bool) -> Vec<Vec<f64>> {
    let mut basis = Vec::new();
    if with_constant {
        basis.push(vec![1.0; grid.m()]);
    }
    for k in 1..=modes {
        let w = 2.0 * PI * k as f64;
        basis.push(grid.nodes().iter().map(|x| (w * x).cos()).collect());
        basis.push(grid.nodes().iter().map(|x| (w * x).sin()).collect());
    }
    basis
}

/// Maximizes `l . a - 1/2 a^T Q a`; returns the value and the maximizer.
fn quadratic_sup(l: &[f64], q: &[f64]) -> Result<(f64, Vec<f64>)> {
    let a = dense_solve(q.to_vec(), l.to_vec())?;
    let v = 0.5 * l.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>();
    Ok((v, a))
}

fn gram(grid: TorusGrid, basis: &[Vec<f64>]) -> Vec<f64> {
    let n = basis.len();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            q[i * n + j] = grid.inner(&basis[i], &basis[j]);
        }
    }
    q
}

fn check_modes(grid: TorusGrid, modes: usize) -> Result<()> {
    if modes == 0 || 2 * modes >= grid.m() {
        return Err(Error::InvalidParameter(format!(
            "mode count {modes} must lie in 1..{}",
            grid.m() / 2
        )));
    }
    Ok(())
}

pub fn variational_sup_check(check: VariationalCheck<'_>) -> Result<VariationalReport> {
    match check {
        VariationalCheck::Nisio { rho, g, modes } => {
            require_grid(rho.grid(), g.grid())?;
            let grid = rho.grid();
            check_modes(grid, modes)?;
            let g = g.mean_free();
            let drift = half_log_laplacian(rho)?;
            let c0 = grid.inner(g.values(), &drift);
            let basis = trig_basis(grid, modes, true);
            let l: Vec<f64> = basis
                .iter()
                .map(|b| grid.inner(g.values(), &derivative_values(b)))
                .collect();
            let (v, a) = quadratic_sup(&l, &gram(grid, &basis))?;
            let mut eta = vec![0.0; grid.m()];
            for (coef, b) in a.iter().zip(&basis) {
                for (e, bi) in eta.iter_mut().zip(b) {
                    *e += coef * bi;
                }
            }
            let dg = derivative_values(g.values());
            let closed = c0 + 0.5 * grid.inner(&dg, &dg);
            let sup = c0 + v;
            Ok(VariationalReport {
                sup_value: sup,
                closed_form: closed,
                gap: (sup - closed).abs(),
                argmax: Some(GridField::new(grid, eta)?),
                holds: (sup - closed).abs() <= SUP_TOL,
            })
        }
        VariationalCheck::Legendre { rho, rho_dot, modes } => {
            require_grid(rho.grid(), rho_dot.grid())?;
            let grid = rho.grid();
            check_modes(grid, modes)?;
            let drift = half_log_laplacian(rho)?;
            let basis = trig_basis(grid, modes, false);
            // <rho_dot, phi> - H(rho, phi) = <rho_dot - drift, phi> - 1/2 |D phi|^2
            let resid: Vec<f64> = rho_dot.values().iter().zip(&drift).map(|(a, b)| a - b).collect();
            let l: Vec<f64> = basis.iter().map(|b| grid.inner(&resid, b)).collect();
            let dbasis: Vec<Vec<f64>> = basis.iter().map(|b| derivative_values(b)).collect();
            let (v, a) = quadratic_sup(&l, &gram(grid, &dbasis))?;
            let mut phi = vec![0.0; grid.m()];
            for (coef, b) in a.iter().zip(&basis) {
                for (e, bi) in phi.iter_mut().zip(b) {
                    *e += coef * bi;
                }
            }
            let closed = lagrangian_l(rho, rho_dot)?.to_f64();
            Ok(VariationalReport {
                sup_value: v,
                closed_form: closed,
                gap: (v - closed).abs(),
                argmax: Some(GridField::new(grid, phi)?),
                holds: (v - closed).abs() <= SUP_TOL,
            })
        }
        VariationalCheck::Fisher { rho, modes } => {
            let grid = rho.grid();
            check_modes(grid, modes)?;
            require_positive(rho)?;
            let logr = rho.log_values();
            let basis = trig_basis(grid, modes, false);
            // 2 <D xi, log rho> - \int xi^2 = l.a - 1/2 a^T (2G) a
            let l: Vec<f64> = basis
                .iter()
                .map(|b| 2.0 * grid.inner(&derivative_values(b), &logr))
                .collect();
            let q: Vec<f64> = gram(grid, &basis).into_iter().map(|v| 2.0 * v).collect();
            let (v, a) = quadratic_sup(&l, &q)?;
            let mut xi = vec![0.0; grid.m()];
            for (coef, b) in a.iter().zip(&basis) {
                for (e, bi) in xi.iter_mut().zip(b) {
                    *e += coef * bi;
                }
            }
            let closed = fisher(rho).to_f64();
            Ok(VariationalReport {
                sup_value: v,
                closed_form: closed,
                gap: (v - closed).abs(),
                argmax: Some(GridField::new(grid, xi)?),
                holds: (v - closed).abs() <= SUP_TOL,
            })
        }
        VariationalCheck::Jensen { gamma, rho } => {
            require_grid(rho.grid(), gamma.grid())?;
            require_positive(rho)?;
            let lhs = rho.grid().inner(gamma.values(), &rho.log_values());
            let rhs = entropy(gamma);
            Ok(VariationalReport {
                sup_value: lhs,
                closed_form: rhs,
                gap: rhs - lhs,
                argmax: None,
                holds: lhs <= rhs + 1e-10,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::TorusGrid;

    fn grid(m: usize) -> TorusGrid {
        TorusGrid::new(m).unwrap()
    }

    #[test]
    fn entropy_of_uniform_and_two_level() {
        let g = grid(64);
        assert_eq!(entropy(&GridDensity::uniform(g)), 0.0);
        let v: Vec<f64> = (0..64).map(|i| if i < 32 { 2.0 } else { 0.0 }).collect();
        let rho = GridDensity::new(g, v).unwrap();
        assert!((entropy(&rho) - 2f64.ln()).abs() < 1e-15);
        assert!(fisher(&rho).is_infinite());
    }

    #[test]
    fn hamiltonian_of_sine_on_uniform() {
        let g = grid(64);
        let phi = GridField::from_fn(g, |x| (2.0 * PI * x).sin());
        let h = hamiltonian_h(&GridDensity::uniform(g), &phi).unwrap();
        assert!((h - PI * PI).abs() < 1e-10);
        let c = GridField::from_fn(g, |_| 3.5);
        let rho = GridDensity::from_fn(g, |x| 1.0 + 0.3 * (2.0 * PI * x).cos()).unwrap();
        assert!(hamiltonian_h(&rho, &c).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_rejects_zero_cell() {
        let g = grid(8);
        let mut v = vec![8.0 / 7.0; 8];
        v[3] = 0.0;
        let rho = GridDensity::new(g, v).unwrap();
        assert!(hamiltonian_h(&rho, &GridField::zeros(g)).is_err());
    }

    #[test]
    fn lagrangian_vanishes_on_free_flow() {
        let g = grid(64);
        let rho = GridDensity::from_fn(g, |x| 1.0 + 0.4 * (2.0 * PI * x).sin()).unwrap();
        let drift = GridField::new(g, half_log_laplacian(&rho).unwrap()).unwrap();
        assert!(lagrangian_l(&rho, &drift).unwrap().to_f64() < 1e-26);
        let bad = GridField::from_fn(g, |_| 1e-3);
        assert!(lagrangian_l(&rho, &bad).unwrap().is_infinite());
    }

    #[test]
    fn h0_h1_trivial_cases() {
        let g = grid(32);
        let rho = GridDensity::from_fn(g, |x| 1.0 + 0.2 * (2.0 * PI * x).cos()).unwrap();
        let r = apply_h0_h1(1.3, &rho, &rho).unwrap();
        assert_eq!(r.h0_value, Extended::Finite(0.0));
        let r = apply_h0_h1(0.0, &rho, &GridDensity::uniform(g)).unwrap();
        assert_eq!(r.h0_value, Extended::Finite(0.0));
        assert_eq!(r.gap, 0.0);
    }

    #[test]
    fn barh_rejects_delta_one() {
        let g = grid(16);
        let u = GridDensity::uniform(g);
        assert!(barh_apply(1.0, 0.1, &u, &u).is_err());
        assert!(barh_apply(0.5, 1.0, &u, &u).is_err());
    }

    #[test]
    fn nisio_constant_g() {
        let g = grid(32);
        let rho = GridDensity::from_fn(g, |x| 1.0 + 0.2 * (2.0 * PI * x).cos()).unwrap();
        let c = GridField::from_fn(g, |_| 2.0);
        let r = variational_sup_check(VariationalCheck::Nisio { rho: &rho, g: &c, modes: 8 }).unwrap();
        assert!(r.sup_value.abs() < 1e-12);
        assert!(r.argmax.unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn jensen_equality_case() {
        let g = grid(32);
        let rho = GridDensity::from_fn(g, |x| 1.0 + 0.2 * (2.0 * PI * x).cos()).unwrap();
        let r = variational_sup_check(VariationalCheck::Jensen { gamma: &rho, rho: &rho }).unwrap();
        assert!(r.gap.abs() < 1e-15 && r.holds);
    }
}
