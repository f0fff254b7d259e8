//! Two-velocity mean-field kinetic system in diffusive scaling,
//!
//! `w1_t + c w1_x = k (w2^2 - w1^2)`, `w2_t - c w2_x = k (w1^2 - w2^2)`,
//! with `c = 1/eps`, `k = 1/eps^2`, `rho = w1 + w2`, `j = (w1 - w2)/eps`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::Serialize;

use super::{solve_controlled, step_count, SolveStats, SolverConfig, SpaceTimeControl, Trajectory};
use crate::error::{Error, Result};
use crate::torus::{apply_multiplier, derivative_values, h_minus1_distance, GridDensity, GridField, TorusGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportScheme {
    /// Exact Fourier phase shift; no stability restriction.
    Spectral,
    /// First-order upwind; requires `c dt / dx <= 1`.
    Upwind,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct CarlemanConfig {
    pub dt: f64,
    pub record_every: usize,
    pub scheme: TransportScheme,
}

fn shift(values: &[f64], dist: f64) -> Vec<f64> {
    apply_multiplier(values, |k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 * dist))
}

fn upwind(values: &[f64], nu: f64, rightward: bool) -> Vec<f64> {
    let m = values.len();
    (0..m)
        .map(|i| {
            let up = if rightward { values[(i + m - 1) % m] } else { values[(i + 1) % m] };
            values[i] - nu * (values[i] - up)
        })
        .collect()
}

/// Splits `(rho, j)` into `w = (rho +- eps j)/2`, failing on negative parts.
pub fn well_prepared_split(rho: &GridDensity, j: &GridField, eps: f64) -> Result<(GridField, GridField)> {
    let g = rho.grid();
    let w1: Vec<f64> = rho.values().iter().zip(j.values()).map(|(r, jj)| 0.5 * (r + eps * jj)).collect();
    let w2: Vec<f64> = rho.values().iter().zip(j.values()).map(|(r, jj)| 0.5 * (r - eps * jj)).collect();
    if w1.iter().chain(&w2).any(|v| *v < 0.0) {
        return Err(Error::InvalidDensity(format!(
            "negative velocity component for eps = {eps}"
        )));
    }
    Ok((GridField::new(g, w1)?, GridField::new(g, w2)?))
}

pub fn carleman_meanfield_solve(
    w1_0: &GridField,
    w2_0: &GridField,
    eps: f64,
    horizon: f64,
    cfg: &CarlemanConfig,
) -> Result<Trajectory> {
    let grid = w1_0.grid();
    if w2_0.grid() != grid {
        return Err(Error::GridMismatch {
            expected: grid.m(),
            got: w2_0.grid().m(),
        });
    }
    if !(eps > 0.0 && eps.is_finite()) || !(cfg.dt > 0.0) || cfg.record_every == 0 {
        return Err(Error::InvalidParameter("eps, dt and record_every must be positive".into()));
    }
    if w1_0.values().iter().chain(w2_0.values()).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidDensity("negative kinetic component".into()));
    }
    let c = 1.0 / eps;
    let k = 1.0 / (eps * eps);
    let dx = grid.dx();
    if cfg.scheme == TransportScheme::Upwind && c * 0.5 * cfg.dt / dx > 1.0 {
        return Err(Error::Cfl(format!(
            "c dt / (2 dx) = {} exceeds 1",
            c * 0.5 * cfg.dt / dx
        )));
    }
    let n = step_count(horizon, cfg.dt)?;
    let mut w1 = w1_0.values().to_vec();
    let mut w2 = w2_0.values().to_vec();
    let record = |w1: &[f64], w2: &[f64]| -> Result<(GridDensity, GridField)> {
        let rho: Vec<f64> = w1.iter().zip(w2).map(|(a, b)| a + b).collect();
        let j: Vec<f64> = w1.iter().zip(w2).map(|(a, b)| (a - b) / eps).collect();
        Ok((GridDensity::new(grid, rho)?, GridField::new(grid, j)?))
    };
    let (r0, j0) = record(&w1, &w2)?;
    let mut times = vec![0.0];
    let mut states = vec![r0];
    let mut fluxes = vec![j0];
    let half = 0.5 * cfg.dt;
    let transport = |w1: &mut Vec<f64>, w2: &mut Vec<f64>| match cfg.scheme {
        TransportScheme::Spectral => {
            *w1 = shift(w1, c * half);
            *w2 = shift(w2, -c * half);
        }
        TransportScheme::Upwind => {
            let nu = c * half / dx;
            *w1 = upwind(w1, nu, true);
            *w2 = upwind(w2, nu, false);
        }
    };
    for step in 0..n {
        transport(&mut w1, &mut w2);
        for (a, b) in w1.iter_mut().zip(w2.iter_mut()) {
            let s = *a + *b;
            let d = (*a - *b) * (-2.0 * k * s * cfg.dt).exp();
            *a = 0.5 * (s + d);
            *b = 0.5 * (s - d);
        }
        transport(&mut w1, &mut w2);
        if (step + 1) % cfg.record_every == 0 || step + 1 == n {
            // spectral shifts may leave round-off negatives near zero
            let clip = |w: &mut Vec<f64>| w.iter_mut().for_each(|v| if *v < 0.0 && *v > -1e-13 { *v = 0.0 });
            clip(&mut w1);
            clip(&mut w2);
            let (r, j) = record(&w1, &w2)?;
            times.push((step + 1) as f64 * cfg.dt);
            states.push(r);
            fluxes.push(j);
        }
    }
    Ok(Trajectory {
        times,
        states,
        fluxes: Some(fluxes),
        stats: SolveStats {
            steps: n,
            ..SolveStats::default()
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitRow {
    pub eps: f64,
    /// `|| rho_eps(T) - rho_diff(T) ||_{-1}`.
    pub error: f64,
    /// `sup |2 rho j + D rho|` at `T`.
    pub closure_residual: f64,
}

/// Mean-field solutions with well-prepared data `j_0 = -D rho_0 / (2 rho_0)`
/// compared with the uncontrolled diffusion at time `horizon`.
pub fn diffusive_limit_sweep(
    rho0: &GridDensity,
    eps_list: &[f64],
    horizon: f64,
    reference_cfg: &SolverConfig,
    steps_per_eps2: f64,
) -> Result<Vec<LimitRow>> {
    let grid: TorusGrid = rho0.grid();
    if rho0.min() <= 0.0 {
        return Err(Error::InvalidDensity("positive initial density required".into()));
    }
    let zero = SpaceTimeControl::zeros(grid, 1, horizon)?;
    let cfg_ref = SolverConfig {
        record_every: usize::MAX / 2,
        ..reference_cfg.clone()
    };
    let reference = solve_controlled(rho0, &zero, horizon, &cfg_ref)?;
    let rho_ref = reference.last();
    let drho = derivative_values(rho0.values());
    let j0 = GridField::new(
        grid,
        drho.iter().zip(rho0.values()).map(|(d, r)| -d / (2.0 * r)).collect(),
    )?;
    let mut rows = Vec::new();
    for &eps in eps_list {
        let (w1, w2) = well_prepared_split(rho0, &j0, eps)?;
        let target = eps * eps / steps_per_eps2;
        let n = (horizon / target).ceil().max(1.0);
        let cfg = CarlemanConfig {
            dt: horizon / n,
            record_every: usize::MAX / 2,
            scheme: TransportScheme::Spectral,
        };
        let traj = carleman_meanfield_solve(&w1, &w2, eps, horizon, &cfg)?;
        let rho_t = traj.last();
        let j_t = traj.fluxes.as_ref().unwrap().last().unwrap();
        let dr = derivative_values(rho_t.values());
        let closure = rho_t
            .values()
            .iter()
            .zip(j_t.values())
            .zip(&dr)
            .map(|((r, j), d)| (2.0 * r * j + d).abs())
            .fold(0.0, f64::max);
        rows.push(LimitRow {
            eps,
            error: h_minus1_distance(rho_t, rho_ref)?,
            closure_residual: closure,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_is_stationary() {
        let g = TorusGrid::new(32).unwrap();
        let half = GridField::from_fn(g, |_| 0.5);
        let cfg = CarlemanConfig {
            dt: 1e-3,
            record_every: 10,
            scheme: TransportScheme::Spectral,
        };
        let tr = carleman_meanfield_solve(&half, &half, 0.1, 0.05, &cfg).unwrap();
        for v in tr.last().values() {
            assert!((v - 1.0).abs() < 1e-13);
        }
        assert!(tr.fluxes.unwrap().last().unwrap().max_abs() < 1e-11);
    }

    #[test]
    fn upwind_cfl_is_enforced() {
        let g = TorusGrid::new(64).unwrap();
        let half = GridField::from_fn(g, |_| 0.5);
        let cfg = CarlemanConfig {
            dt: 0.01,
            record_every: 1,
            scheme: TransportScheme::Upwind,
        };
        assert!(matches!(
            carleman_meanfield_solve(&half, &half, 0.1, 0.1, &cfg),
            Err(Error::Cfl(_))
        ));
    }
}
