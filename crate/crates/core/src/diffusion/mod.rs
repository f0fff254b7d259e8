//! Implicit finite-volume solver for the regularized controlled diffusion
//! `rho_t = (Phi_eps(rho))_xx + eta_x`, monitors for its a priori estimates,
//! and the two-velocity mean-field kinetic system.

mod carleman;
mod diagnostics;

pub use carleman::{
    carleman_meanfield_solve, diffusive_limit_sweep, well_prepared_split, CarlemanConfig,
    LimitRow, TransportScheme,
};
pub use diagnostics::{
    contraction_test, diagnostics, tol_disc, ContractionReport, DiagnosticsSeries, Margins,
    SnapshotDiagnostics,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::functionals::RegularizedPotential;
use crate::linalg::CyclicTridiag;
use crate::torus::{h_minus1_distance, mollify, mollify_field, GridDensity, GridField, TorusGrid};

/// Largest number of successive halvings of a failing step.
pub const MAX_HALVINGS: u32 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub eps_reg: f64,
    pub dt: f64,
    pub newton_tol: f64,
    pub newton_max: usize,
    pub record_every: usize,
}

impl SolverConfig {
    pub fn new(eps_reg: f64, dt: f64) -> Self {
        Self {
            eps_reg,
            dt,
            newton_tol: 1e-10,
            newton_max: 50,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.eps_reg > 0.0 && self.eps_reg < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "eps_reg must lie in (0, 0.5), got {}",
                self.eps_reg
            )));
        }
        if !(self.newton_tol > 0.0) || self.newton_max == 0 || self.record_every == 0 {
            return Err(Error::InvalidParameter(
                "newton_tol, newton_max and record_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Control `eta(t, x)`, piecewise constant on time blocks of length `block_dt`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SpaceTimeControl {
    grid: TorusGrid,
    block_dt: f64,
    blocks: Vec<Vec<f64>>,
}

impl SpaceTimeControl {
    pub fn new(grid: TorusGrid, block_dt: f64, blocks: Vec<Vec<f64>>) -> Result<Self> {
        if !(block_dt > 0.0 && block_dt.is_finite()) || blocks.is_empty() {
            return Err(Error::InvalidParameter(
                "control needs a positive block length and at least one block".into(),
            ));
        }
        for b in &blocks {
            if b.len() != grid.m() {
                return Err(Error::GridMismatch {
                    expected: grid.m(),
                    got: b.len(),
                });
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite control value".into()));
            }
        }
        Ok(Self {
            grid,
            block_dt,
            blocks,
        })
    }

    pub fn zeros(grid: TorusGrid, n_blocks: usize, block_dt: f64) -> Result<Self> {
        Self::new(grid, block_dt, vec![vec![0.0; grid.m()]; n_blocks.max(1)])
    }

    /// Samples `f(t_mid, x)` at block midpoints and nodes.
    pub fn from_fn(
        grid: TorusGrid,
        n_blocks: usize,
        block_dt: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|b| {
                let t = (b as f64 + 0.5) * block_dt;
                grid.nodes().into_iter().map(|x| f(t, x)).collect()
            })
            .collect();
        Self::new(grid, block_dt, blocks)
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn block_dt(&self) -> f64 {
        self.block_dt
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.blocks
    }

    pub fn horizon(&self) -> f64 {
        self.block_dt * self.blocks.len() as f64
    }

    pub fn block_index(&self, t: f64) -> usize {
        let b = (t / self.block_dt).floor();
        if b <= 0.0 {
            0
        } else {
            (b as usize).min(self.blocks.len() - 1)
        }
    }

    pub fn at(&self, t: f64) -> &[f64] {
        &self.blocks[self.block_index(t)]
    }

    /// `1/2 \int\int eta^2`.
    pub fn cost(&self) -> f64 {
        0.5 * self.block_dt
            * self
                .blocks
                .iter()
                .map(|b| self.grid.inner(b, b))
                .sum::<f64>()
    }

    pub fn mollified(&self, eps: f64) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                mollify_field(&GridField::new(self.grid, b.clone())?, eps).map(GridField::into_values)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.grid, self.block_dt, blocks)
    }

    /// Flat copy of all block values.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks.concat()
    }

    pub fn from_flat(grid: TorusGrid, block_dt: f64, flat: &[f64]) -> Result<Self> {
        let m = grid.m();
        if flat.is_empty() || flat.len() % m != 0 {
            return Err(Error::InvalidParameter("flat control length".into()));
        }
        Self::new(grid, block_dt, flat.chunks(m).map(|c| c.to_vec()).collect())
    }
}

/// Counters accumulated over a solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SolveStats {
    pub steps: usize,
    pub newton_iterations: usize,
    pub halvings: usize,
    /// Largest per-step change of `dx * sum rho`.
    pub max_mass_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<GridDensity>,
    pub fluxes: Option<Vec<GridField>>,
    pub stats: SolveStats,
}

impl Trajectory {
    pub fn last(&self) -> &GridDensity {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn grid(&self) -> TorusGrid {
        self.states[0].grid()
    }
}

/// Centered control divergence `(eta_{i+1} - eta_{i-1}) / (2 dx)`.
pub fn control_divergence(eta: &[f64], dx: f64) -> Vec<f64> {
    let m = eta.len();
    (0..m)
        .map(|i| (eta[(i + 1) % m] - eta[(i + m - 1) % m]) / (2.0 * dx))
        .collect()
}

/// Periodic three-point Laplacian in flux form.
pub(crate) fn fd_laplacian(u: &[f64], dx: f64) -> Vec<f64> {
    let m = u.len();
    let h2 = dx * dx;
    (0..m)
        .map(|i| ((u[(i + 1) % m] - u[i]) - (u[i] - u[(i + m - 1) % m])) / h2)
        .collect()
}

fn residual(x: &[f64], rhs: &[f64], dt: f64, dx: f64, pot: &RegularizedPotential) -> Vec<f64> {
    let phi: Vec<f64> = x.iter().map(|&r| pot.phi(r)).collect();
    let lap = fd_laplacian(&phi, dx);
    x.iter()
        .zip(rhs)
        .zip(&lap)
        .map(|((xi, bi), li)| xi - dt * li - bi)
        .collect()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Jacobian `I - dt L_h diag(Phi'(x))` of the implicit step.
pub(crate) fn step_jacobian(x: &[f64], dt: f64, dx: f64, pot: &RegularizedPotential) -> CyclicTridiag {
    let m = x.len();
    let c = dt / (dx * dx);
    let dphi: Vec<f64> = x.iter().map(|&r| pot.dphi(r)).collect();
    CyclicTridiag {
        lower: (0..m).map(|i| -c * dphi[(i + m - 1) % m]).collect(),
        diag: (0..m).map(|i| 1.0 + 2.0 * c * dphi[i]).collect(),
        upper: (0..m).map(|i| -c * dphi[(i + 1) % m]).collect(),
    }
}

/// Solves `x - dt L_h Phi(x) = rho_n + dt D_h eta` by damped Newton started
/// at `rho_n`. Returns the raw state and the iteration count.
pub(crate) fn newton_step(
    rho_n: &[f64],
    eta: &[f64],
    dt: f64,
    dx: f64,
    pot: &RegularizedPotential,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let div = control_divergence(eta, dx);
    let rhs: Vec<f64> = rho_n.iter().zip(&div).map(|(r, d)| r + dt * d).collect();
    let mut x = rho_n.to_vec();
    let mut f = residual(&x, &rhs, dt, dx, pot);
    let mut fnorm = sup_norm(&f);
    let mut polished = false;
    for it in 0..max_iter {
        if fnorm < tol {
            if polished {
                return Ok((x, it));
            }
            polished = true;
        }
        let jac = step_jacobian(&x, dt, dx, pot);
        let neg_f: Vec<f64> = f.iter().map(|v| -v).collect();
        let delta = jac.solve(&neg_f)?;
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
            let ft = residual(&trial, &rhs, dt, dx, pot);
            let nt = sup_norm(&ft);
            let accept = nt <= (1.0 - 1e-4 * lambda) * fnorm || nt < tol || lambda < 1.0 / 1024.0;
            if accept && nt.is_finite() {
                x = trial;
                f = ft;
                fnorm = nt;
                break;
            }
            if lambda < 1.0 / 1024.0 {
                return Err(Error::NonConvergence("non-finite Newton residual".into()));
            }
            lambda *= 0.5;
        }
    }
    if fnorm < tol {
        return Ok((x, max_iter));
    }
    Err(Error::NonConvergence(format!(
        "Newton residual {fnorm:e} after {max_iter} iterations"
    )))
}

/// Advances raw state by `dt`, halving on Newton failure up to `MAX_HALVINGS` times.
fn advance(
    state: &[f64],
    eta: &[f64],
    dt: f64,
    dx: f64,
    pot: &RegularizedPotential,
    cfg: &SolverConfig,
    level: u32,
    stats: &mut SolveStats,
) -> Result<Vec<f64>> {
    match newton_step(state, eta, dt, dx, pot, cfg.newton_tol, cfg.newton_max) {
        Ok((x, it)) => {
            stats.newton_iterations += it;
            Ok(x)
        }
        Err(e) => {
            if level >= MAX_HALVINGS {
                return Err(e);
            }
            stats.halvings += 1;
            let mid = advance(state, eta, 0.5 * dt, dx, pot, cfg, level + 1, stats)?;
            advance(&mid, eta, 0.5 * dt, dx, pot, cfg, level + 1, stats)
        }
    }
}

fn to_density(grid: TorusGrid, x: Vec<f64>) -> Result<GridDensity> {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        return Err(Error::NegativeState { min });
    }
    GridDensity::new(grid, x)
}

/// One implicit Euler step with control `eta` frozen over the step.
pub fn step_regularized(rho: &GridDensity, eta: &GridField, cfg: &SolverConfig) -> Result<GridDensity> {
    cfg.validate()?;
    if rho.grid() != eta.grid() {
        return Err(Error::GridMismatch {
            expected: rho.grid().m(),
            got: eta.grid().m(),
        });
    }
    let pot = RegularizedPotential::new(cfg.eps_reg)?;
    let mut stats = SolveStats::default();
    let x = advance(rho.values(), eta.values(), cfg.dt, rho.grid().dx(), &pot, cfg, 0, &mut stats)?;
    to_density(rho.grid(), x)
}

pub(crate) fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    let n = (horizon / dt).round();
    if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} is not a positive multiple of dt {dt}"
        )));
    }
    Ok(n as usize)
}

/// Time-stepped solve on `[0, horizon]`; step `n` uses the control block
/// containing `(n + 1/2) dt`.
pub fn solve_controlled(
    rho0: &GridDensity,
    eta: &SpaceTimeControl,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if rho0.grid() != eta.grid() {
        return Err(Error::GridMismatch {
            expected: rho0.grid().m(),
            got: eta.grid().m(),
        });
    }
    let grid = rho0.grid();
    let dx = grid.dx();
    let n = step_count(horizon, cfg.dt)?;
    let pot = RegularizedPotential::new(cfg.eps_reg)?;
    let mut stats = SolveStats::default();
    let mut times = vec![0.0];
    let mut states = vec![rho0.clone()];
    let mut x = rho0.values().to_vec();
    let mut mass = grid.integrate(&x);
    for step in 0..n {
        let t_mid = (step as f64 + 0.5) * cfg.dt;
        x = advance(&x, eta.at(t_mid), cfg.dt, dx, &pot, cfg, 0, &mut stats)?;
        let new_mass = grid.integrate(&x);
        stats.max_mass_change = stats.max_mass_change.max((new_mass - mass).abs());
        mass = new_mass;
        stats.steps += 1;
        if (step + 1) % cfg.record_every == 0 || step + 1 == n {
            times.push((step + 1) as f64 * cfg.dt);
            states.push(to_density(grid, x.clone())?);
        }
    }
    Ok(Trajectory {
        times,
        states,
        fluxes: None,
        stats,
    })
}

/// Solves along a sequence of regularization parameters and reports
/// `sup_t || rho_{eps_i}(t) - rho_{eps_{i+1}}(t) ||_{-1}`.
#[derive(Clone, Debug, Serialize)]
pub struct EpsSequenceReport {
    pub eps: Vec<f64>,
    pub increments: Vec<f64>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

/// With `mollify_data`, initial data and control are smoothed at width `eps`
/// before each solve, as in the regularized problem.
pub fn solve_eps_sequence(
    rho0: &GridDensity,
    eta: &SpaceTimeControl,
    horizon: f64,
    cfg: &SolverConfig,
    eps_list: &[f64],
    mollify_data: bool,
) -> Result<EpsSequenceReport> {
    if eps_list.len() < 2 {
        return Err(Error::InvalidParameter("need at least two eps values".into()));
    }
    let trajectories = eps_list
        .iter()
        .map(|&e| {
            let c = SolverConfig {
                eps_reg: e,
                ..cfg.clone()
            };
            if mollify_data {
                solve_controlled(&mollify(rho0, e)?, &eta.mollified(e)?, horizon, &c)
            } else {
                solve_controlled(rho0, eta, horizon, &c)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut increments = Vec::new();
    for w in trajectories.windows(2) {
        let mut sup: f64 = 0.0;
        for (a, b) in w[0].states.iter().zip(&w[1].states) {
            sup = sup.max(h_minus1_distance(a, b)?);
        }
        increments.push(sup);
    }
    Ok(EpsSequenceReport {
        eps: eps_list.to_vec(),
        increments,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn uniform_is_fixed_point() {
        let g = TorusGrid::new(32).unwrap();
        let rho = GridDensity::uniform(g);
        let out = step_regularized(&rho, &GridField::zeros(g), &SolverConfig::new(0.1, 1e-3)).unwrap();
        for v in out.values() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn step_conserves_mass_with_control() {
        let g = TorusGrid::new(64).unwrap();
        let rho = GridDensity::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).sin()).unwrap();
        let eta = GridField::from_fn(g, |x| 0.3 * (4.0 * PI * x).cos() + 0.1);
        let out = step_regularized(&rho, &eta, &SolverConfig::new(0.05, 1e-3)).unwrap();
        assert!((out.mass() - rho.mass()).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_config_and_horizon() {
        let g = TorusGrid::new(16).unwrap();
        let rho = GridDensity::uniform(g);
        let eta = SpaceTimeControl::zeros(g, 1, 0.1).unwrap();
        assert!(solve_controlled(&rho, &eta, 0.1, &SolverConfig::new(0.6, 0.01)).is_err());
        assert!(solve_controlled(&rho, &eta, 0.1, &SolverConfig::new(0.1, -0.01)).is_err());
        assert!(solve_controlled(&rho, &eta, 0.105, &SolverConfig::new(0.1, 0.01)).is_err());
    }

    #[test]
    fn control_block_lookup() {
        let g = TorusGrid::new(8).unwrap();
        let c = SpaceTimeControl::from_fn(g, 4, 0.25, |t, _| t).unwrap();
        assert_eq!(c.block_index(0.1), 0);
        assert_eq!(c.block_index(0.3), 1);
        assert_eq!(c.block_index(5.0), 3);
        assert!((c.at(0.6)[0] - 0.625).abs() < 1e-15);
    }
}
