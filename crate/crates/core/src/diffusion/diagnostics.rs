//! Discrete monitors of the a priori estimates along a trajectory.
//!
//! Time integrals use the right-endpoint rule on the recorded snapshots, the
//! quadrature that matches implicit Euler. Each cumulative inequality of the
//! form `X(t) + \int_s^t g <= X(s)` is reported through its worst margin over
//! all recorded pairs `s < t`.

use serde::Serialize;

use super::{solve_controlled, SolverConfig, SpaceTimeControl, Trajectory};
use crate::error::{Error, Result};
use crate::functionals::{entropy, fisher, RegularizedPotential};
use crate::torus::{
    derivative_values, h_minus1_distance, h_minus1_sq_values, neg_inv_laplacian_values, GridDensity,
};

/// Discretization tolerance `c (dt + dx^2)`.
pub fn tol_disc(c: f64, dt: f64, dx: f64) -> f64 {
    c * (dt + dx * dx)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnapshotDiagnostics {
    pub t: f64,
    pub mass: f64,
    pub entropy: f64,
    /// `None` when infinite.
    pub fisher: Option<f64>,
    pub min_rho: f64,
    pub dist_gamma0: f64,
    /// `t S(rho(t)) + ||rho(t) - gamma0||_{-1}^2`.
    pub small_t_phi: f64,
    pub cum_disineq: f64,
    pub cum_sifluc: f64,
    pub cum_eeprod: f64,
    pub cum_vazenest: f64,
}

/// Worst margins; a nonnegative value means the inequality held everywhere.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Margins {
    pub disineq: f64,
    pub sifluc: f64,
    pub eeprod: f64,
    pub vazenest: f64,
    /// `phi(t) <= phi(0) + t S(gamma0) + \int (r/2 ||eta||^2 + 2 ||rho - gamma0||_{-1} ||eta||)`.
    pub small_t: f64,
    /// The bound without `t S(gamma0)` and with `||eta||` in place of
    /// `||eta||^2`; implied by `small_t` when `gamma0` is uniform and `||eta|| <= 1`.
    pub small_t_unsquared: f64,
    /// `min_k S(t_k) - S(t_{k+1})`; meaningful for uncontrolled runs.
    pub entropy_monotone: f64,
    /// `|\int I dt - 2 (S(0) - S(T))|`; meaningful for uncontrolled runs.
    pub fisher_balance: f64,
}

impl Margins {
    /// Smallest of the margins that hold for every controlled run.
    pub fn worst(&self) -> f64 {
        self.disineq
            .min(self.sifluc)
            .min(self.eeprod)
            .min(self.vazenest)
            .min(self.small_t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsSeries {
    pub snapshots: Vec<SnapshotDiagnostics>,
    pub margins: Margins,
    pub max_mass_drift: f64,
    pub control_l2_max: f64,
}

/// Worst `Y(s) - Y(t)` over `s < t`.
fn worst_pair_margin(y: &[f64]) -> f64 {
    let mut worst = f64::INFINITY;
    let mut best_prev = f64::INFINITY;
    for (k, &v) in y.iter().enumerate() {
        if k > 0 {
            worst = worst.min(best_prev - v);
        }
        best_prev = best_prev.min(v);
    }
    worst
}

pub fn diagnostics(
    traj: &Trajectory,
    eta: &SpaceTimeControl,
    gamma0: &GridDensity,
    potential: &RegularizedPotential,
) -> Result<DiagnosticsSeries> {
    let grid = traj.grid();
    if eta.grid() != grid || gamma0.grid() != grid {
        return Err(Error::GridMismatch {
            expected: grid.m(),
            got: if eta.grid() != grid { eta.grid().m() } else { gamma0.grid().m() },
        });
    }
    if traj.times.len() != traj.states.len() || traj.times.is_empty() {
        return Err(Error::InvalidParameter("malformed trajectory".into()));
    }
    let horizon = *traj.times.last().unwrap();
    if horizon > eta.horizon() * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "trajectory horizon {horizon} exceeds control horizon {}",
            eta.horizon()
        )));
    }
    let s_gamma = entropy(gamma0);
    let mass0 = traj.states[0].mass();
    let mut snaps: Vec<SnapshotDiagnostics> = Vec::with_capacity(traj.states.len());
    let (mut cd, mut cs, mut ce, mut cv) = (0.0, 0.0, 0.0, 0.0);
    // smallt integral pieces
    let (mut sq_int, mut unsq_int) = (0.0, 0.0);
    let mut small_t = f64::INFINITY;
    let mut small_t_unsq = f64::INFINITY;
    let mut fisher_int = 0.0;
    let mut control_l2_max: f64 = 0.0;
    let mut phi0 = 0.0;
    for (k, (t, rho)) in traj.times.iter().zip(&traj.states).enumerate() {
        let s = entropy(rho);
        let i = fisher(rho).finite();
        let diff = rho.diff(gamma0)?;
        let dist_sq = h_minus1_sq_values(diff.values());
        let dist = dist_sq.sqrt();
        let phi = t * s + dist_sq;
        if k == 0 {
            phi0 = phi;
        } else {
            let dt = t - traj.times[k - 1];
            let eta_now = eta.at(0.5 * (t + traj.times[k - 1]));
            let eta_l2sq = grid.inner(eta_now, eta_now);
            let eta_l2 = eta_l2sq.sqrt();
            control_l2_max = control_l2_max.max(eta_l2);
            let pos = rho.min() > 0.0;
            // D (-D^2)^{-1} (rho - gamma0)
            let flux_dual = derivative_values(&neg_inv_laplacian_values(diff.values()));
            cd += dt * (0.5 * (s - s_gamma) + grid.inner(eta_now, &flux_dual));
            if pos {
                let dlog = derivative_values(&rho.log_values());
                let ii = grid.inner(&dlog, &dlog);
                fisher_int += dt * ii;
                cs += dt * (0.5 * ii + grid.inner(eta_now, &dlog));
                let neg_log: f64 = -grid.integrate(&rho.log_values());
                ce += dt * ((neg_log - 2f64.ln()) / 8.0 - eta_l2sq);
            } else {
                cs = f64::INFINITY;
                ce = f64::INFINITY;
                fisher_int = f64::INFINITY;
            }
            let phi_eps: Vec<f64> = rho.values().iter().map(|&r| potential.phi(r)).collect();
            let dphi = derivative_values(&phi_eps);
            cv += dt * (grid.inner(&dphi, &dphi) + grid.inner(eta_now, &dphi));
            sq_int += dt * (0.5 * t * eta_l2sq + 2.0 * dist * eta_l2);
            unsq_int += dt * (0.5 * t + 2.0 * dist) * eta_l2;
            small_t = small_t.min(phi0 + t * s_gamma + sq_int - phi);
            small_t_unsq = small_t_unsq.min(phi0 + unsq_int - phi);
        }
        snaps.push(SnapshotDiagnostics {
            t: *t,
            mass: rho.mass(),
            entropy: s,
            fisher: i,
            min_rho: rho.min(),
            dist_gamma0: dist,
            small_t_phi: phi,
            cum_disineq: cd,
            cum_sifluc: cs,
            cum_eeprod: ce,
            cum_vazenest: cv,
        });
    }
    let psi_int = |rho: &GridDensity| -> f64 {
        grid.dx() * rho.values().iter().map(|&r| potential.psi(r)).sum::<f64>()
    };
    let y_dis: Vec<f64> = snaps
        .iter()
        .map(|s| 0.5 * s.dist_gamma0 * s.dist_gamma0 + s.cum_disineq)
        .collect();
    let y_si: Vec<f64> = snaps.iter().map(|s| s.entropy + s.cum_sifluc).collect();
    let y_ee: Vec<f64> = snaps.iter().map(|s| 0.5 * s.entropy + s.cum_eeprod).collect();
    let y_vz: Vec<f64> = traj
        .states
        .iter()
        .zip(&snaps)
        .map(|(rho, s)| psi_int(rho) + s.cum_vazenest)
        .collect();
    let entropy_monotone = snaps
        .windows(2)
        .map(|w| w[0].entropy - w[1].entropy)
        .fold(f64::INFINITY, f64::min);
    let s0 = snaps[0].entropy;
    let s_end = snaps.last().unwrap().entropy;
    let max_mass_drift = snaps
        .iter()
        .map(|s| (s.mass - mass0).abs())
        .fold(0.0, f64::max);
    let margins = Margins {
        disineq: worst_pair_margin(&y_dis),
        sifluc: worst_pair_margin(&y_si),
        eeprod: worst_pair_margin(&y_ee),
        vazenest: worst_pair_margin(&y_vz),
        small_t,
        small_t_unsquared: small_t_unsq,
        entropy_monotone,
        fisher_balance: (fisher_int - 2.0 * (s0 - s_end)).abs(),
    };
    Ok(DiagnosticsSeries {
        snapshots: snaps,
        margins,
        max_mass_drift,
        control_l2_max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    pub bounds: Vec<f64>,
    /// `min_t bound(t) - distance(t)`.
    pub worst_margin: f64,
}

/// Runs both problems and compares `||rho_1(t) - rho_2(t)||_{-1}` with
/// `||rho_1(0) - rho_2(0)||_{-1} + \int_0^t ||eta_1 - eta_2||_{L^2}`.
pub fn contraction_test(
    rho1_0: &GridDensity,
    rho2_0: &GridDensity,
    eta1: &SpaceTimeControl,
    eta2: &SpaceTimeControl,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<ContractionReport> {
    if rho1_0.grid() != rho2_0.grid() || eta1.grid() != eta2.grid() || eta1.grid() != rho1_0.grid() {
        return Err(Error::GridMismatch {
            expected: rho1_0.grid().m(),
            got: rho2_0.grid().m(),
        });
    }
    let t1 = solve_controlled(rho1_0, eta1, horizon, cfg)?;
    let t2 = solve_controlled(rho2_0, eta2, horizon, cfg)?;
    let grid = rho1_0.grid();
    let d0 = h_minus1_distance(rho1_0, rho2_0)?;
    let mut times = Vec::new();
    let mut distances = Vec::new();
    let mut bounds = Vec::new();
    let mut integral = 0.0;
    let mut t_prev = 0.0;
    let mut worst = f64::INFINITY;
    for ((t, a), b) in t1.times.iter().zip(&t1.states).zip(&t2.states) {
        // exact integral of a step function sampled per solver step
        let steps = ((t - t_prev) / cfg.dt).round() as usize;
        for s in 0..steps {
            let tm = t_prev + (s as f64 + 0.5) * cfg.dt;
            let d: Vec<f64> = eta1.at(tm).iter().zip(eta2.at(tm)).map(|(x, y)| x - y).collect();
            integral += cfg.dt * grid.inner(&d, &d).sqrt();
        }
        t_prev = *t;
        let dist = h_minus1_distance(a, b)?;
        let bound = d0 + integral;
        worst = worst.min(bound - dist);
        times.push(*t);
        distances.push(dist);
        bounds.push(bound);
    }
    Ok(ContractionReport {
        times,
        distances,
        bounds,
        worst_margin: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_margin_detects_increase() {
        assert_eq!(worst_pair_margin(&[3.0, 2.0, 1.0]), 1.0);
        assert_eq!(worst_pair_margin(&[1.0, 2.0, 0.5]), -1.0);
    }
}
