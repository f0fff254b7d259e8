#![allow(dead_code)]

use std::path::PathBuf;

use hydrokam_core::diffusion::{
    contraction_test, diagnostics, solve_controlled, SolverConfig, SpaceTimeControl,
};
use hydrokam_core::functionals::RegularizedPotential;
use hydrokam_core::seed::rng_from_seed;
use hydrokam_core::torus::{random_smooth_density, random_smooth_field, GridDensity, TorusGrid};
use serde::{Deserialize, Serialize};

/// Stored discretization-tolerance constant, see `data/tol_disc.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TolDisc {
    pub c: f64,
    pub observed_ratio: f64,
    pub safety: f64,
    pub levels: Vec<CalibrationLevel>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationLevel {
    pub m: usize,
    pub dt: f64,
    pub worst_violation: f64,
}

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data").join(name)
}

pub fn load_tol_disc() -> TolDisc {
    let text = std::fs::read_to_string(data_path("tol_disc.json")).expect("tol_disc.json");
    serde_json::from_str(&text).expect("valid tol_disc.json")
}

/// Randomized controlled run: initial data, a second initial datum, a
/// reference density and two smooth piecewise-constant controls.
pub struct ControlledInstance {
    pub rho0: GridDensity,
    pub rho0_b: GridDensity,
    pub gamma0: GridDensity,
    pub eta: SpaceTimeControl,
    pub eta_b: SpaceTimeControl,
}

pub const RUN_HORIZON: f64 = 0.1;
pub const RUN_BLOCKS: usize = 10;
pub const RUN_EPS_REG: f64 = 0.01;

pub fn controlled_instance(m: usize, seed: u64) -> ControlledInstance {
    let g = TorusGrid::new(m).unwrap();
    let mut rng = rng_from_seed(seed);
    let rho0 = random_smooth_density(g, 3, 0.8, &mut rng);
    let rho0_b = random_smooth_density(g, 3, 0.8, &mut rng);
    let gamma0 = random_smooth_density(g, 3, 0.8, &mut rng);
    let block_dt = RUN_HORIZON / RUN_BLOCKS as f64;
    let mut blocks = || {
        (0..RUN_BLOCKS)
            .map(|_| random_smooth_field(g, 3, 0.5, &mut rng).into_values())
            .collect::<Vec<_>>()
    };
    let eta = SpaceTimeControl::new(g, block_dt, blocks()).unwrap();
    let eta_b = SpaceTimeControl::new(g, block_dt, blocks()).unwrap();
    ControlledInstance {
        rho0,
        rho0_b,
        gamma0,
        eta,
        eta_b,
    }
}

/// Worst margin over the estimate suite and the contraction bound.
pub fn worst_estimate_margin(inst: &ControlledInstance, dt: f64) -> f64 {
    let cfg = SolverConfig::new(RUN_EPS_REG, dt);
    let traj = solve_controlled(&inst.rho0, &inst.eta, RUN_HORIZON, &cfg).unwrap();
    let pot = RegularizedPotential::new(RUN_EPS_REG).unwrap();
    let d = diagnostics(&traj, &inst.eta, &inst.gamma0, &pot).unwrap();
    let c = contraction_test(&inst.rho0, &inst.rho0_b, &inst.eta, &inst.eta_b, RUN_HORIZON, &cfg).unwrap();
    d.margins.worst().min(c.worst_margin)
}
