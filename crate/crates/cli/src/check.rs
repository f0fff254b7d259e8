//! Quick invariant suite behind `hydrokam check` and `kind = "invariants"`.

use std::collections::HashSet;
use std::f64::consts::PI;

use hydrokam_core::cell::{
    corrector_xi, decomposition_residual, effective_h_closed, ground_state_energy, limit_h, CellSpec,
    GroundStateConfig, KineticPair,
};
use hydrokam_core::control::{adjoint_gradient, evaluate_objective, ControlProblem, Objective, StateFunctional};
use hydrokam_core::diffusion::{solve_controlled, SolverConfig, SpaceTimeControl};
use hydrokam_core::functionals::{barh_apply, entropy, hamiltonian_h, RegularizedPotential};
use hydrokam_core::io::{fmt_f64, CsvTable};
use hydrokam_core::particles::{step_particles, torus_distance, KineticParams, ParticleEnsemble};
use hydrokam_core::seed::{rng_from_seed, seed_split};
use hydrokam_core::torus::{
    h_minus1_distance, inverse_spectral, neg_inv_laplacian, random_smooth_density, random_smooth_field,
    second_derivative, spectral, w1_circle, GridDensity, GridField, TorusGrid,
};
use rand::{Rng, RngCore};
use serde_json::json;

use crate::run::{Check, Outputs};

type CheckFn = fn(&mut dyn RngCore) -> anyhow::Result<Check>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("metric sandwich", metric_sandwich),
    ("spectral round trip", spectral_round_trip),
    ("inverse laplacian", inverse_laplacian),
    ("regularized potential monotone", potential_monotone),
    ("extended hamiltonian combination", barh_combination),
    ("solver mass conservation", mass_conservation),
    ("free-flow entropy monotone", entropy_monotone),
    ("linearized decay rate", decay_rate),
    ("kinetic pair identities", kinetic_pair),
    ("microscopic decomposition", decomposition),
    ("effective hamiltonian routes", cell_routes),
    ("corrector cancellation", cancellation),
    ("pair flips", pair_flips),
    ("translation by one", translation),
    ("seed split distinct", seed_distinct),
    ("adjoint gradient", adjoint),
];

fn grid(m: usize) -> TorusGrid {
    TorusGrid::new(m).expect("valid grid size")
}

fn metric_sandwich(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let g = grid(128);
    let mut worst = f64::INFINITY;
    for _ in 0..50 {
        let a = random_smooth_density(g, 6, 1.5, rng);
        let b = random_smooth_density(g, 6, 1.5, rng);
        let (w1, h) = (w1_circle(&a, &b)?, h_minus1_distance(&a, &b)?);
        worst = worst.min(h + 1e-9 - w1).min((2.0 / PI.sqrt()) * w1.sqrt() + 1e-9 - h);
    }
    Ok(Check::at_least("min margin", worst, 0.0))
}

fn spectral_round_trip(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let v: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let back = inverse_spectral(&spectral(&v));
    let err = v.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Check::at_most("max error", err, 1e-12))
}

fn inverse_laplacian(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let f = random_smooth_field(grid(64), 8, 1.0, rng);
    let u = neg_inv_laplacian(&f)?;
    let err = second_derivative(&u)
        .values()
        .iter()
        .zip(f.values())
        .map(|(a, b)| (a + b).abs())
        .fold(0.0, f64::max);
    Ok(Check::at_most("max error", err, 1e-9))
}

fn potential_monotone(_: &mut dyn RngCore) -> anyhow::Result<Check> {
    let mut worst = f64::INFINITY;
    for eps in [0.01, 0.05, 0.2, 0.45] {
        let pot = RegularizedPotential::new(eps)?;
        for i in 0..=10_000 {
            worst = worst.min(pot.dphi(-1.0 + 3.0 * i as f64 / 10_000.0));
        }
    }
    Ok(Check::at_least("min derivative", worst, f64::MIN_POSITIVE))
}

fn barh_combination(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let g = grid(64);
    let mut worst: f64 = f64::NEG_INFINITY;
    for _ in 0..20 {
        let rho = random_smooth_density(g, 3, 1.0, rng);
        let gamma = random_smooth_density(g, 3, 1.0, rng);
        let eps_c = rng.random_range(0.05..0.95);
        for delta in [0.0, 0.1, 0.5, 0.9] {
            worst = worst.max(barh_apply(delta, eps_c, &rho, &gamma)?.combination.unwrap_or(f64::INFINITY));
        }
    }
    Ok(Check::at_most("max combination", worst, 1e-10))
}

fn mass_conservation(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let g = grid(64);
    let rho = random_smooth_density(g, 4, 1.0, rng);
    let eta = SpaceTimeControl::from_fn(g, 5, 0.01, |t, x| (2.0 * PI * x).sin() + t)?;
    let traj = solve_controlled(&rho, &eta, 0.05, &SolverConfig::new(0.05, 1e-3))?;
    Ok(Check::at_most("max change per step", traj.stats.max_mass_change, 1e-13))
}

fn entropy_monotone(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let g = grid(64);
    let rho = random_smooth_density(g, 4, 1.5, rng);
    let traj = solve_controlled(&rho, &SpaceTimeControl::zeros(g, 1, 0.05)?, 0.05, &SolverConfig::new(0.05, 1e-3))?;
    let margin = traj
        .states
        .windows(2)
        .map(|w| entropy(&w[0]) - entropy(&w[1]))
        .fold(f64::INFINITY, f64::min);
    Ok(Check::at_least("min entropy decrease", margin, -1e-8))
}

fn decay_rate(_: &mut dyn RngCore) -> anyhow::Result<Check> {
    let g = grid(64);
    let (dt, t) = (5e-5, 0.005);
    let mut worst: f64 = 0.0;
    for k in 1..=3i64 {
        let rho = GridDensity::from_fn(g, |x| 1.0 + 1e-3 * (2.0 * PI * k as f64 * x).cos())?;
        let tr = solve_controlled(&rho, &SpaceTimeControl::zeros(g, 1, t)?, t, &SolverConfig::new(0.1, dt))?;
        let a0 = spectral(rho.values()).get(k).norm();
        let a1 = spectral(tr.last().values()).get(k).norm();
        let rate = (a0 / a1).ln() / t;
        worst = worst.max((rate / (2.0 * PI * PI * (k * k) as f64) - 1.0).abs());
    }
    Ok(Check::at_most("max relative rate error", worst, 0.02))
}

fn kinetic_pair(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let g = grid(64);
    let eps = 0.2;
    let rho = random_smooth_density(g, 3, 1.0, rng);
    let raw = random_smooth_field(g, 3, 1.0, rng);
    let scale = (0.9 * rho.min() / (eps * raw.max_abs())).min(1.0);
    let j = GridField::new(g, raw.values().iter().map(|x| scale * x).collect())?;
    let pair = KineticPair::new(rho.clone(), j.clone(), eps)?;
    let (p, m) = (pair.mu(1.0), pair.mu(-1.0));
    let mut worst: f64 = 0.0;
    for i in 0..g.m() {
        let (r, jj) = (rho.values()[i], j.values()[i]);
        worst = worst
            .max((p[i] * p[i] - m[i] * m[i] - eps * r * jj).abs())
            .max((p[i] * p[i] + m[i] * m[i] - 0.5 * (r * r + eps * eps * jj * jj)).abs());
    }
    Ok(Check::at_most("max residual", worst, 1e-12))
}

fn decomposition(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let spec = CellSpec::new(rng.random_range(0.1..3.0), rng.random_range(-3.0..3.0), 0.0)?;
        let (u, p) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        worst = worst.max(decomposition_residual(u, p, &spec).abs() / (1.0 + u * u + p * p));
    }
    Ok(Check::at_most("max scaled residual", worst, 1e-12))
}

fn cell_routes(_: &mut dyn RngCore) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for spec in CellSpec::lattice() {
        let r = ground_state_energy(&spec, &GroundStateConfig::auto(&spec, 0.05))?;
        worst = worst.max((r.energy - effective_h_closed(&spec)).abs());
    }
    Ok(Check::at_most("max |E_kappa - E| at kappa 0.05", worst, 1e-6))
}

fn cancellation(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let g = grid(128);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let rho = random_smooth_density(g, 4, 0.8, rng);
        let phi = random_smooth_field(g, 4, 1.0, rng);
        let h = hamiltonian_h(&rho, &phi)?;
        let xi = corrector_xi(&rho, &phi);
        for _ in 0..5 {
            let j = random_smooth_field(g, 4, 2.0, rng);
            worst = worst.max((limit_h(&rho, &j, &phi, &xi)? - h).abs());
        }
    }
    Ok(Check::at_most("max residual", worst, 1e-10))
}

fn pair_flips(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let n = 400;
    let pos: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let vel: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    let mut ens = ParticleEnsemble::new(pos, vel, rng.random())?;
    let params = KineticParams {
        c: 1.0,
        k: 50.0,
        tau: 0.01,
        theta: 0.1,
        n,
    };
    let mut bad = 0.0;
    for _ in 0..50 {
        let before = ens.velocity_sum();
        step_particles(&mut ens, &params, 0.01)?;
        if (ens.velocity_sum() - before).rem_euclid(4) != 0 {
            bad += 1.0;
        }
    }
    Ok(Check::at_most("steps with an unpaired velocity change", bad, 0.0))
}

fn translation(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = rng.random::<f64>();
        let mut ens = ParticleEnsemble::new(vec![x], vec![1], 0)?;
        let params = KineticParams {
            c: 1.0,
            k: 0.0,
            tau: 0.0,
            theta: 0.1,
            n: 1,
        };
        step_particles(&mut ens, &params, 1.0)?;
        worst = worst.max(torus_distance(ens.positions[0], x));
    }
    Ok(Check::at_most("max displacement", worst, 1e-12))
}

fn seed_distinct(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let master = rng.random();
    let seeds: HashSet<u64> = (0..10_000).map(|i| seed_split(master, &format!("task-{i}"))).collect();
    Ok(Check::at_most("collisions", (10_000 - seeds.len()) as f64, 0.0))
}

fn adjoint(rng: &mut dyn RngCore) -> anyhow::Result<Check> {
    let g = grid(16);
    let problem = ControlProblem {
        rho0: random_smooth_density(g, 2, 0.6, rng),
        horizon: 0.04,
        solver: SolverConfig {
            newton_tol: 1e-13,
            ..SolverConfig::new(0.05, 0.01)
        },
        block_steps: 2,
        objective: Objective::Discounted {
            h: StateFunctional::Entropy { weight: -1.0 },
            alpha: 0.02,
        },
    };
    let mut control = problem.zero_control()?;
    for b in control.blocks_mut() {
        b.copy_from_slice(random_smooth_field(g, 2, 0.3, rng).values());
    }
    let (_, grad) = adjoint_gradient(&problem, &control)?;
    let (x, gv) = (control.to_flat(), grad.to_flat());
    let scale = gv.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in (0..x.len()).step_by(5) {
        let eval = |d: f64| -> anyhow::Result<f64> {
            let mut y = x.clone();
            y[idx] += d;
            let c = SpaceTimeControl::from_flat(g, control.block_dt(), &y)?;
            Ok(evaluate_objective(&problem, &c)?.0)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((fd - gv[idx]).abs() / scale);
    }
    Ok(Check::at_most("max relative error", worst, 1e-4))
}

/// Runs the checks whose name contains `filter`; each draws from its own stream.
pub fn run_suite(filter: Option<&str>, seed: u64) -> Vec<Check> {
    CHECKS
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, f)| {
            let mut rng = rng_from_seed(seed_split(seed, name));
            match f(&mut rng as &mut dyn RngCore) {
                Ok(mut c) => {
                    c.name = format!("{name}: {}", c.name);
                    c
                }
                Err(e) => Check {
                    name: format!("{name}: error {e:#}"),
                    value: f64::NAN,
                    relation: "<=",
                    threshold: f64::NAN,
                    passed: false,
                },
            }
        })
        .collect()
}

pub fn suite_outputs(filter: Option<&str>, seed: u64) -> Outputs {
    let checks = run_suite(filter, seed);
    let mut t = CsvTable::new(&["check", "value", "relation", "threshold", "passed"]);
    for c in &checks {
        t.push(vec![
            c.name.replace(',', ";"),
            fmt_f64(c.value),
            c.relation.into(),
            fmt_f64(c.threshold),
            c.passed.to_string(),
        ]);
    }
    Outputs {
        tables: vec![("invariants.csv".into(), t)],
        sidecar: json!({ "checks": checks.len(), "failed": checks.iter().filter(|c| !c.passed).count() }),
        plots: Vec::new(),
        checks,
    }
}
