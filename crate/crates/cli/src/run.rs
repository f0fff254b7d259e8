//! Dispatch of manifests to the library and collection of their outputs.

use std::f64::consts::PI;
use std::path::Path;

use anyhow::{Context, Result};
use hydrokam_core::cell::{
    corrector_xi, effective_h_closed, effective_h_variational, heps_convergence, kappa_sweep, limit_h, CellSpec,
    KineticPair,
};
use hydrokam_core::control::{evaluate_objective, optimize, ControlProblem, Objective, OptimizerConfig, StateFunctional};
use hydrokam_core::diffusion::{
    diagnostics, diffusive_limit_sweep, solve_controlled, SolverConfig, SpaceTimeControl, Trajectory,
};
use hydrokam_core::functionals::{hamiltonian_h, RegularizedPotential};
use hydrokam_core::io::{fmt_f64, snapshot_table, CsvTable};
use hydrokam_core::particles::{
    checkpoint_from_bytes, hydro_initial, hydro_jobs, hydro_reference, hydro_run, hydro_summarize, save_checkpoint,
    HydroConfig, HydroRow,
};
use hydrokam_core::seed::{rng_from_seed, seed_split, seed_split_all};
use hydrokam_core::torus::{
    h_minus1_distance, random_smooth_density, random_smooth_field, w1_circle, GridDensity, GridField, TorusGrid,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::check;
use crate::manifest::{
    CellParams, ControlParams, FunctionalKind, HepsParams, InitialProfile, Manifest, MeanfieldParams, MetricsParams,
    ObjectiveKind, Params, ParticlesParams, PdeParams,
};
use crate::svg::{Plot, Series};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: "<=",
            threshold,
            passed: value <= threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: ">=",
            threshold,
            passed: value >= threshold,
        }
    }
}

/// Everything an experiment produces, before emission.
pub struct Outputs {
    /// `(file name, table)`; the first is the primary table.
    pub tables: Vec<(String, CsvTable)>,
    pub sidecar: serde_json::Value,
    pub plots: Vec<(String, Plot)>,
    pub checks: Vec<Check>,
}

pub fn run_experiment(m: &Manifest) -> Result<Outputs> {
    let ctx = || format!("experiment '{}' (kind {})", m.name, m.kind.as_str());
    match &m.params {
        Params::Metrics(p) => metrics(p, m.seed),
        Params::Pde(p) => pde(p, m.seed),
        Params::Control(p) => control(p, m.seed),
        Params::Particles(p) => particles(p, m.seed, &m.resolved_output_dir),
        Params::Meanfield(p) => meanfield(p),
        Params::Cell(p) => cell(p),
        Params::Heps(p) => heps(p, m.seed),
        Params::Invariants(p) => Ok(check::suite_outputs(p.filter.as_deref(), m.seed)),
    }
    .with_context(ctx)
}

fn cosine_density(grid: TorusGrid, amplitude: f64, mode: usize) -> Result<GridDensity> {
    Ok(GridDensity::from_fn(grid, |x| 1.0 + amplitude * (2.0 * PI * mode as f64 * x).cos())?)
}

fn metrics(p: &MetricsParams, seed: u64) -> Result<Outputs> {
    let g = TorusGrid::new(p.m)?;
    let rows: Vec<(usize, f64, f64)> = (0..p.pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(seed_split(seed, &format!("metrics/pair={i}")));
            let a = random_smooth_density(g, p.modes, p.amplitude, &mut rng);
            let b = random_smooth_density(g, p.modes, p.amplitude, &mut rng);
            Ok((i, w1_circle(&a, &b)?, h_minus1_distance(&a, &b)?))
        })
        .collect::<Result<_>>()?;
    let mut t = CsvTable::new(&["pair", "w1", "h_minus1", "upper_margin", "lower_margin"]);
    let (mut up, mut lo) = (f64::INFINITY, f64::INFINITY);
    for (i, w1, h) in &rows {
        let u = h + 1e-9 - w1;
        let l = (2.0 / PI.sqrt()) * w1.sqrt() + 1e-9 - h;
        up = up.min(u);
        lo = lo.min(l);
        t.push(vec![i.to_string(), fmt_f64(*w1), fmt_f64(*h), fmt_f64(u), fmt_f64(l)]);
    }
    Ok(Outputs {
        tables: vec![("metrics.csv".into(), t)],
        sidecar: json!({ "worst_upper_margin": up, "worst_lower_margin": lo }),
        plots: Vec::new(),
        checks: vec![
            Check::at_least("w1 <= h_minus1", up, 0.0),
            Check::at_least("h_minus1 <= (2/sqrt(pi)) sqrt(w1)", lo, 0.0),
        ],
    })
}

fn snapshot_plot(traj: &Trajectory, title: &str, max_curves: usize) -> Plot {
    let stride = traj.states.len().div_ceil(max_curves).max(1);
    let series = traj
        .times
        .iter()
        .zip(&traj.states)
        .enumerate()
        .filter(|(k, _)| k % stride == 0 || *k + 1 == traj.states.len())
        .map(|(_, (t, rho))| Series {
            label: format!("t = {t:.4}"),
            points: rho.grid().nodes().into_iter().zip(rho.values().iter().copied()).collect(),
        })
        .collect();
    Plot {
        title: title.into(),
        x_label: "x".into(),
        y_label: "rho".into(),
        log_x: false,
        log_y: false,
        series,
    }
}

fn pde(p: &PdeParams, seed: u64) -> Result<Outputs> {
    let g = TorusGrid::new(p.m)?;
    let mut rng = rng_from_seed(seed_split(seed, "pde"));
    let rho0 = match p.initial {
        InitialProfile::Cosine => cosine_density(g, p.amplitude, p.mode)?,
        InitialProfile::Random => random_smooth_density(g, p.mode, p.amplitude, &mut rng),
    };
    let block_dt = p.horizon / p.control_blocks as f64;
    let eta = if p.control_amplitude > 0.0 {
        let blocks = (0..p.control_blocks)
            .map(|_| random_smooth_field(g, 3, p.control_amplitude, &mut rng).into_values())
            .collect();
        SpaceTimeControl::new(g, block_dt, blocks)?
    } else {
        SpaceTimeControl::zeros(g, p.control_blocks, block_dt)?
    };
    let cfg = SolverConfig {
        record_every: p.record_every,
        ..SolverConfig::new(p.eps_reg, p.dt)
    };
    let traj = solve_controlled(&rho0, &eta, p.horizon, &cfg)?;
    let pot = RegularizedPotential::new(p.eps_reg)?;
    let diag = diagnostics(&traj, &eta, &GridDensity::uniform(g), &pot)?;
    let mut checks = vec![Check::at_most("mass change per step", traj.stats.max_mass_change, 1e-13)];
    if p.control_amplitude == 0.0 {
        checks.push(Check::at_least("entropy nonincreasing", diag.margins.entropy_monotone, -1e-8));
    }
    Ok(Outputs {
        tables: vec![("pde.csv".into(), snapshot_table(&traj))],
        sidecar: json!({ "stats": traj.stats, "diagnostics": diag }),
        plots: vec![("pde.svg".into(), snapshot_plot(&traj, "density snapshots", 6))],
        checks,
    })
}

fn control(p: &ControlParams, seed: u64) -> Result<Outputs> {
    let g = TorusGrid::new(p.m)?;
    let mut rng = rng_from_seed(seed_split(seed, "control"));
    let rho0 = random_smooth_density(g, 2, 0.6, &mut rng);
    let f = match p.functional {
        FunctionalKind::Linear => StateFunctional::Linear {
            phi: random_smooth_field(g, 3, 1.0, &mut rng).values().iter().map(|v| p.weight * v).collect(),
        },
        FunctionalKind::Entropy => StateFunctional::Entropy { weight: p.weight },
        FunctionalKind::DistanceSq => StateFunctional::DistanceSq {
            target: random_smooth_density(g, 2, 0.6, &mut rng).into_values(),
            weight: p.weight,
        },
    };
    let objective = match p.objective {
        ObjectiveKind::Terminal => Objective::Terminal(f),
        ObjectiveKind::Discounted => Objective::Discounted { h: f, alpha: p.alpha },
    };
    let problem = ControlProblem {
        rho0,
        horizon: p.horizon,
        solver: SolverConfig::new(p.eps_reg, p.dt),
        block_steps: p.block_steps,
        objective,
    };
    let opt = OptimizerConfig {
        max_iters: p.max_iters,
        restarts: p.restarts,
        seed: seed_split(seed, "optimizer"),
        init_scale: p.init_scale,
        ..OptimizerConfig::default()
    };
    let est = optimize(&problem, None, &opt)?;
    let (free, _) = evaluate_objective(&problem, &problem.zero_control()?)?;
    let mut trace = CsvTable::new(&["restart", "iter", "value", "grad_norm"]);
    for e in &est.trace {
        trace.push(vec![e.restart.to_string(), e.iter.to_string(), fmt_f64(e.value), fmt_f64(e.grad_norm)]);
    }
    let mut best = CsvTable::new(&["t", "x", "eta"]);
    for (b, block) in est.control.blocks().iter().enumerate() {
        for (i, v) in block.iter().enumerate() {
            best.push_f64(&[b as f64 * est.control.block_dt(), g.node(i), *v]);
        }
    }
    let value_plot = Plot {
        title: "optimizer trace".into(),
        x_label: "iteration".into(),
        y_label: "value".into(),
        log_x: false,
        log_y: false,
        series: (0..p.restarts)
            .map(|r| Series {
                label: format!("restart {r}"),
                points: est
                    .trace
                    .iter()
                    .filter(|e| e.restart == r)
                    .map(|e| (e.iter as f64, e.value))
                    .collect(),
            })
            .collect(),
    };
    Ok(Outputs {
        tables: vec![
            ("control_trace.csv".into(), trace),
            ("control_best.csv".into(), best),
            ("control_path.csv".into(), snapshot_table(&est.trajectory)),
        ],
        sidecar: json!({
            "value": est.value,
            "gap": est.gap,
            "restart_bests": est.restart_bests,
            "converged": est.converged,
            "tail_bound": est.tail_bound,
            "zero_control_value": free,
            "control_cost": est.control.cost(),
        }),
        plots: vec![("control.svg".into(), value_plot)],
        checks: vec![Check::at_least("value - zero-control value", est.value - free, 0.0)],
    })
}

fn particles(p: &ParticlesParams, seed: u64, out_dir: &Path) -> Result<Outputs> {
    let cells: Vec<(f64, usize)> = p.sweep.iter().map(|&(e, n)| (e, n as usize)).collect();
    let cfg = HydroConfig {
        grid_m: p.grid_m,
        bandwidth_cells: p.bandwidth_cells,
        replicas: p.replicas,
        master_seed: seed,
        dt_per_eps2: p.dt_per_eps2,
        reference_dt: p.reference_dt,
        reference_eps_reg: p.reference_eps_reg,
    };
    let g = TorusGrid::new(p.grid_m)?;
    let rho0 = cosine_density(g, p.amplitude, 1)?;
    let rho_ref = hydro_reference(&rho0, p.horizon, &cfg)?;
    let ck_dir = out_dir.join("checkpoints");
    let jobs = hydro_jobs(&cells, p.replicas);
    seed_split_all(seed, &jobs.iter().map(|j| j.label()).collect::<Vec<_>>())?;
    let mut rows: Vec<HydroRow> = jobs
        .par_iter()
        .map(|job| -> Result<HydroRow> {
            let stem = job.label().replace(['/', '='], "_");
            let done = ck_dir.join(format!("{stem}.row.json"));
            let partial = ck_dir.join(format!("{stem}.hkck"));
            if p.checkpoint_every > 0 {
                if let Ok(text) = std::fs::read_to_string(&done) {
                    if let Ok(row) = serde_json::from_str::<HydroRow>(&text) {
                        return Ok(row);
                    }
                }
            }
            let start = match std::fs::read(&partial) {
                Ok(bytes) if p.checkpoint_every > 0 => checkpoint_from_bytes(&bytes)
                    .with_context(|| format!("checkpoint {}", partial.display()))?,
                _ => hydro_initial(&rho0, job, &cfg)?,
            };
            let row = hydro_run(start, &rho_ref, job, p.horizon, &cfg, p.checkpoint_every, &mut |ens| {
                save_checkpoint(ens, &partial)
            })?;
            if p.checkpoint_every > 0 {
                hydrokam_core::io::write_atomic(&done, serde_json::to_string(&row)?.as_bytes())?;
                let _ = std::fs::remove_file(&partial);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    // sorted by cell key so the table does not depend on scheduling
    rows.sort_by(|a, b| {
        b.eps
            .total_cmp(&a.eps)
            .then(a.n.cmp(&b.n))
            .then(a.replica.cmp(&b.replica))
    });
    let summary = hydro_summarize(&cells, &rows);
    let mut t = CsvTable::new(&["eps", "N", "replica", "error", "stderr"]);
    for r in &rows {
        let s = summary.iter().find(|s| s.eps == r.eps && s.n == r.n).unwrap();
        t.push(vec![fmt_f64(r.eps), r.n.to_string(), r.replica.to_string(), fmt_f64(r.error), fmt_f64(s.stderr)]);
    }
    let mut checks = Vec::new();
    for w in summary.windows(2) {
        let slack = 2.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        checks.push(Check::at_most(
            format!("error(eps={}) - error(eps={}) - 2 MC stderr", w[1].eps, w[0].eps),
            w[1].mean - w[0].mean - slack,
            0.0,
        ));
    }
    let plot = Plot {
        title: "particle error vs eps".into(),
        x_label: "eps".into(),
        y_label: "mean ||rho_N - rho||_{-1}".into(),
        log_x: true,
        log_y: true,
        series: vec![Series {
            label: "replica mean".into(),
            points: summary.iter().map(|s| (s.eps, s.mean)).collect(),
        }],
    };
    Ok(Outputs {
        tables: vec![("particles.csv".into(), t)],
        sidecar: json!({ "summary": summary, "mean_field_reference_mass": rho_ref.mass() }),
        plots: vec![("particles.svg".into(), plot)],
        checks,
    })
}

fn meanfield(p: &MeanfieldParams) -> Result<Outputs> {
    let g = TorusGrid::new(p.m)?;
    let rho0 = cosine_density(g, p.amplitude, 1)?;
    let rows = diffusive_limit_sweep(
        &rho0,
        &p.eps,
        p.horizon,
        &SolverConfig::new(p.reference_eps_reg, p.reference_dt),
        p.steps_per_eps2,
    )?;
    let mut t = CsvTable::new(&["eps", "error", "closure_residual"]);
    for r in &rows {
        t.push_f64(&[r.eps, r.error, r.closure_residual]);
    }
    let worst_step = rows
        .windows(2)
        .map(|w| w[1].error - w[0].error)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut checks = Vec::new();
    if rows.len() >= 2 {
        checks.push(Check::at_most("largest error increase along eps", worst_step, 0.0));
    }
    let plot = Plot {
        title: "mean-field error vs eps".into(),
        x_label: "eps".into(),
        y_label: "||rho_eps(T) - rho(T)||_{-1}".into(),
        log_x: true,
        log_y: true,
        series: vec![Series {
            label: "error".into(),
            points: rows.iter().map(|r| (r.eps, r.error)).collect(),
        }],
    };
    Ok(Outputs {
        tables: vec![("meanfield.csv".into(), t)],
        sidecar: json!({ "rows": rows }),
        plots: vec![("meanfield.svg".into(), plot)],
        checks,
    })
}

fn cell(p: &CellParams) -> Result<Outputs> {
    let mut specs = if p.lattice { CellSpec::lattice() } else { Vec::new() };
    for &(a, b, pp) in &p.specs {
        specs.push(CellSpec::new(a, b, pp)?);
    }
    let h = p.variational_half_width;
    let per_spec: Vec<_> = specs
        .par_iter()
        .map(|s| {
            let var = effective_h_variational(s, -h, h, p.variational_points)?;
            let rows = kappa_sweep(s, &p.kappas)?;
            Ok((*s, var, rows))
        })
        .collect::<Result<_>>()?;
    let mut t = CsvTable::new(&["alpha", "beta", "P", "kappa", "E_kappa", "E_closed", "abs_diff"]);
    let (mut worst_kappa, mut worst_var): (f64, f64) = (0.0, 0.0);
    let mut var_rows = Vec::new();
    let mut series = Vec::new();
    for (s, var, rows) in &per_spec {
        let closed = effective_h_closed(s);
        worst_var = worst_var.max((var.value - closed).abs());
        var_rows.push(json!({
            "alpha": s.alpha, "beta": s.beta, "P": s.p,
            "E_variational": var.value, "argmax": var.argmax, "grid_bound": var.grid_bound, "E_closed": closed,
        }));
        for r in rows {
            worst_kappa = worst_kappa.max(r.abs_diff);
            t.push_f64(&[r.alpha, r.beta, r.p, r.kappa, r.e_kappa, r.e_closed, r.abs_diff]);
        }
        series.push(Series {
            label: format!("a={} b={} P={}", s.alpha, s.beta, s.p),
            points: rows.iter().map(|r| (r.kappa, r.e_kappa)).collect(),
        });
    }
    let plot = Plot {
        title: "ground-state energy vs kappa".into(),
        x_label: "kappa".into(),
        y_label: "E_kappa".into(),
        log_x: true,
        log_y: false,
        series,
    };
    Ok(Outputs {
        tables: vec![("cell.csv".into(), t)],
        sidecar: json!({ "variational": var_rows, "max_kappa_error": worst_kappa, "max_variational_error": worst_var }),
        plots: vec![("cell.svg".into(), plot)],
        checks: vec![
            Check::at_most("max |E_variational - E|", worst_var, 1e-5),
            Check::at_most("max |E_kappa - E|", worst_kappa, 1e-6),
        ],
    })
}

fn heps(p: &HepsParams, seed: u64) -> Result<Outputs> {
    let g = TorusGrid::new(p.m)?;
    let eps_max = p.eps[0];
    let reports: Vec<_> = (0..p.pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(seed_split(seed, &format!("heps/pair={i}")));
            let rho = random_smooth_density(g, 4, 0.8, &mut rng);
            let phi = random_smooth_field(g, 4, 1.0, &mut rng);
            let raw = random_smooth_field(g, 3, 1.0, &mut rng);
            let scale = (0.9 * rho.min() / (eps_max * raw.max_abs())).min(1.0);
            let j = GridField::new(g, raw.values().iter().map(|v| v * scale).collect())?;
            // cancellation is exact for any flux, including inadmissible ones
            let wild = random_smooth_field(g, 4, 2.0, &mut rng);
            let xi = corrector_xi(&rho, &phi);
            let wild_res = (limit_h(&rho, &wild, &phi, &xi)? - hamiltonian_h(&rho, &phi)?).abs();
            let pair = KineticPair::new(rho, j, eps_max)?;
            Ok((i, heps_convergence(&pair, &phi, &p.eps)?, wild_res))
        })
        .collect::<Result<_>>()?;
    let mut t = CsvTable::new(&["pair", "eps", "Heps", "H0", "abs_diff"]);
    let (mut worst_res, mut worst_slope): (f64, f64) = (0.0, f64::INFINITY);
    let mut series = Vec::new();
    for (i, r, wild) in &reports {
        worst_res = worst_res.max(r.cancellation_residual).max(*wild);
        worst_slope = worst_slope.min(r.slope);
        for row in &r.rows {
            t.push(vec![i.to_string(), fmt_f64(row.eps), fmt_f64(row.h_eps), fmt_f64(row.h0), fmt_f64(row.abs_diff)]);
        }
        series.push(Series {
            label: format!("pair {i}"),
            points: r.rows.iter().map(|row| (row.eps, row.abs_diff)).collect(),
        });
    }
    let slopes: Vec<f64> = reports.iter().map(|r| r.1.slope).collect();
    Ok(Outputs {
        tables: vec![("heps.csv".into(), t)],
        sidecar: json!({ "slopes": slopes, "max_cancellation_residual": worst_res }),
        plots: vec![(
            "heps.svg".into(),
            Plot {
                title: "|H_eps f_eps - H f| vs eps".into(),
                x_label: "eps".into(),
                y_label: "abs diff".into(),
                log_x: true,
                log_y: true,
                series,
            },
        )],
        checks: vec![
            Check::at_most("max cancellation residual", worst_res, 1e-10),
            Check::at_least("min fitted slope", worst_slope, 1.8),
        ],
    })
}
