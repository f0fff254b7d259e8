//! Deterministic optimal control on top of the implicit solver: action,
//! value function, discounted resolvent and quasi-potential, with an exact
//! discrete adjoint and a restarted line-search ascent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    control_divergence, newton_step, step_count, step_jacobian, SolveStats, SolverConfig, Trajectory,
};
pub use crate::diffusion::SpaceTimeControl;
use crate::error::{Error, Result};
use crate::functionals::{entropy, lagrangian_l, RegularizedPotential};
use crate::seed::{rng_from_seed, seed_split};
use crate::torus::{
    h_minus1_sq_values, neg_inv_laplacian_values, Extended, GridDensity, GridField, TorusGrid,
};

/// Functional of the state used as terminal reward or running payoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateFunctional {
    Constant(f64),
    /// `<rho, phi>`.
    Linear { phi: Vec<f64> },
    /// `psi(<rho, phi_1>, ..)` with `psi(y) = sum a_i y_i - 1/2 b_i y_i^2`.
    Cylinder {
        phis: Vec<Vec<f64>>,
        a: Vec<f64>,
        b: Vec<f64>,
    },
    /// `weight * || rho - target ||_{-1}^2`.
    DistanceSq { target: Vec<f64>, weight: f64 },
    /// `weight * S(rho)`.
    Entropy { weight: f64 },
    Sum(Vec<StateFunctional>),
}

impl StateFunctional {
    pub fn value(&self, grid: TorusGrid, x: &[f64]) -> Result<f64> {
        Ok(match self {
            StateFunctional::Constant(c) => *c,
            StateFunctional::Linear { phi } => grid.inner(phi, x),
            StateFunctional::Cylinder { phis, a, b } => phis
                .iter()
                .zip(a.iter().zip(b))
                .map(|(p, (ai, bi))| {
                    let y = grid.inner(p, x);
                    ai * y - 0.5 * bi * y * y
                })
                .sum(),
            StateFunctional::DistanceSq { target, weight } => {
                let d: Vec<f64> = x.iter().zip(target).map(|(a, b)| a - b).collect();
                weight * h_minus1_sq_values(&d)
            }
            StateFunctional::Entropy { weight } => {
                if *weight == 0.0 {
                    0.0
                } else {
                    require_positive(x)?;
                    weight * grid.dx() * x.iter().map(|r| r * r.ln()).sum::<f64>()
                }
            }
            StateFunctional::Sum(parts) => {
                let mut s = 0.0;
                for p in parts {
                    s += p.value(grid, x)?;
                }
                s
            }
        })
    }

    /// Partial derivatives with respect to the node values.
    pub fn gradient(&self, grid: TorusGrid, x: &[f64]) -> Result<Vec<f64>> {
        let dx = grid.dx();
        let m = x.len();
        Ok(match self {
            StateFunctional::Constant(_) => vec![0.0; m],
            StateFunctional::Linear { phi } => phi.iter().map(|p| dx * p).collect(),
            StateFunctional::Cylinder { phis, a, b } => {
                let mut g = vec![0.0; m];
                for (p, (ai, bi)) in phis.iter().zip(a.iter().zip(b)) {
                    let y = grid.inner(p, x);
                    let w = ai - bi * y;
                    for (gi, pi) in g.iter_mut().zip(p) {
                        *gi += w * dx * pi;
                    }
                }
                g
            }
            StateFunctional::DistanceSq { target, weight } => {
                let d: Vec<f64> = x.iter().zip(target).map(|(a, b)| a - b).collect();
                neg_inv_laplacian_values(&d)
                    .into_iter()
                    .map(|v| 2.0 * weight * dx * v)
                    .collect()
            }
            StateFunctional::Entropy { weight } => {
                if *weight == 0.0 {
                    vec![0.0; m]
                } else {
                    require_positive(x)?;
                    x.iter().map(|r| weight * dx * (r.ln() + 1.0)).collect()
                }
            }
            StateFunctional::Sum(parts) => {
                let mut g = vec![0.0; m];
                for p in parts {
                    for (gi, v) in g.iter_mut().zip(p.gradient(grid, x)?) {
                        *gi += v;
                    }
                }
                g
            }
        })
    }

    /// `f_0 - alpha H_0 f_0` with `f_0 = k/2 ||. - gamma||_{-1}^2`.
    pub fn h0_resolvent_payoff(k: f64, alpha: f64, gamma: &GridDensity) -> Self {
        StateFunctional::Sum(vec![
            StateFunctional::DistanceSq {
                target: gamma.values().to_vec(),
                weight: 0.5 * k - 0.5 * alpha * k * k,
            },
            StateFunctional::Entropy {
                weight: 0.5 * alpha * k,
            },
            StateFunctional::Constant(-0.5 * alpha * k * entropy(gamma)),
        ])
    }

    /// `f_1 - alpha H_1 f_1` with `f_1 = -k/2 ||anchor - .||_{-1}^2`.
    pub fn h1_resolvent_payoff(k: f64, alpha: f64, anchor: &GridDensity) -> Self {
        StateFunctional::Sum(vec![
            StateFunctional::DistanceSq {
                target: anchor.values().to_vec(),
                weight: -0.5 * k - 0.5 * alpha * k * k,
            },
            StateFunctional::Entropy {
                weight: -0.5 * alpha * k,
            },
            StateFunctional::Constant(0.5 * alpha * k * entropy(anchor)),
        ])
    }
}

fn require_positive(x: &[f64]) -> Result<()> {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Err(Error::NegativeState { min });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `f(rho(T)) - \int_0^T 1/2 \int eta^2`.
    Terminal(StateFunctional),
    /// `\int_0^T e^{-s/alpha} (h(rho(s))/alpha - 1/2 \int eta^2) ds`.
    Discounted { h: StateFunctional, alpha: f64 },
}

/// Controlled problem on `[0, horizon]`; controls are constant on blocks of
/// `block_steps` solver steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlProblem {
    pub rho0: GridDensity,
    pub horizon: f64,
    pub solver: SolverConfig,
    pub block_steps: usize,
    pub objective: Objective,
}

impl ControlProblem {
    pub fn grid(&self) -> TorusGrid {
        self.rho0.grid()
    }

    pub fn n_steps(&self) -> Result<usize> {
        step_count(self.horizon, self.solver.dt)
    }

    pub fn n_blocks(&self) -> Result<usize> {
        let n = self.n_steps()?;
        if self.block_steps == 0 || n % self.block_steps != 0 {
            return Err(Error::InvalidParameter(format!(
                "block_steps {} must divide the step count {n}",
                self.block_steps
            )));
        }
        Ok(n / self.block_steps)
    }

    pub fn zero_control(&self) -> Result<SpaceTimeControl> {
        SpaceTimeControl::zeros(
            self.grid(),
            self.n_blocks()?,
            self.solver.dt * self.block_steps as f64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.n_blocks()?;
        if let Objective::Discounted { alpha, .. } = self.objective {
            if !(alpha > 0.0) {
                return Err(Error::InvalidParameter("alpha must be positive".into()));
            }
        }
        Ok(())
    }

    /// Payoff weight `a_n` on `rho^{n+1}` and cost weight `c_n` on
    /// `1/2 \int eta_n^2` for step `n`.
    fn weights(&self, n: usize) -> (f64, f64) {
        let dt = self.solver.dt;
        match &self.objective {
            Objective::Terminal(_) => (0.0, dt),
            Objective::Discounted { alpha, .. } => {
                let t0 = n as f64 * dt;
                let w = (-t0 / alpha).exp() - (-(t0 + dt) / alpha).exp();
                (w, alpha * w)
            }
        }
    }

    /// `|h|` bound on the truncated tail, `max |h| e^{-T/alpha}` along `states`.
    fn tail_bound(&self, states: &[Vec<f64>]) -> f64 {
        match &self.objective {
            Objective::Terminal(_) => 0.0,
            Objective::Discounted { h, alpha } => {
                let hmax = states
                    .iter()
                    .filter_map(|x| h.value(self.grid(), x).ok())
                    .fold(0.0, |a: f64, v| a.max(v.abs()));
                hmax * (-self.horizon / alpha).exp()
            }
        }
    }
}

struct Forward {
    states: Vec<Vec<f64>>,
    value: f64,
    newton_iterations: usize,
}

fn forward(problem: &ControlProblem, control: &SpaceTimeControl, pot: &RegularizedPotential) -> Result<Forward> {
    let grid = problem.grid();
    let dx = grid.dx();
    let n = problem.n_steps()?;
    let cfg = &problem.solver;
    let mut states = Vec::with_capacity(n + 1);
    states.push(problem.rho0.values().to_vec());
    let mut value = 0.0;
    let mut iters = 0;
    for step in 0..n {
        let eta = &control.blocks()[step / problem.block_steps];
        let (x, it) = newton_step(&states[step], eta, cfg.dt, dx, pot, cfg.newton_tol, cfg.newton_max)?;
        iters += it;
        let (a, c) = problem.weights(step);
        if a != 0.0 {
            if let Objective::Discounted { h, .. } = &problem.objective {
                value += a * h.value(grid, &x)?;
            }
        }
        value -= c * 0.5 * grid.inner(eta, eta);
        states.push(x);
    }
    if let Objective::Terminal(f) = &problem.objective {
        value += f.value(grid, states.last().unwrap())?;
    }
    Ok(Forward {
        states,
        value,
        newton_iterations: iters,
    })
}

fn check_control(problem: &ControlProblem, control: &SpaceTimeControl) -> Result<()> {
    problem.validate()?;
    let expected_dt = problem.solver.dt * problem.block_steps as f64;
    if control.grid() != problem.grid()
        || control.n_blocks() != problem.n_blocks()?
        || (control.block_dt() - expected_dt).abs() > 1e-12 * expected_dt
    {
        return Err(Error::InvalidParameter("control layout does not match the problem".into()));
    }
    Ok(())
}

fn to_trajectory(problem: &ControlProblem, fw: &Forward) -> Result<Trajectory> {
    let grid = problem.grid();
    let states = fw
        .states
        .iter()
        .map(|x| {
            let min = x.iter().copied().fold(f64::INFINITY, f64::min);
            if min < 0.0 {
                return Err(Error::NegativeState { min });
            }
            GridDensity::new(grid, x.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        times: (0..states.len()).map(|k| k as f64 * problem.solver.dt).collect(),
        states,
        fluxes: None,
        stats: SolveStats {
            steps: fw.states.len() - 1,
            newton_iterations: fw.newton_iterations,
            ..SolveStats::default()
        },
    })
}

/// Objective value of `control` and the trajectory it produces.
pub fn evaluate_objective(problem: &ControlProblem, control: &SpaceTimeControl) -> Result<(f64, Trajectory)> {
    check_control(problem, control)?;
    let pot = RegularizedPotential::new(problem.solver.eps_reg)?;
    let fw = forward(problem, control, &pot)?;
    Ok((fw.value, to_trajectory(problem, &fw)?))
}

/// Exact gradient of the discrete objective with respect to the block values.
pub fn adjoint_gradient(problem: &ControlProblem, control: &SpaceTimeControl) -> Result<(f64, SpaceTimeControl)> {
    check_control(problem, control)?;
    let pot = RegularizedPotential::new(problem.solver.eps_reg)?;
    let fw = forward(problem, control, &pot)?;
    let grad = backward(problem, control, &fw, &pot)?;
    Ok((fw.value, grad))
}

fn backward(
    problem: &ControlProblem,
    control: &SpaceTimeControl,
    fw: &Forward,
    pot: &RegularizedPotential,
) -> Result<SpaceTimeControl> {
    let grid = problem.grid();
    let dx = grid.dx();
    let dt = problem.solver.dt;
    let m = grid.m();
    let n = fw.states.len() - 1;
    let mut grad = vec![vec![0.0; m]; control.n_blocks()];
    let mut lambda = match &problem.objective {
        Objective::Terminal(f) => f.gradient(grid, &fw.states[n])?,
        Objective::Discounted { .. } => vec![0.0; m],
    };
    for step in (0..n).rev() {
        let (a, c) = problem.weights(step);
        if a != 0.0 {
            if let Objective::Discounted { h, .. } = &problem.objective {
                for (l, g) in lambda.iter_mut().zip(h.gradient(grid, &fw.states[step + 1])?) {
                    *l += a * g;
                }
            }
        }
        let jac = step_jacobian(&fw.states[step + 1], dt, dx, pot);
        let mu = jac.transpose().solve(&lambda)?;
        let b = step / problem.block_steps;
        let eta = &control.blocks()[b];
        // centered difference is skew, so its transpose is its negative
        let dmu = control_divergence(&mu, dx);
        for i in 0..m {
            grad[b][i] += -dt * dmu[i] - c * dx * eta[i];
        }
        lambda = mu;
    }
    SpaceTimeControl::new(grid, control.block_dt(), grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub grad_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Standard deviation of the random initial controls of restarts `>= 1`.
    pub init_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 60,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
            grad_tol: 1e-8,
            restarts: 3,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub restart: usize,
    pub iter: usize,
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueEstimate {
    /// Best value found; a lower bound for the supremum up to discretization.
    pub value: f64,
    pub control: SpaceTimeControl,
    #[serde(skip)]
    pub trajectory: Trajectory,
    pub trace: Vec<TraceEntry>,
    /// Running best after each restart; nondecreasing.
    pub restart_bests: Vec<f64>,
    /// Difference between the last two running bests.
    pub gap: f64,
    pub converged: bool,
    /// Bound on the discarded discounted tail.
    pub tail_bound: f64,
}

struct RestartResult {
    value: f64,
    control: SpaceTimeControl,
    trace: Vec<TraceEntry>,
    converged: bool,
}

fn preconditioner(problem: &ControlProblem, n_blocks: usize) -> Vec<f64> {
    let dx = problem.grid().dx();
    let mut p = vec![0.0; n_blocks];
    let n = n_blocks * problem.block_steps;
    for step in 0..n {
        p[step / problem.block_steps] += problem.weights(step).1 * dx;
    }
    p.iter().map(|v| if *v > 0.0 { *v } else { dx * problem.solver.dt }).collect()
}

fn ascend(
    problem: &ControlProblem,
    start: SpaceTimeControl,
    restart: usize,
    opt: &OptimizerConfig,
    pot: &RegularizedPotential,
) -> Result<RestartResult> {
    let grid = problem.grid();
    let block_dt = start.block_dt();
    let precond = preconditioner(problem, start.n_blocks());
    let m = grid.m();
    let mut x = start.to_flat();
    let fw = forward(problem, &start, pot)?;
    let mut value = fw.value;
    let mut grad = backward(problem, &start, &fw, pot)?.to_flat();
    let mut trace = Vec::new();
    let mut step: f64 = 1.0;
    let mut converged = false;
    for iter in 0..opt.max_iters {
        let dir: Vec<f64> = grad.iter().enumerate().map(|(i, g)| g / precond[i / m]).collect();
        let slope: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let gnorm = slope.max(0.0).sqrt();
        trace.push(TraceEntry {
            restart,
            iter,
            value,
            grad_norm: gnorm,
        });
        if gnorm < opt.grad_tol {
            converged = true;
            break;
        }
        let mut s = (2.0 * step).min(1.0);
        let mut accepted = None;
        for _ in 0..opt.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            let ctrl = SpaceTimeControl::from_flat(grid, block_dt, &trial)?;
            if let Ok(fw) = forward(problem, &ctrl, pot) {
                if fw.value >= value + opt.armijo_c * s * slope {
                    accepted = Some((trial, ctrl, fw));
                    break;
                }
            }
            s *= opt.backtrack;
        }
        match accepted {
            Some((trial, ctrl, fw)) => {
                step = s;
                x = trial;
                value = fw.value;
                grad = backward(problem, &ctrl, &fw, pot)?.to_flat();
            }
            None => {
                // no ascent along the preconditioned gradient: stationary to line-search precision
                converged = true;
                break;
            }
        }
    }
    Ok(RestartResult {
        value,
        control: SpaceTimeControl::from_flat(grid, block_dt, &x)?,
        trace,
        converged,
    })
}

/// Restarted ascent from the given initial control (restart 0) and random
/// controls (restarts `1..`). Restarts run in parallel; results are combined
/// in restart order.
pub fn optimize(
    problem: &ControlProblem,
    initial: Option<SpaceTimeControl>,
    opt: &OptimizerConfig,
) -> Result<ValueEstimate> {
    problem.validate()?;
    if opt.max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be positive".into()));
    }
    let pot = RegularizedPotential::new(problem.solver.eps_reg)?;
    let zero = problem.zero_control()?;
    let initial = match initial {
        Some(c) => {
            check_control(problem, &c)?;
            c
        }
        None => zero.clone(),
    };
    let restarts = opt.restarts.max(1);
    let starts: Vec<SpaceTimeControl> = (0..restarts)
        .map(|r| {
            if r == 0 {
                return Ok(initial.clone());
            }
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rng_from_seed(seed_split(opt.seed, &format!("restart-{r}")));
            let flat: Vec<f64> = (0..zero.to_flat().len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    opt.init_scale * z
                })
                .collect();
            SpaceTimeControl::from_flat(problem.grid(), zero.block_dt(), &flat)
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<RestartResult>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(r, s)| ascend(problem, s, r, opt, &pot))
        .collect();
    let mut best: Option<RestartResult> = None;
    let mut restart_bests = Vec::new();
    let mut trace = Vec::new();
    let mut any_converged = false;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(res) => {
                trace.extend(res.trace.iter().cloned());
                any_converged |= res.converged;
                let better = best.as_ref().map(|b| res.value > b.value).unwrap_or(true);
                if better {
                    best = Some(res);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
        restart_bests.push(best.as_ref().map(|b| b.value).unwrap_or(f64::NEG_INFINITY));
    }
    let best = match best {
        Some(b) => b,
        None => return Err(first_err.unwrap()),
    };
    let fw = forward(problem, &best.control, &pot)?;
    let trajectory = to_trajectory(problem, &fw)?;
    let gap = if restart_bests.len() >= 2 {
        let k = restart_bests.len();
        restart_bests[k - 1] - restart_bests[k - 2]
    } else {
        0.0
    };
    Ok(ValueEstimate {
        value: fw.value,
        tail_bound: problem.tail_bound(&fw.states),
        control: best.control,
        trajectory,
        trace,
        restart_bests,
        gap,
        converged: any_converged,
    })
}

/// `V(t) f (rho0)`.
pub fn optimize_value(
    f: StateFunctional,
    rho0: &GridDensity,
    t: f64,
    solver: &SolverConfig,
    block_steps: usize,
    opt: &OptimizerConfig,
) -> Result<ValueEstimate> {
    let problem = ControlProblem {
        rho0: rho0.clone(),
        horizon: t,
        solver: solver.clone(),
        block_steps,
        objective: Objective::Terminal(f),
    };
    optimize(&problem, None, opt)
}

/// `R_alpha h (rho0)` truncated at `t_eff >= 8 alpha`.
pub fn resolvent(
    h: StateFunctional,
    alpha: f64,
    rho0: &GridDensity,
    t_eff: f64,
    solver: &SolverConfig,
    block_steps: usize,
    opt: &OptimizerConfig,
) -> Result<ValueEstimate> {
    if t_eff < 8.0 * alpha {
        return Err(Error::InvalidParameter(format!(
            "horizon {t_eff} shorter than 8 alpha = {}",
            8.0 * alpha
        )));
    }
    let problem = ControlProblem {
        rho0: rho0.clone(),
        horizon: t_eff,
        solver: solver.clone(),
        block_steps,
        objective: Objective::Discounted { h, alpha },
    };
    optimize(&problem, None, opt)
}

/// Values of two problems with cross-evaluation: each problem is also scored
/// with the other's best control, so the reported values are the better of
/// the two candidates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedValues {
    pub value_f: f64,
    pub value_g: f64,
    pub gap_f: f64,
    pub gap_g: f64,
}

pub fn paired_values(pf: &ControlProblem, pg: &ControlProblem, opt: &OptimizerConfig) -> Result<PairedValues> {
    let ef = optimize(pf, None, opt)?;
    let eg = optimize(pg, None, opt)?;
    let cross_f = evaluate_objective(pf, &eg.control).map(|v| v.0).unwrap_or(f64::NEG_INFINITY);
    let cross_g = evaluate_objective(pg, &ef.control).map(|v| v.0).unwrap_or(f64::NEG_INFINITY);
    Ok(PairedValues {
        value_f: ef.value.max(cross_f),
        value_g: eg.value.max(cross_g),
        gap_f: ef.gap,
        gap_g: eg.gap,
    })
}

/// `\sum_n dt L(rho^{n+1}, (rho^{n+1} - rho^n)/dt)`, infinite if any state on
/// the path is not strictly positive.
pub fn action(traj: &Trajectory) -> Result<Extended> {
    let mut total = 0.0;
    for k in 1..traj.states.len() {
        let (a, b) = (&traj.states[k - 1], &traj.states[k]);
        if b.min() <= 0.0 {
            return Ok(Extended::Infinite);
        }
        let dt = traj.times[k] - traj.times[k - 1];
        let mut rate: Vec<f64> = b.values().iter().zip(a.values()).map(|(x, y)| (x - y) / dt).collect();
        let mean = b.grid().integrate(&rate);
        // mass is conserved to round-off; larger drifts make the action infinite
        if mean.abs() > 1e-8 {
            return Ok(Extended::Infinite);
        }
        rate.iter_mut().for_each(|v| *v -= mean);
        match lagrangian_l(b, &GridField::new(b.grid(), rate)?)? {
            Extended::Finite(l) => total += dt * l,
            Extended::Infinite => return Ok(Extended::Infinite),
        }
    }
    Ok(Extended::Finite(total))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuasiPotentialRow {
    pub beta: f64,
    /// `-V`: control cost plus penalty.
    pub penalized_action: f64,
    pub control_cost: f64,
    pub terminal_distance: f64,
}

/// Penalty approximation of the minimal action from `rho0` to `rho1` in time `t`.
pub fn quasi_potential(
    rho0: &GridDensity,
    rho1: &GridDensity,
    t: f64,
    solver: &SolverConfig,
    block_steps: usize,
    penalties: &[f64],
    opt: &OptimizerConfig,
) -> Result<Vec<QuasiPotentialRow>> {
    let mut rows = Vec::new();
    let mut warm: Option<SpaceTimeControl> = None;
    for &beta in penalties {
        let problem = ControlProblem {
            rho0: rho0.clone(),
            horizon: t,
            solver: solver.clone(),
            block_steps,
            objective: Objective::Terminal(StateFunctional::DistanceSq {
                target: rho1.values().to_vec(),
                weight: -beta,
            }),
        };
        let est = optimize(&problem, warm.clone(), opt)?;
        let d = crate::torus::h_minus1_distance(est.trajectory.last(), rho1)?;
        rows.push(QuasiPotentialRow {
            beta,
            penalized_action: -est.value,
            control_cost: est.control.cost(),
            terminal_distance: d,
        });
        warm = Some(est.control);
    }
    Ok(rows)
}

/// Solves with the state feedback `eta = feedback(rho)` applied explicitly
/// at the start of each step; returns the trajectory and the applied controls.
pub fn solve_feedback(
    rho0: &GridDensity,
    horizon: f64,
    solver: &SolverConfig,
    feedback: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<(Trajectory, SpaceTimeControl)> {
    solver.validate()?;
    let grid = rho0.grid();
    let n = step_count(horizon, solver.dt)?;
    let pot = RegularizedPotential::new(solver.eps_reg)?;
    let mut states = vec![rho0.values().to_vec()];
    let mut controls = Vec::with_capacity(n);
    let mut iters = 0;
    for step in 0..n {
        let eta = feedback(&states[step]);
        let (x, it) = newton_step(&states[step], &eta, solver.dt, grid.dx(), &pot, solver.newton_tol, solver.newton_max)?;
        iters += it;
        controls.push(eta);
        states.push(x);
    }
    let fw = Forward {
        states,
        value: 0.0,
        newton_iterations: iters,
    };
    let problem = ControlProblem {
        rho0: rho0.clone(),
        horizon,
        solver: solver.clone(),
        block_steps: 1,
        objective: Objective::Terminal(StateFunctional::Constant(0.0)),
    };
    Ok((to_trajectory(&problem, &fw)?, SpaceTimeControl::new(grid, solver.dt, controls)?))
}

/// Discounted objective of a given path and its per-step controls.
pub fn discounted_value(
    h: &StateFunctional,
    alpha: f64,
    traj: &Trajectory,
    control: &SpaceTimeControl,
) -> Result<f64> {
    let grid = traj.grid();
    let mut v = 0.0;
    for k in 1..traj.states.len() {
        let (t0, t1) = (traj.times[k - 1], traj.times[k]);
        let w = (-t0 / alpha).exp() - (-t1 / alpha).exp();
        let eta = control.at(0.5 * (t0 + t1));
        v += w * h.value(grid, traj.states[k].values())? - alpha * w * 0.5 * grid.inner(eta, eta);
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolventCheckRow {
    /// Best found `R_alpha (f_0 - alpha H_0 f_0)(rho0)`.
    pub rceq1_value: f64,
    pub f0: f64,
    pub rceq1_slack: f64,
    pub rceq1_holds: bool,
    /// Feedback-control value of `R_alpha (f_1 - alpha H_1 f_1)(gamma0)`.
    pub rceq2_value: f64,
    pub f1: f64,
    pub rceq2_holds: bool,
}

/// One-sided resolvent inequalities at each sample point. For the sub-side
/// the anchor is `gamma`; for the super-side it is `anchor`.
#[allow(clippy::too_many_arguments)]
pub fn control_property_checks(
    alpha: f64,
    k: f64,
    gamma: &GridDensity,
    anchor: &GridDensity,
    samples: &[GridDensity],
    t_eff: f64,
    solver: &SolverConfig,
    block_steps: usize,
    opt: &OptimizerConfig,
    tol: f64,
) -> Result<Vec<ResolventCheckRow>> {
    let mut rows = Vec::new();
    for rho0 in samples {
        let h0 = StateFunctional::h0_resolvent_payoff(k, alpha, gamma);
        let est = resolvent(h0, alpha, rho0, t_eff, solver, block_steps, opt)?;
        let f0 = 0.5 * k * crate::torus::h_minus1_distance_sq(rho0, gamma)?;
        let slack = est.gap.abs() + est.tail_bound + tol;
        let h1 = StateFunctional::h1_resolvent_payoff(k, alpha, anchor);
        let anchor_vals = anchor.values().to_vec();
        let (traj, ctrl) = solve_feedback(rho0, t_eff, solver, |g| {
            let d: Vec<f64> = anchor_vals.iter().zip(g).map(|(a, b)| a - b).collect();
            let mut u = neg_inv_laplacian_values(&d);
            u = crate::torus::derivative_values(&u);
            u.iter().map(|v| -k * v).collect()
        })?;
        let v2 = discounted_value(&h1, alpha, &traj, &ctrl)?;
        let tail2 = traj
            .states
            .iter()
            .filter_map(|s| h1.value(s.grid(), s.values()).ok())
            .fold(0.0, |a: f64, v| a.max(v.abs()))
            * (-t_eff / alpha).exp();
        let f1 = -0.5 * k * crate::torus::h_minus1_distance_sq(anchor, rho0)?;
        rows.push(ResolventCheckRow {
            rceq1_value: est.value,
            f0,
            rceq1_slack: slack,
            rceq1_holds: est.value <= f0 + slack,
            rceq2_value: v2,
            f1,
            rceq2_holds: v2 >= f1 - tol - tail2,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn problem(objective: Objective) -> ControlProblem {
        let g = TorusGrid::new(16).unwrap();
        ControlProblem {
            rho0: GridDensity::from_fn(g, |x| 1.0 + 0.3 * (2.0 * PI * x).cos()).unwrap(),
            horizon: 0.04,
            solver: SolverConfig::new(0.05, 0.01),
            block_steps: 2,
            objective,
        }
    }

    #[test]
    fn constant_terminal_gradient_is_cost_only() {
        let p = problem(Objective::Terminal(StateFunctional::Constant(2.0)));
        let g = p.grid();
        let c = SpaceTimeControl::from_fn(g, 2, 0.02, |t, x| t + (2.0 * PI * x).sin()).unwrap();
        let (v, grad) = adjoint_gradient(&p, &c).unwrap();
        assert!((v - (2.0 - c.cost())).abs() < 1e-14);
        for (gb, cb) in grad.blocks().iter().zip(c.blocks()) {
            for (a, b) in gb.iter().zip(cb) {
                assert!((a + 2.0 * 0.01 * g.dx() * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blocks_must_divide_steps() {
        let mut p = problem(Objective::Terminal(StateFunctional::Constant(0.0)));
        p.block_steps = 3;
        assert!(p.validate().is_err());
    }

    #[test]
    fn resolvent_requires_long_horizon() {
        let p = problem(Objective::Terminal(StateFunctional::Constant(0.0)));
        let r = resolvent(
            StateFunctional::Constant(1.0),
            0.1,
            &p.rho0,
            0.5,
            &p.solver,
            1,
            &OptimizerConfig::default(),
        );
        assert!(r.is_err());
    }
}
