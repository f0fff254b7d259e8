//! Stochastic two-velocity particle system with same-velocity pair flips.
//!
//! Each particle carries `x in [0, 1)` and `v in {-1, +1}`. Between flips it
//! moves by `dx = c v dt + sqrt(2 tau) dW`. An unordered pair with equal
//! velocities at distance `r` reverses both velocities at rate
//! `(k/N) J_theta(r)`. Flips are sampled by thinning a Poisson stream of
//! proposals built from cell lists of width at least `theta`.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{solve_controlled, SolverConfig, SpaceTimeControl};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::seed::{rng_from_seed, seed_split, seed_split_all};
use crate::torus::{h_minus1_distance, mollify, mollify_field, GridDensity, GridField, TorusGrid};

/// Integral of the profile `exp(-1/(1 - u^2))` over `(0, 1)`.
const BUMP_HALF_INTEGRAL: f64 = 0.221_996_908_084_039_7;

/// Largest allowed per-particle flip probability in one (sub)step.
pub const FLIP_PROBABILITY_CAP: f64 = 0.1;

/// Below this value of `N theta` the neighbor count per particle is small and
/// the mean-field approximation of the pair term is poor.
pub const N_THETA_WARNING: f64 = 10.0;

/// Profile normalization so that `\int_0^{1/2} J = 1/2`, i.e. `J(|z|)` has
/// unit integral over the whole torus.
pub fn kernel_constant() -> f64 {
    1.0 / BUMP_HALF_INTEGRAL
}

/// Interaction profile on `[0, 1/2]`, zero beyond.
pub fn kernel_j(s: f64) -> f64 {
    if s >= 0.5 {
        0.0
    } else {
        kernel_constant() * (-1.0 / (1.0 - 4.0 * s * s)).exp()
    }
}

/// `J(0)`, the maximum of the profile.
pub fn kernel_j_max() -> f64 {
    kernel_constant() * (-1.0f64).exp()
}

/// `J_theta(r) = J(r/theta)/theta`.
pub fn kernel_j_theta(r: f64, theta: f64) -> f64 {
    kernel_j(r / theta) / theta
}

/// Quotient distance on the circle.
pub fn torus_distance(x: f64, y: f64) -> f64 {
    let d = (x - y).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn wrap(x: f64) -> f64 {
    let y = x.rem_euclid(1.0);
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticParams {
    pub c: f64,
    pub k: f64,
    pub tau: f64,
    pub theta: f64,
    pub n: usize,
}

impl KineticParams {
    /// `c = 1/eps`, `k = 1/eps^2`, `tau = eps`, `theta = N^{-1/2}`.
    pub fn hydrodynamic(eps: f64, n: usize) -> Self {
        Self {
            c: 1.0 / eps,
            k: 1.0 / (eps * eps),
            tau: eps,
            theta: (n as f64).powf(-0.5).min(0.5),
            n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.c) || !ok(self.k) || !ok(self.tau) {
            return Err(Error::InvalidParameter("c, k and tau must be finite and nonnegative".into()));
        }
        if !(self.theta > 0.0 && self.theta <= 0.5) {
            return Err(Error::InvalidParameter(format!("theta = {} must lie in (0, 1/2]", self.theta)));
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("particle count must be positive".into()));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if (self.n as f64) * self.theta < N_THETA_WARNING {
            w.push(format!(
                "N theta = {} is below {N_THETA_WARNING}",
                self.n as f64 * self.theta
            ));
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    pub positions: Vec<f64>,
    pub velocities: Vec<i8>,
    pub rng: ChaCha8Rng,
    pub time: f64,
}

impl PartialEq for ParticleEnsemble {
    fn eq(&self, other: &Self) -> bool {
        self.positions == other.positions
            && self.velocities == other.velocities
            && self.time == other.time
            && self.rng.get_seed() == other.rng.get_seed()
            && self.rng.get_stream() == other.rng.get_stream()
            && self.rng.get_word_pos() == other.rng.get_word_pos()
    }
}

impl ParticleEnsemble {
    pub fn new(positions: Vec<f64>, velocities: Vec<i8>, seed: u64) -> Result<Self> {
        if positions.len() != velocities.len() || positions.is_empty() {
            return Err(Error::InvalidParameter("positions and velocities must be nonempty and equal length".into()));
        }
        if velocities.iter().any(|v| *v != 1 && *v != -1) {
            return Err(Error::InvalidParameter("velocities must be +1 or -1".into()));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite position".into()));
        }
        Ok(Self {
            positions: positions.into_iter().map(wrap).collect(),
            velocities,
            rng: rng_from_seed(seed),
            time: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn velocity_sum(&self) -> i64 {
        self.velocities.iter().map(|v| *v as i64).sum()
    }
}

/// Samples `n` particles: positions by inverse CDF of the cell density, and
/// `v = +1` with probability `(rho + eps j) / (2 rho)` in the sampled cell.
pub fn init_ensemble(rho0: &GridDensity, j0: &GridField, eps: f64, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    let grid = rho0.grid();
    if j0.grid() != grid {
        return Err(Error::GridMismatch {
            expected: grid.m(),
            got: j0.grid().m(),
        });
    }
    if n == 0 || !(eps > 0.0) {
        return Err(Error::InvalidParameter("n and eps must be positive".into()));
    }
    let p_plus: Vec<f64> = rho0
        .values()
        .iter()
        .zip(j0.values())
        .map(|(r, j)| {
            let (a, b) = (r + eps * j, r - eps * j);
            if a < -1e-14 || b < -1e-14 {
                return Err(Error::InvalidDensity(format!(
                    "negative split weight ({a}, {b}) for eps = {eps}"
                )));
            }
            Ok(if *r > 0.0 { (a / (2.0 * r)).clamp(0.0, 1.0) } else { 0.5 })
        })
        .collect::<Result<_>>()?;
    let dx = grid.dx();
    let mut cdf = Vec::with_capacity(grid.m());
    let mut acc = 0.0;
    for r in rho0.values() {
        acc += r * dx;
        cdf.push(acc);
    }
    let total = acc;
    let mut rng = rng_from_seed(seed_split(seed, "init"));
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let cell = cdf.partition_point(|c| *c <= u).min(grid.m() - 1);
        let lo = if cell == 0 { 0.0 } else { cdf[cell - 1] };
        let w = rho0.values()[cell] * dx;
        let frac = if w > 0.0 { ((u - lo) / w).clamp(0.0, 1.0) } else { rng.random() };
        positions.push(wrap((cell as f64 + frac) * dx));
        velocities.push(if rng.random::<f64>() < p_plus[cell] { 1 } else { -1 });
    }
    ParticleEnsemble::new(positions, velocities, seed_split(seed, "dynamics"))
}

/// Particles sorted by (velocity, cell) with offsets into the sorted order.
struct CellLists {
    n_cells: usize,
    order: Vec<u32>,
    start: Vec<usize>,
    cell_of: Vec<usize>,
}

impl CellLists {
    fn build(ens: &ParticleEnsemble, theta: f64) -> Self {
        // cells of width >= theta so that every pair within theta/2 is in adjacent cells;
        // with fewer than three cells everything is one cell
        let mut n_cells = (1.0 / theta).floor() as usize;
        if n_cells < 3 {
            n_cells = 1;
        }
        let key = |i: usize| -> usize {
            let v = if ens.velocities[i] > 0 { 1 } else { 0 };
            let c = ((ens.positions[i] * n_cells as f64) as usize).min(n_cells - 1);
            v * n_cells + c
        };
        let n = ens.len();
        let mut counts = vec![0usize; 2 * n_cells + 1];
        let cell_of: Vec<usize> = (0..n).map(key).collect();
        for &k in &cell_of {
            counts[k + 1] += 1;
        }
        for b in 1..counts.len() {
            counts[b] += counts[b - 1];
        }
        let start = counts.clone();
        let mut fill = counts;
        let mut order = vec![0u32; n];
        for (i, &k) in cell_of.iter().enumerate() {
            order[fill[k]] = i as u32;
            fill[k] += 1;
        }
        Self {
            n_cells,
            order,
            start,
            cell_of,
        }
    }

    fn neighbor_cells(&self, key: usize) -> impl Iterator<Item = usize> + '_ {
        let nc = self.n_cells;
        let base = (key / nc) * nc;
        let c = key % nc;
        let (span, offsets) = if nc == 1 { (1, [0, 0, 0]) } else { (3, [nc - 1, 0, 1]) };
        offsets.into_iter().take(span).map(move |d| base + (c + d) % nc)
    }

    fn cell_len(&self, key: usize) -> usize {
        self.start[key + 1] - self.start[key]
    }

    /// Same-velocity particles in the neighboring cells, including `i`.
    fn candidates_incl(&self, i: usize) -> usize {
        self.neighbor_cells(self.cell_of[i]).map(|k| self.cell_len(k)).sum()
    }

    fn candidate_at(&self, i: usize, mut u: usize) -> usize {
        for k in self.neighbor_cells(self.cell_of[i]) {
            let len = self.cell_len(k);
            if u < len {
                return self.order[self.start[k] + u] as usize;
            }
            u -= len;
        }
        unreachable!("candidate index out of range")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub substeps: u64,
    pub proposals: u64,
    pub flips: u64,
    /// Largest per-particle flip-probability bound used.
    pub max_flip_bound: f64,
}

impl StepStats {
    fn merge(&mut self, o: &StepStats) {
        self.substeps += o.substeps;
        self.proposals += o.proposals;
        self.flips += o.flips;
        self.max_flip_bound = self.max_flip_bound.max(o.max_flip_bound);
    }
}

fn substep(ens: &mut ParticleEnsemble, params: &KineticParams, lists: &CellLists, n_max: usize, h: f64, stats: &mut StepStats) {
    let n = ens.len();
    let rate_max = params.k / n as f64 * kernel_j_max() / params.theta;
    if n_max > 0 && params.k > 0.0 {
        let q = rate_max * h;
        stats.max_flip_bound = stats.max_flip_bound.max(q * n_max as f64);
        let lambda = 0.5 * n as f64 * n_max as f64 * q;
        let proposals = Poisson::new(lambda).map(|p| p.sample(&mut ens.rng) as u64).unwrap_or(0);
        stats.proposals += proposals;
        let mut flipped = vec![false; n];
        for _ in 0..proposals {
            let i = ens.rng.random_range(0..n);
            let incl = lists.candidates_incl(i);
            let ni = incl - 1;
            if ni == 0 || ens.rng.random::<f64>() * n_max as f64 >= ni as f64 {
                continue;
            }
            let j = loop {
                let j = lists.candidate_at(i, ens.rng.random_range(0..incl));
                if j != i {
                    break j;
                }
            };
            let r = torus_distance(ens.positions[i], ens.positions[j]);
            let accept = kernel_j_theta(r, params.theta) / (kernel_j_max() / params.theta);
            if ens.rng.random::<f64>() >= accept {
                continue;
            }
            if flipped[i] || flipped[j] {
                continue;
            }
            flipped[i] = true;
            flipped[j] = true;
            ens.velocities[i] = -ens.velocities[i];
            ens.velocities[j] = -ens.velocities[j];
            stats.flips += 1;
        }
    }
    let noise = (2.0 * params.tau * h).sqrt();
    for i in 0..n {
        let mut x = ens.positions[i] + params.c * ens.velocities[i] as f64 * h;
        if noise > 0.0 {
            let z: f64 = StandardNormal.sample(&mut ens.rng);
            x += noise * z;
        }
        ens.positions[i] = wrap(x);
    }
    ens.time += h;
    stats.substeps += 1;
}

/// Advances by `dt`, subdividing so that the per-particle flip-probability
/// bound `(k/N) max J_theta n_max h` never exceeds [`FLIP_PROBABILITY_CAP`].
pub fn step_particles(ens: &mut ParticleEnsemble, params: &KineticParams, dt: f64) -> Result<StepStats> {
    params.validate()?;
    if params.n != ens.len() {
        return Err(Error::InvalidParameter(format!(
            "params.n = {} but ensemble has {} particles",
            params.n,
            ens.len()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let rate_max = params.k / ens.len() as f64 * kernel_j_max() / params.theta;
    let mut stats = StepStats::default();
    let mut remaining = dt;
    let t_end = ens.time + dt;
    while remaining > 0.0 {
        let lists = CellLists::build(ens, params.theta);
        let n_max = (0..ens.len()).map(|i| lists.candidates_incl(i) - 1).max().unwrap_or(0);
        let bound = rate_max * n_max as f64;
        let pieces = if bound > 0.0 {
            (remaining * bound / FLIP_PROBABILITY_CAP).ceil().max(1.0)
        } else {
            1.0
        };
        let h = remaining / pieces;
        let mut s = StepStats::default();
        substep(ens, params, &lists, n_max, h, &mut s);
        stats.merge(&s);
        remaining = if pieces <= 1.0 { 0.0 } else { remaining - h };
        if remaining < 1e-15 * dt {
            remaining = 0.0;
        }
    }
    ens.time = t_end;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalField {
    pub grid: TorusGrid,
    pub rho_hat: GridDensity,
    pub j_hat: GridField,
    pub bandwidth: f64,
}

/// Cloud-in-cell deposit followed by mollification of half-width `bandwidth`.
pub fn empirical_fields(ens: &ParticleEnsemble, grid: TorusGrid, bandwidth: f64, eps: f64) -> Result<EmpiricalField> {
    if !(bandwidth >= 2.0 * grid.dx()) {
        return Err(Error::InvalidParameter(format!(
            "bandwidth {bandwidth} is below two cells"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter("eps must be positive".into()));
    }
    let m = grid.m();
    let n = ens.len() as f64;
    let mut rho = vec![0.0; m];
    let mut flux = vec![0.0; m];
    for (x, v) in ens.positions.iter().zip(&ens.velocities) {
        let s = x * m as f64 - 0.5;
        let fl = s.floor();
        let w = s - fl;
        let i0 = (fl as i64).rem_euclid(m as i64) as usize;
        let i1 = (i0 + 1) % m;
        let a = 1.0 / (n * grid.dx());
        rho[i0] += (1.0 - w) * a;
        rho[i1] += w * a;
        let b = *v as f64 * a / eps;
        flux[i0] += (1.0 - w) * b;
        flux[i1] += w * b;
    }
    let rho_hat = mollify(&GridDensity::normalized(grid, rho)?, bandwidth)?;
    let j_hat = mollify_field(&GridField::new(grid, flux)?, bandwidth)?;
    Ok(EmpiricalField {
        grid,
        rho_hat,
        j_hat,
        bandwidth,
    })
}

/// Expected `H^{-1}` size of the sampling error of `n` independent
/// particles, `(1/(12 n))^{1/2}`.
pub fn mc_bound(n: usize) -> f64 {
    (1.0 / (12.0 * n as f64)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSchedule {
    pub dt: f64,
    pub record_every: usize,
    pub grid_m: usize,
    pub bandwidth: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventStatistics {
    pub steps: usize,
    pub substeps: u64,
    pub proposals: u64,
    pub flips: u64,
    pub max_flip_bound: f64,
    /// `(t, sum v)` at each recorded time.
    pub velocity_sum: Vec<(f64, i64)>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationResult {
    pub times: Vec<f64>,
    pub fields: Vec<EmpiricalField>,
    pub stats: EventStatistics,
}

pub fn simulate(
    ens: &mut ParticleEnsemble,
    params: &KineticParams,
    horizon: f64,
    schedule: &RecordSchedule,
) -> Result<SimulationResult> {
    if schedule.record_every == 0 {
        return Err(Error::InvalidParameter("record_every must be positive".into()));
    }
    let grid = TorusGrid::new(schedule.grid_m)?;
    let n_steps = crate::diffusion::step_count(horizon, schedule.dt)?;
    let clock = Instant::now();
    let t0 = ens.time;
    let mut times = vec![t0];
    let mut fields = vec![empirical_fields(ens, grid, schedule.bandwidth, schedule.eps)?];
    let mut total = StepStats::default();
    let mut vsum = vec![(t0, ens.velocity_sum())];
    for s in 0..n_steps {
        let st = step_particles(ens, params, schedule.dt)?;
        total.merge(&st);
        if (s + 1) % schedule.record_every == 0 || s + 1 == n_steps {
            // assign the nominal time to avoid drift from substep sums
            ens.time = t0 + (s + 1) as f64 * schedule.dt;
            times.push(ens.time);
            fields.push(empirical_fields(ens, grid, schedule.bandwidth, schedule.eps)?);
            vsum.push((ens.time, ens.velocity_sum()));
        }
    }
    Ok(SimulationResult {
        times,
        fields,
        stats: EventStatistics {
            steps: n_steps,
            substeps: total.substeps,
            proposals: total.proposals,
            flips: total.flips,
            max_flip_bound: total.max_flip_bound,
            velocity_sum: vsum,
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HydroRow {
    pub eps: f64,
    pub n: usize,
    pub replica: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HydroSummary {
    pub eps: f64,
    pub n: usize,
    pub mean: f64,
    /// Standard error of the replica mean.
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydroConfig {
    pub grid_m: usize,
    /// Mollifier half-width in cells.
    pub bandwidth_cells: f64,
    pub replicas: usize,
    pub master_seed: u64,
    /// Outer step as a fraction of `eps^2`; flips subdivide further.
    pub dt_per_eps2: f64,
    pub reference_dt: f64,
    pub reference_eps_reg: f64,
}

impl Default for HydroConfig {
    fn default() -> Self {
        Self {
            grid_m: 128,
            bandwidth_cells: 2.0,
            replicas: 8,
            master_seed: 0,
            dt_per_eps2: 0.25,
            reference_dt: 1e-4,
            reference_eps_reg: 1e-3,
        }
    }
}

/// One replica of a hydrodynamic sweep cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HydroJob {
    pub eps: f64,
    pub n: usize,
    pub replica: usize,
}

impl HydroJob {
    pub fn label(&self) -> String {
        format!("hydro/eps={:e}/n={}/rep={}", self.eps, self.n, self.replica)
    }

    /// Outer step count and step length for `horizon`.
    pub fn schedule(&self, horizon: f64, cfg: &HydroConfig) -> (usize, f64) {
        let target = cfg.dt_per_eps2 * self.eps * self.eps;
        let steps = (horizon / target).ceil().max(1.0);
        (steps as usize, horizon / steps)
    }
}

fn check_hydro_input(rho0: &GridDensity, cfg: &HydroConfig) -> Result<TorusGrid> {
    if cfg.replicas == 0 {
        return Err(Error::InvalidParameter("replicas must be positive".into()));
    }
    if rho0.min() <= 0.0 {
        return Err(Error::InvalidDensity("positive initial density required".into()));
    }
    let grid = TorusGrid::new(cfg.grid_m)?;
    if rho0.grid() != grid {
        return Err(Error::GridMismatch {
            expected: cfg.grid_m,
            got: rho0.grid().m(),
        });
    }
    Ok(grid)
}

/// Uncontrolled diffusion from `rho0` at `horizon`, the target of the sweep.
pub fn hydro_reference(rho0: &GridDensity, horizon: f64, cfg: &HydroConfig) -> Result<GridDensity> {
    let grid = check_hydro_input(rho0, cfg)?;
    let scfg = SolverConfig {
        record_every: usize::MAX / 2,
        ..SolverConfig::new(cfg.reference_eps_reg, cfg.reference_dt)
    };
    let reference = solve_controlled(rho0, &SpaceTimeControl::zeros(grid, 1, horizon)?, horizon, &scfg)?;
    Ok(reference.last().clone())
}

/// Initial ensemble of `job`, sampled from `rho0` and the well-prepared flux
/// `j_0 = -D rho_0 / (2 rho_0)`.
pub fn hydro_initial(rho0: &GridDensity, job: &HydroJob, cfg: &HydroConfig) -> Result<ParticleEnsemble> {
    let grid = check_hydro_input(rho0, cfg)?;
    let drho = crate::torus::derivative_values(rho0.values());
    let j0 = GridField::new(
        grid,
        drho.iter().zip(rho0.values()).map(|(d, r)| -d / (2.0 * r)).collect(),
    )?;
    init_ensemble(rho0, &j0, job.eps, job.n, seed_split(cfg.master_seed, &job.label()))
}

/// Runs `job` to `horizon` from `ens` (fresh or resumed) and scores the
/// empirical density against `rho_ref`. `checkpoint` is called with the
/// ensemble after every `every`-th outer step (never when `every` is 0).
pub fn hydro_run(
    mut ens: ParticleEnsemble,
    rho_ref: &GridDensity,
    job: &HydroJob,
    horizon: f64,
    cfg: &HydroConfig,
    every: usize,
    checkpoint: &mut dyn FnMut(&ParticleEnsemble) -> Result<()>,
) -> Result<HydroRow> {
    let grid = rho_ref.grid();
    let params = KineticParams::hydrodynamic(job.eps, job.n);
    let (steps, dt) = job.schedule(horizon, cfg);
    let done = (ens.time / dt).round() as usize;
    if done > steps || (done as f64 * dt - ens.time).abs() > 1e-9 * horizon {
        return Err(Error::InvalidParameter(format!(
            "resumed time {} is not a step of this schedule",
            ens.time
        )));
    }
    for step in done..steps {
        step_particles(&mut ens, &params, dt)?;
        if every > 0 && (step + 1) % every == 0 && step + 1 < steps {
            checkpoint(&ens)?;
        }
    }
    let f = empirical_fields(&ens, grid, cfg.bandwidth_cells * grid.dx(), job.eps)?;
    Ok(HydroRow {
        eps: job.eps,
        n: job.n,
        replica: job.replica,
        error: h_minus1_distance(&f.rho_hat, rho_ref)?,
    })
}

/// Mean and standard error of the replica errors per sweep cell.
pub fn hydro_summarize(cells: &[(f64, usize)], rows: &[HydroRow]) -> Vec<HydroSummary> {
    cells
        .iter()
        .map(|&(eps, n)| {
            let errs: Vec<f64> = rows.iter().filter(|r| r.eps == eps && r.n == n).map(|r| r.error).collect();
            let k = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / k;
            let var = if k > 1.0 {
                errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            HydroSummary {
                eps,
                n,
                mean,
                stderr: (var / k).sqrt(),
            }
        })
        .collect()
}

/// Jobs of a sweep in (cell, replica) order.
pub fn hydro_jobs(cells: &[(f64, usize)], replicas: usize) -> Vec<HydroJob> {
    cells
        .iter()
        .flat_map(|&(eps, n)| (0..replicas).map(move |replica| HydroJob { eps, n, replica }))
        .collect()
}

/// Particle runs from well-prepared data under the hydrodynamic scaling,
/// compared with the uncontrolled diffusion. Replicas run in parallel.
pub fn hydro_sweep(
    rho0: &GridDensity,
    cells: &[(f64, usize)],
    horizon: f64,
    cfg: &HydroConfig,
) -> Result<(Vec<HydroRow>, Vec<HydroSummary>)> {
    let rho_ref = hydro_reference(rho0, horizon, cfg)?;
    let jobs = hydro_jobs(cells, cfg.replicas);
    let labels: Vec<String> = jobs.iter().map(HydroJob::label).collect();
    seed_split_all(cfg.master_seed, &labels)?;
    let rows: Vec<Result<HydroRow>> = jobs
        .par_iter()
        .map(|job| {
            let ens = hydro_initial(rho0, job, cfg)?;
            hydro_run(ens, &rho_ref, job, horizon, cfg, 0, &mut |_| Ok(()))
        })
        .collect();
    let rows: Vec<HydroRow> = rows.into_iter().collect::<Result<_>>()?;
    let summary = hydro_summarize(cells, &rows);
    Ok((rows, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairCorrelation {
    pub r_lo: f64,
    pub r_hi: f64,
    pub pairs: usize,
    /// Sample mean of `v_i v_j` over pairs in the distance band.
    pub mean_vv: f64,
    /// Sample mean of `m(x_i) m(x_j)` with `m = eps j_hat / rho_hat`.
    pub product_form: f64,
    pub covariance: f64,
}

/// Velocity correlation of randomly drawn pairs at distance in `[r_lo, r_hi)`
/// against the product of local mean velocities.
pub fn velocity_pair_correlation(
    ens: &ParticleEnsemble,
    field: &EmpiricalField,
    eps: f64,
    r_lo: f64,
    r_hi: f64,
    max_pairs: usize,
    seed: u64,
) -> Result<PairCorrelation> {
    if !(0.0 <= r_lo && r_lo < r_hi && r_hi <= 0.5) {
        return Err(Error::InvalidParameter("need 0 <= r_lo < r_hi <= 1/2".into()));
    }
    let n = ens.len();
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two particles".into()));
    }
    let grid = field.grid;
    let mean_v = |x: f64| -> f64 {
        let i = ((x * grid.m() as f64) as usize).min(grid.m() - 1);
        let r = field.rho_hat.values()[i];
        if r > 0.0 {
            (eps * field.j_hat.values()[i] / r).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    };
    let mut rng = rng_from_seed(seed);
    let (mut s_vv, mut s_mm, mut pairs) = (0.0, 0.0, 0usize);
    let attempts = max_pairs.saturating_mul(64).max(1024);
    for _ in 0..attempts {
        if pairs >= max_pairs {
            break;
        }
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let r = torus_distance(ens.positions[i], ens.positions[j]);
        if r < r_lo || r >= r_hi {
            continue;
        }
        s_vv += (ens.velocities[i] * ens.velocities[j]) as f64;
        s_mm += mean_v(ens.positions[i]) * mean_v(ens.positions[j]);
        pairs += 1;
    }
    let p = pairs.max(1) as f64;
    Ok(PairCorrelation {
        r_lo,
        r_hi,
        pairs,
        mean_vv: s_vv / p,
        product_form: s_mm / p,
        covariance: (s_vv - s_mm) / p,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HKCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, count, time, generator seed, stream and
/// word position, then positions and velocities. All little-endian.
pub fn checkpoint_bytes(ens: &ParticleEnsemble) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 9 * ens.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ens.len() as u64).to_le_bytes());
    out.extend_from_slice(&ens.time.to_le_bytes());
    out.extend_from_slice(&ens.rng.get_seed());
    out.extend_from_slice(&ens.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&ens.rng.get_word_pos().to_le_bytes());
    for x in &ens.positions {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend(ens.velocities.iter().map(|v| *v as u8));
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ParticleEnsemble> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (a, b) = r.split_at(n);
        r = b;
        Ok(a)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let time = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let seed: [u8; 32] = take(32)?.try_into().unwrap();
    let stream = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
    }
    let velocities: Vec<i8> = take(n)?.iter().map(|b| *b as i8).collect();
    if !take(1).is_err() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    if velocities.iter().any(|v| *v != 1 && *v != -1) || positions.iter().any(|x| !(0.0..1.0).contains(x)) {
        return Err(Error::Checkpoint("corrupt particle state".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(ParticleEnsemble {
        positions,
        velocities,
        rng,
        time,
    })
}

pub fn save_checkpoint(ens: &ParticleEnsemble, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ens))
}

pub fn load_checkpoint(path: &Path) -> Result<ParticleEnsemble> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}

/// Writes the checkpoint to any sink.
pub fn write_checkpoint(ens: &ParticleEnsemble, w: &mut impl Write) -> Result<()> {
    w.write_all(&checkpoint_bytes(ens))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_has_unit_torus_mass() {
        // \int_{-1/2}^{1/2} J(|z|) dz = 1
        let n = 200_000;
        let h = 0.5 / n as f64;
        let s: f64 = (0..n).map(|i| kernel_j((i as f64 + 0.5) * h)).sum::<f64>() * h;
        assert!((2.0 * s - 1.0).abs() < 1e-9, "{s}");
        assert!(kernel_j(0.0) > 0.0);
        assert_eq!(kernel_j(0.5), 0.0);
    }

    #[test]
    fn kernel_constant_value() {
        assert!((kernel_constant() - 4.5045).abs() < 1e-4);
    }

    #[test]
    fn distance_uses_quotient_metric() {
        assert!((torus_distance(0.05, 0.95) - 0.1).abs() < 1e-15);
        assert_eq!(torus_distance(0.3, 0.3 + 1.0), 0.0);
    }

    #[test]
    fn extreme_flux_gives_all_positive_velocities() {
        let g = TorusGrid::new(16).unwrap();
        let rho = GridDensity::from_fn(g, |x| 1.0 + 0.5 * (6.283185307179586 * x).sin()).unwrap();
        let eps = 0.2;
        let j = GridField::new(g, rho.values().iter().map(|r| r / eps).collect()).unwrap();
        let ens = init_ensemble(&rho, &j, eps, 500, 3).unwrap();
        assert!(ens.velocities.iter().all(|v| *v == 1));
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let g = TorusGrid::new(16).unwrap();
        let rho = GridDensity::uniform(g);
        let j = GridField::zeros(g);
        let params = KineticParams::hydrodynamic(0.2, 400);
        let mut a = init_ensemble(&rho, &j, 0.2, 400, 11).unwrap();
        step_particles(&mut a, &params, 0.002).unwrap();
        let mut b = checkpoint_from_bytes(&checkpoint_bytes(&a)).unwrap();
        assert_eq!(a, b);
        step_particles(&mut a, &params, 0.002).unwrap();
        step_particles(&mut b, &params, 0.002).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resumed_hydro_run_matches_uninterrupted() {
        let g = TorusGrid::new(32).unwrap();
        let rho0 = GridDensity::from_fn(g, |x| 1.0 + 0.3 * (2.0 * std::f64::consts::PI * x).cos()).unwrap();
        let cfg = HydroConfig {
            grid_m: 32,
            replicas: 1,
            reference_dt: 1e-3,
            ..HydroConfig::default()
        };
        let job = HydroJob { eps: 0.3, n: 2000, replica: 0 };
        let horizon = 0.05;
        let rho_ref = hydro_reference(&rho0, horizon, &cfg).unwrap();
        let mut saved = Vec::new();
        let full = hydro_run(hydro_initial(&rho0, &job, &cfg).unwrap(), &rho_ref, &job, horizon, &cfg, 1, &mut |e| {
            saved.push(checkpoint_bytes(e));
            Ok(())
        })
        .unwrap();
        assert!(saved.len() >= 2);
        let resumed = checkpoint_from_bytes(&saved[1]).unwrap();
        let again = hydro_run(resumed, &rho_ref, &job, horizon, &cfg, 0, &mut |_| Ok(())).unwrap();
        assert_eq!(full.error.to_bits(), again.error.to_bits());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let ens = ParticleEnsemble::new(vec![0.1, 0.2], vec![1, -1], 0).unwrap();
        let mut bytes = checkpoint_bytes(&ens);
        bytes[0] = b'X';
        assert!(checkpoint_from_bytes(&bytes).is_err());
        let bytes = checkpoint_bytes(&ens);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
