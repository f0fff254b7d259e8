//! Effective Hamiltonian of the flux cell problem.
//!
//! With `alpha = rho(x)`, `beta = D log rho(x)` and tilt `P = D phi(x)`, the
//! microscopic Hamiltonian is `h(u, p) = -(2 alpha u + beta) p + 2 p^2` and
//! the effective constant is `E = -beta P / 2 + P^2 / 2`. It is computed in
//! closed form, by a grid supremum, and as the principal eigenvalue of the
//! tilted generator with viscosity `kappa`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::hamiltonian_h;
use crate::linalg::largest_eigenvalue;
use crate::torus::{derivative_values, GridDensity, GridField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub alpha: f64,
    pub beta: f64,
    pub p: f64,
}

impl CellSpec {
    pub fn new(alpha: f64, beta: f64, p: f64) -> Result<Self> {
        let s = Self { alpha, beta, p };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !self.beta.is_finite() || !self.p.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cell spec needs alpha > 0 and finite beta, P: {self:?}"
            )));
        }
        Ok(())
    }

    /// The 27-point lattice `alpha in {0.5, 1, 2}`, `beta in {-1, 0, 2}`, `P in {-1, 0, 1}`.
    pub fn lattice() -> Vec<CellSpec> {
        let mut out = Vec::with_capacity(27);
        for &alpha in &[0.5, 1.0, 2.0] {
            for &beta in &[-1.0, 0.0, 2.0] {
                for &p in &[-1.0, 0.0, 1.0] {
                    out.push(CellSpec { alpha, beta, p });
                }
            }
        }
        out
    }
}

/// `h(u, p) = -(2 alpha u + beta) p + 2 p^2`.
pub fn micro_h(upsilon: f64, p: f64, spec: &CellSpec) -> f64 {
    -(2.0 * spec.alpha * upsilon + spec.beta) * p + 2.0 * p * p
}

/// `h(u, p) + alpha P u`.
pub fn micro_h_tilted(upsilon: f64, p: f64, spec: &CellSpec) -> f64 {
    micro_h(upsilon, p, spec) + spec.alpha * spec.p * upsilon
}

/// Free energy `f(u) = (alpha u^2 + beta u) / 4`.
pub fn micro_f(upsilon: f64, spec: &CellSpec) -> f64 {
    0.25 * (spec.alpha * upsilon * upsilon + spec.beta * upsilon)
}

/// `f'(u) = (2 alpha u + beta) / 4`.
pub fn micro_df(upsilon: f64, spec: &CellSpec) -> f64 {
    0.25 * (2.0 * spec.alpha * upsilon + spec.beta)
}

/// `h - 2 (|p - f'|^2 - |f'|^2)`; zero up to rounding.
pub fn decomposition_residual(upsilon: f64, p: f64, spec: &CellSpec) -> f64 {
    let df = micro_df(upsilon, spec);
    micro_h(upsilon, p, spec) - 2.0 * ((p - df).powi(2) - df * df)
}

pub fn effective_h_closed(spec: &CellSpec) -> f64 {
    -0.5 * spec.beta * spec.p + 0.5 * spec.p * spec.p
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariationalResult {
    pub value: f64,
    pub argmax: f64,
    /// `alpha h^2 / 2` with `h` the grid spacing: the curvature bound on
    /// the gap between the grid and true maxima.
    pub grid_bound: f64,
}

/// `sup_u (alpha u P - 2 |f'(u)|^2)` over `n` equispaced points of `[lo, hi]`.
pub fn effective_h_variational(spec: &CellSpec, lo: f64, hi: f64, n: usize) -> Result<VariationalResult> {
    spec.validate()?;
    if !(lo < hi) || n < 3 {
        return Err(Error::InvalidParameter("need lo < hi and at least 3 points".into()));
    }
    let h = (hi - lo) / (n - 1) as f64;
    let g = |u: f64| spec.alpha * u * spec.p - 2.0 * micro_df(u, spec).powi(2);
    let (mut best, mut arg, mut idx) = (f64::NEG_INFINITY, lo, 0);
    for i in 0..n {
        let u = lo + i as f64 * h;
        let v = g(u);
        if v > best {
            best = v;
            arg = u;
            idx = i;
        }
    }
    if idx == 0 || idx == n - 1 {
        return Err(Error::InvalidParameter(format!(
            "maximizer at the grid boundary u = {arg}; widen the grid"
        )));
    }
    // the objective is a concave parabola with curvature alpha^2 / 2
    Ok(VariationalResult {
        value: best,
        argmax: arg,
        grid_bound: 0.5 * spec.alpha * spec.alpha * 0.25 * h * h,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectorReport {
    pub e_closed: f64,
    /// Residual of `psi' = P/2`.
    pub smooth_branch_residual: f64,
    /// Residual of `psi' = (2 alpha u + beta)/2 - P/2`.
    pub second_branch_residual: f64,
}

/// Max residual of `h(u, psi'(u)) + alpha P u - E` over the grid for both branches.
pub fn corrector_check(spec: &CellSpec, grid: &[f64]) -> Result<CorrectorReport> {
    spec.validate()?;
    let e = effective_h_closed(spec);
    let (mut r1, mut r2) = (0.0f64, 0.0f64);
    for &u in grid {
        let p1 = 0.5 * spec.p;
        let p2 = 0.5 * (2.0 * spec.alpha * u + spec.beta) - 0.5 * spec.p;
        r1 = r1.max((micro_h_tilted(u, p1, spec) - e).abs());
        r2 = r2.max((micro_h_tilted(u, p2, spec) - e).abs());
    }
    Ok(CorrectorReport {
        e_closed: e,
        smooth_branch_residual: r1,
        second_branch_residual: r2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundStateConfig {
    pub kappa: f64,
    /// Half-width of the truncated domain `[-R, R]`.
    pub r: f64,
    /// Interior grid points.
    pub mv: usize,
}

impl GroundStateConfig {
    /// Smallest admissible half-width for `spec` and `kappa`.
    pub fn min_half_width(spec: &CellSpec, kappa: f64) -> f64 {
        (spec.beta / (2.0 * spec.alpha)).abs() + 10.0 * (kappa / spec.alpha).sqrt() + spec.p.abs() / spec.alpha
    }

    /// Admissible half-width and a spacing resolving both the width
    /// `(2 kappa / alpha)^{1/2}` of the ground state and the length
    /// `kappa / |P|` over which the weight varies near its peak.
    pub fn auto(spec: &CellSpec, kappa: f64) -> Self {
        let r = Self::min_half_width(spec, kappa);
        let sd = (2.0 * kappa / spec.alpha).sqrt();
        let mut h = sd / 40.0;
        if spec.p != 0.0 {
            h = h.min(kappa / (10.0 * spec.p.abs()));
        }
        let mv = ((2.0 * r / h).ceil() as usize).max(400);
        Self { kappa, r, mv }
    }

    pub fn validate(&self, spec: &CellSpec) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter("kappa must be positive".into()));
        }
        let rmin = Self::min_half_width(spec, self.kappa);
        if self.r < rmin {
            return Err(Error::InvalidParameter(format!(
                "half-width {} below the admissible {rmin}",
                self.r
            )));
        }
        if self.mv < 400 {
            return Err(Error::InvalidParameter(format!("Mv = {} below 400", self.mv)));
        }
        Ok(())
    }
}

/// Principal eigenvalue of the symmetrized finite-difference operator with
/// `n` interior points on `[-r, r]`, Dirichlet ends.
fn discrete_energy(spec: &CellSpec, kappa: f64, r: f64, n: usize) -> f64 {
    let h = 2.0 * r / (n + 1) as f64;
    let lw = |u: f64| -(spec.alpha * u * u + spec.beta * u) / (2.0 * kappa);
    let node = |i: usize| -r + (i + 1) as f64 * h;
    let c = 2.0 * kappa * kappa / (h * h);
    let mut d = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        let u = node(i);
        let l = lw(u);
        let lm = lw(u - 0.5 * h);
        let lp = lw(u + 0.5 * h);
        d.push(-c * ((lm - l).exp() + (lp - l).exp()) + spec.alpha * spec.p * u);
        if i + 1 < n {
            let l1 = lw(node(i + 1));
            e.push(c * (lp - 0.5 * (l + l1)).exp());
        }
    }
    largest_eigenvalue(&d, &e)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundStateResult {
    /// Richardson-extrapolated principal eigenvalue.
    pub energy: f64,
    pub coarse: f64,
    pub fine: f64,
    /// `|fine - coarse| / 3`.
    pub discretization_estimate: f64,
    /// Change when the half-width and point count are both doubled.
    pub truncation_estimate: f64,
}

pub fn ground_state_energy(spec: &CellSpec, gcfg: &GroundStateConfig) -> Result<GroundStateResult> {
    spec.validate()?;
    gcfg.validate(spec)?;
    let coarse = discrete_energy(spec, gcfg.kappa, gcfg.r, gcfg.mv);
    let fine = discrete_energy(spec, gcfg.kappa, gcfg.r, 2 * gcfg.mv + 1);
    let energy = (4.0 * fine - coarse) / 3.0;
    // doubled domain at the same spacing: 2(n+1) - 1 interior points
    let wide_c = discrete_energy(spec, gcfg.kappa, 2.0 * gcfg.r, 2 * gcfg.mv + 1);
    let wide_f = discrete_energy(spec, gcfg.kappa, 2.0 * gcfg.r, 4 * gcfg.mv + 3);
    let wide = (4.0 * wide_f - wide_c) / 3.0;
    let truncation = (wide - energy).abs();
    if truncation > 1e-6 {
        return Err(Error::InvalidParameter(format!(
            "ground state sensitive to truncation ({truncation:e}); increase R"
        )));
    }
    Ok(GroundStateResult {
        energy,
        coarse,
        fine,
        discretization_estimate: (fine - coarse).abs() / 3.0,
        truncation_estimate: truncation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KappaRow {
    pub alpha: f64,
    pub beta: f64,
    pub p: f64,
    pub kappa: f64,
    pub e_kappa: f64,
    pub e_closed: f64,
    pub abs_diff: f64,
}

/// Ground-state energies for each `kappa` (strictly decreasing list).
pub fn kappa_sweep(spec: &CellSpec, kappas: &[f64]) -> Result<Vec<KappaRow>> {
    spec.validate()?;
    if kappas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("kappa list must be strictly decreasing".into()));
    }
    let e_closed = effective_h_closed(spec);
    kappas
        .par_iter()
        .map(|&kappa| {
            let g = ground_state_energy(spec, &GroundStateConfig::auto(spec, kappa))?;
            Ok(KappaRow {
                alpha: spec.alpha,
                beta: spec.beta,
                p: spec.p,
                kappa,
                e_kappa: g.energy,
                e_closed,
                abs_diff: (g.energy - e_closed).abs(),
            })
        })
        .collect()
}

/// `\int E[D phi; rho, D log rho] dx`.
pub fn macro_assembly(rho: &GridDensity, phi: &GridField) -> Result<f64> {
    if rho.grid() != phi.grid() {
        return Err(Error::GridMismatch {
            expected: rho.grid().m(),
            got: phi.grid().m(),
        });
    }
    if rho.min() <= 0.0 {
        return Err(Error::InvalidDensity("macro assembly needs a positive density".into()));
    }
    let beta = derivative_values(&rho.log_values());
    let dphi = derivative_values(phi.values());
    let vals: Vec<f64> = rho
        .values()
        .iter()
        .zip(beta.iter().zip(&dphi))
        .map(|(&a, (&b, &p))| effective_h_closed(&CellSpec { alpha: a, beta: b, p }))
        .collect();
    Ok(rho.grid().integrate(&vals))
}

/// Density-flux pair with kinetic components `mu(x, +-1) = (rho +- eps j) / 2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KineticPair {
    rho: GridDensity,
    j: GridField,
    eps: f64,
}

impl KineticPair {
    pub fn new(rho: GridDensity, j: GridField, eps: f64) -> Result<Self> {
        if rho.grid() != j.grid() {
            return Err(Error::GridMismatch {
                expected: rho.grid().m(),
                got: j.grid().m(),
            });
        }
        let p = Self { rho, j, eps };
        p.check_nonnegative(eps)?;
        Ok(p)
    }

    fn check_nonnegative(&self, eps: f64) -> Result<()> {
        let bad = self
            .rho
            .values()
            .iter()
            .zip(self.j.values())
            .any(|(r, j)| r - eps * j.abs() < 0.0);
        if bad {
            return Err(Error::InvalidDensity(format!("negative kinetic component at eps = {eps}")));
        }
        Ok(())
    }

    pub fn rho(&self) -> &GridDensity {
        &self.rho
    }

    pub fn j(&self) -> &GridField {
        &self.j
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `mu(., v)` at scaling `eps`, `v = +1` or `-1`.
    pub fn mu_at(&self, v: f64, eps: f64) -> Vec<f64> {
        self.rho
            .values()
            .iter()
            .zip(self.j.values())
            .map(|(r, j)| 0.5 * (r + v * eps * j))
            .collect()
    }

    pub fn mu(&self, v: f64) -> Vec<f64> {
        self.mu_at(v, self.eps)
    }
}

/// `<D phi, j> + <xi, -D rho - 2 rho j> + 2 \int xi^2 rho^2`.
pub fn limit_h(rho: &GridDensity, j: &GridField, phi: &GridField, xi: &[f64]) -> Result<f64> {
    let g = rho.grid();
    if j.grid() != g || phi.grid() != g || xi.len() != g.m() {
        return Err(Error::GridMismatch {
            expected: g.m(),
            got: j.grid().m(),
        });
    }
    let dphi = derivative_values(phi.values());
    let drho = derivative_values(rho.values());
    let r = rho.values();
    let jv = j.values();
    let mut s = g.inner(&dphi, jv);
    for i in 0..g.m() {
        s += g.dx() * (xi[i] * (-drho[i] - 2.0 * r[i] * jv[i]) + 2.0 * xi[i] * xi[i] * r[i] * r[i]);
    }
    Ok(s)
}

/// `xi = D phi / (2 rho)`.
pub fn corrector_xi(rho: &GridDensity, phi: &GridField) -> Vec<f64> {
    derivative_values(phi.values())
        .iter()
        .zip(rho.values())
        .map(|(d, r)| d / (2.0 * r))
        .collect()
}

/// `H_eps f_eps` for `f_eps = <rho, phi> + eps^2 <j, xi>`: transport terms
/// plus `(1/(2 eps^2)) sum_v \int (e^{-4 v eps xi} - 1) mu^2`.
pub fn prelimit_h(pair: &KineticPair, phi: &GridField, eps: f64) -> Result<f64> {
    let rho = pair.rho();
    let g = rho.grid();
    pair.check_nonnegative(eps)?;
    let xi = corrector_xi(rho, phi);
    let dj = derivative_values(pair.j().values());
    let drho = derivative_values(rho.values());
    let mut s = 0.0;
    for i in 0..g.m() {
        s -= phi.values()[i] * dj[i];
        s -= xi[i] * drho[i];
    }
    s *= g.dx();
    let mut coll = 0.0;
    for v in [1.0, -1.0] {
        let mu = pair.mu_at(v, eps);
        for i in 0..g.m() {
            coll += (-4.0 * v * eps * xi[i]).exp_m1() * mu[i] * mu[i];
        }
    }
    Ok(s + coll * g.dx() / (2.0 * eps * eps))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HepsRow {
    pub eps: f64,
    pub h_eps: f64,
    pub h0: f64,
    pub abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HepsReport {
    /// `|H(rho, j; phi, xi) - H(rho, phi)|`.
    pub cancellation_residual: f64,
    pub rows: Vec<HepsRow>,
    /// Least-squares slope of `log |diff|` against `log eps`.
    pub slope: f64,
}

pub fn heps_convergence(pair: &KineticPair, phi: &GridField, eps_list: &[f64]) -> Result<HepsReport> {
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidParameter("eps list must be positive and nonempty".into()));
    }
    let rho = pair.rho();
    if rho.min() <= 0.0 {
        return Err(Error::InvalidDensity("positive density required".into()));
    }
    let h0 = hamiltonian_h(rho, phi)?;
    let xi = corrector_xi(rho, phi);
    let cancellation_residual = (limit_h(rho, pair.j(), phi, &xi)? - h0).abs();
    let rows: Vec<HepsRow> = eps_list
        .iter()
        .map(|&eps| {
            let h = prelimit_h(pair, phi, eps)?;
            Ok(HepsRow {
                eps,
                h_eps: h,
                h0,
                abs_diff: (h - h0).abs(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(HepsReport {
        cancellation_residual,
        slope: loglog_slope(
            &rows.iter().map(|r| r.eps).collect::<Vec<_>>(),
            &rows.iter().map(|r| r.abs_diff).collect::<Vec<_>>(),
        ),
        rows,
    })
}

/// Least-squares slope of `log y` on `log x`; NaN with fewer than two points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let lx: Vec<f64> = x[..n].iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y[..n].iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition_arithmetic() {
        let s = CellSpec::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(micro_h(1.0, 1.0, &s), 0.0);
        assert_eq!(micro_h(0.3, 0.0, &s), 0.0);
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(effective_h_closed(&CellSpec { alpha: 1.0, beta: 0.0, p: 1.0 }), 0.5);
        assert_eq!(effective_h_closed(&CellSpec { alpha: 3.0, beta: 2.0, p: 1.0 }), -0.5);
        assert_eq!(effective_h_closed(&CellSpec { alpha: 1.0, beta: 5.0, p: 0.0 }), 0.0);
    }

    #[test]
    fn variational_boundary_maximizer_is_an_error() {
        let s = CellSpec::new(1.0, 0.0, 10.0).unwrap();
        assert!(effective_h_variational(&s, -1.0, 1.0, 101).is_err());
    }

    #[test]
    fn hand_checked_corrector() {
        // h(u, 1/2) + u = -(2u)(1/2) + 1/2 + u = 1/2
        let s = CellSpec::new(1.0, 0.0, 1.0).unwrap();
        let grid: Vec<f64> = (0..101).map(|i| -5.0 + 0.1 * i as f64).collect();
        let r = corrector_check(&s, &grid).unwrap();
        assert_eq!(r.e_closed, 0.5);
        assert!(r.smooth_branch_residual <= 1e-12);
        assert!(r.second_branch_residual <= 1e-12);
    }

    #[test]
    fn ground_state_config_invariants() {
        let s = CellSpec::new(1.0, 0.0, 1.0).unwrap();
        let bad = GroundStateConfig { kappa: 0.1, r: 1.0, mv: 400 };
        assert!(bad.validate(&s).is_err());
        let bad = GroundStateConfig { kappa: 0.1, r: 10.0, mv: 100 };
        assert!(bad.validate(&s).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let x = [0.2, 0.1, 0.05];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(2)).collect();
        assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
