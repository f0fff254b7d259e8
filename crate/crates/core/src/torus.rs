//! Densities and fields on the uniformly discretized circle `R/Z`.
//!
//! Values live at cell centers `x_i = (i + 1/2)/M`. Densities are cell
//! averages; integrals use the midpoint rule. Fourier coefficients follow the
//! continuous convention `m_k = \int m(x) e^{-2 pi i k x} dx`, obtained from
//! node samples as `DFT / M` with the half-cell phase removed.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mass tolerance for a valid density.
pub const MASS_TOL: f64 = 1e-12;
/// Tolerance on `dx * sum(m)` for an input to count as mean zero.
pub const MEAN_ZERO_TOL: f64 = 1e-10;

/// Uniform grid with `m` cells on the unit circle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGrid {
    m: usize,
}

impl TorusGrid {
    /// `m` must be even and at least 8.
    pub fn new(m: usize) -> Result<Self> {
        if m < 8 || m % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "cell count must be even and >= 8, got {m}"
            )));
        }
        Ok(Self { m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.m as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.node(i)).collect()
    }

    /// Midpoint quadrature of node values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.dx() * values.iter().sum::<f64>()
    }

    /// Midpoint quadrature of a product.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.dx() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.m {
            return Err(Error::GridMismatch {
                expected: self.m,
                got: len,
            });
        }
        Ok(())
    }
}

/// Nonnegative cell-averaged probability density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl GridDensity {
    /// Validates finiteness, nonnegativity and unit mass within [`MASS_TOL`].
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        grid.check_len(values.len())?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidDensity(format!("non-finite value {v}")));
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidDensity(format!("negative value {v:e}")));
        }
        let mass = grid.integrate(&values);
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDensity(format!(
                "mass {mass} differs from 1 by {:e}",
                (mass - 1.0).abs()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Rescales nonnegative values to unit mass.
    pub fn normalized(grid: TorusGrid, mut values: Vec<f64>) -> Result<Self> {
        grid.check_len(values.len())?;
        let mass = grid.integrate(&values);
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::InvalidDensity(format!("cannot normalize mass {mass}")));
        }
        for v in values.iter_mut() {
            *v /= mass;
        }
        Self::new(grid, values)
    }

    /// Samples `f` at the nodes and normalizes.
    pub fn from_fn(grid: TorusGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::normalized(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn uniform(grid: TorusGrid) -> Self {
        Self {
            grid,
            values: vec![1.0; grid.m()],
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Signed difference `self - other` as a field.
    pub fn diff(&self, other: &GridDensity) -> Result<GridField> {
        self.grid.check_len(other.values.len())?;
        Ok(GridField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Rigid translation by an integer number of cells.
    pub fn shift_cells(&self, s: i64) -> Self {
        Self {
            grid: self.grid,
            values: roll(&self.values, s),
        }
    }

    pub fn log_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.ln()).collect()
    }
}

/// Real field on the grid, typically a test function, control or flux.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        grid.check_len(values.len())?;
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            values: grid.nodes().into_iter().map(f).collect(),
        }
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.m()],
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Copy with the spatial mean removed.
    pub fn mean_free(&self) -> Self {
        let mean = self.mean();
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v - mean).collect(),
        }
    }

    pub fn shift_cells(&self, s: i64) -> Self {
        Self {
            grid: self.grid,
            values: roll(&self.values, s),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.grid.inner(&self.values, &self.values).sqrt()
    }
}

/// Result that may be `+infinity` by definition rather than by overflow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinite)
    }

    /// `f64::INFINITY` for the infinite case.
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

/// Fourier coefficients indexed by `k = -M/2 .. M/2 - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCoeffs {
    m: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralCoeffs {
    pub fn m(&self) -> usize {
        self.m
    }

    /// Coefficient of mode `k`, reduced modulo `M` into the stored band.
    pub fn get(&self, k: i64) -> Complex64 {
        let m = self.m as i64;
        let kk = (k + m / 2).rem_euclid(m);
        self.coeffs[kk as usize]
    }

    /// Coefficients in the order `-M/2 .. M/2 - 1`.
    pub fn as_slice(&self) -> &[Complex64] {
        &self.coeffs
    }
}

type Plans = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

thread_local! {
    static PLANS: RefCell<HashMap<usize, Plans>> = RefCell::new(HashMap::new());
}

fn plans(m: usize) -> Plans {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry(m)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                (planner.plan_fft_forward(m), planner.plan_fft_inverse(m))
            })
            .clone()
    })
}

/// Unnormalized forward DFT in FFT order.
pub(crate) fn fft(values: &[f64]) -> Vec<Complex64> {
    let (fwd, _) = plans(values.len());
    let mut buf: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fwd.process(&mut buf);
    buf
}

/// Inverse DFT in FFT order, divided by `M`, real part.
pub(crate) fn ifft_real(mut buf: Vec<Complex64>) -> Vec<f64> {
    let m = buf.len();
    let (_, inv) = plans(m);
    inv.process(&mut buf);
    buf.into_iter().map(|c| c.re / m as f64).collect()
}

/// Signed wavenumber of FFT slot `j`.
pub(crate) fn wavenumber(j: usize, m: usize) -> i64 {
    if j < m / 2 {
        j as i64
    } else {
        j as i64 - m as i64
    }
}

/// Applies a Fourier multiplier given as a function of the signed wavenumber.
pub(crate) fn apply_multiplier(values: &[f64], symbol: impl Fn(i64) -> Complex64) -> Vec<f64> {
    let m = values.len();
    let mut buf = fft(values);
    for (j, c) in buf.iter_mut().enumerate() {
        *c *= symbol(wavenumber(j, m));
    }
    ifft_real(buf)
}

/// Continuous-convention Fourier coefficients of node samples.
pub fn spectral(values: &[f64]) -> SpectralCoeffs {
    let m = values.len();
    let buf = fft(values);
    let mut coeffs = vec![Complex64::new(0.0, 0.0); m];
    for (j, c) in buf.into_iter().enumerate() {
        let k = wavenumber(j, m);
        // nodes sit at (i + 1/2)/M
        let phase = Complex64::from_polar(1.0, -PI * k as f64 / m as f64);
        coeffs[(k + m as i64 / 2) as usize] = c * phase / m as f64;
    }
    SpectralCoeffs { m, coeffs }
}

/// Inverse of [`spectral`].
pub fn inverse_spectral(coeffs: &SpectralCoeffs) -> Vec<f64> {
    let m = coeffs.m;
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for (j, slot) in buf.iter_mut().enumerate() {
        let k = wavenumber(j, m);
        let phase = Complex64::from_polar(1.0, PI * k as f64 / m as f64);
        *slot = coeffs.get(k) * phase * m as f64;
    }
    ifft_real(buf)
}

fn d1_symbol(k: i64, m: usize) -> Complex64 {
    if 2 * k.unsigned_abs() as usize == m {
        Complex64::new(0.0, 0.0)
    } else {
        Complex64::new(0.0, 2.0 * PI * k as f64)
    }
}

fn d2_symbol(k: i64) -> Complex64 {
    let w = 2.0 * PI * k as f64;
    Complex64::new(-w * w, 0.0)
}

/// Spectral first derivative; the Nyquist mode is dropped.
pub fn derivative(f: &GridField) -> GridField {
    let m = f.grid.m();
    GridField {
        grid: f.grid,
        values: apply_multiplier(&f.values, |k| d1_symbol(k, m)),
    }
}

/// Spectral second derivative with symbol `-(2 pi k)^2` on every mode.
pub fn second_derivative(f: &GridField) -> GridField {
    GridField {
        grid: f.grid,
        values: apply_multiplier(&f.values, d2_symbol),
    }
}

pub(crate) fn derivative_values(values: &[f64]) -> Vec<f64> {
    let m = values.len();
    apply_multiplier(values, |k| d1_symbol(k, m))
}

pub(crate) fn second_derivative_values(values: &[f64]) -> Vec<f64> {
    apply_multiplier(values, d2_symbol)
}

fn check_mean_zero(grid: TorusGrid, values: &[f64]) -> Result<()> {
    let mean = grid.integrate(values);
    if mean.abs() > MEAN_ZERO_TOL {
        return Err(Error::NonZeroMean { mean });
    }
    Ok(())
}

/// Mean-zero solution `g` of `-g'' = m` for mean-zero `m`.
pub fn neg_inv_laplacian(m: &GridField) -> Result<GridField> {
    check_mean_zero(m.grid, &m.values)?;
    Ok(GridField {
        grid: m.grid,
        values: neg_inv_laplacian_values(&m.values),
    })
}

pub(crate) fn neg_inv_laplacian_values(values: &[f64]) -> Vec<f64> {
    apply_multiplier(values, |k| {
        if k == 0 {
            Complex64::new(0.0, 0.0)
        } else {
            let w = 2.0 * PI * k as f64;
            Complex64::new(1.0 / (w * w), 0.0)
        }
    })
}

/// `sqrt(sum_{k != 0} |m_k|^2 / (2 pi k)^2)`; infinite unless `m` has mean zero.
pub fn h_minus1_norm(m: &GridField) -> Extended {
    if check_mean_zero(m.grid, &m.values).is_err() {
        return Extended::Infinite;
    }
    Extended::Finite(h_minus1_sq_values(&m.values).sqrt())
}

pub(crate) fn h_minus1_sq_values(values: &[f64]) -> f64 {
    let m = values.len();
    let buf = fft(values);
    let mut acc = 0.0;
    for (j, c) in buf.iter().enumerate() {
        let k = wavenumber(j, m);
        if k != 0 {
            let w = 2.0 * PI * k as f64;
            acc += c.norm_sqr() / (w * w);
        }
    }
    acc / (m as f64 * m as f64)
}

/// `||rho - gamma||_{-1}` for two densities on the same grid.
pub fn h_minus1_distance(rho: &GridDensity, gamma: &GridDensity) -> Result<f64> {
    let d = rho.diff(gamma)?;
    Ok(h_minus1_sq_values(&d.values).sqrt())
}

/// Squared `H^{-1}` distance.
pub fn h_minus1_distance_sq(rho: &GridDensity, gamma: &GridDensity) -> Result<f64> {
    let d = rho.diff(gamma)?;
    Ok(h_minus1_sq_values(&d.values))
}

/// Circle Wasserstein-1 distance between cell-constant densities.
///
/// With `F` the cumulative function of `rho - gamma` (piecewise linear on
/// cells), `W_1 = min_c \int |F - c|`; the minimizer is a median of `F`.
pub fn w1_circle(rho: &GridDensity, gamma: &GridDensity) -> Result<f64> {
    let d = rho.diff(gamma)?;
    let dx = rho.grid.dx();
    let m = d.values.len();
    let mut f = Vec::with_capacity(m + 1);
    f.push(0.0);
    for v in &d.values {
        let last = *f.last().unwrap();
        f.push(last + dx * v);
    }
    // measure of {F < c} minus measure of {F > c}
    let imbalance = |c: f64| -> f64 {
        let mut below = 0.0;
        let mut above = 0.0;
        for w in f.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if hi <= c {
                below += dx;
            } else if lo >= c {
                above += dx;
            } else {
                let frac = (c - lo) / (hi - lo);
                below += dx * frac;
                above += dx * (1.0 - frac);
            }
        }
        below - above
    };
    let mut lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if imbalance(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let mut total = 0.0;
    for w in f.windows(2) {
        let (a, b) = (w[0] - c, w[1] - c);
        total += if a * b >= 0.0 {
            0.5 * dx * (a + b).abs()
        } else {
            0.5 * dx * (a * a + b * b) / (a.abs() + b.abs())
        };
    }
    Ok(total)
}

/// Circle Wasserstein-1 distance between two atomic probability measures
/// given as `(position, weight)` pairs with positions in `[0, 1)`.
pub fn w1_circle_atomic(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(a.len() + b.len());
    for &(x, w) in a {
        events.push((x.rem_euclid(1.0), w));
    }
    for &(x, w) in b {
        events.push((x.rem_euclid(1.0), -w));
    }
    let total: f64 = events.iter().map(|e| e.1).sum();
    if total.abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "atomic measures have different masses (difference {total:e})"
        )));
    }
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    // piecewise-constant cumulative function: (value, length)
    let mut pieces = Vec::with_capacity(events.len() + 1);
    let mut level = 0.0;
    let mut x_prev = 0.0;
    for (x, w) in &events {
        pieces.push((level, x - x_prev));
        level += w;
        x_prev = *x;
    }
    pieces.push((level, 1.0 - x_prev));
    let mut sorted = pieces.clone();
    sorted.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut acc = 0.0;
    let mut median = sorted[0].0;
    for (v, len) in &sorted {
        acc += len;
        median = *v;
        if acc >= 0.5 {
            break;
        }
    }
    Ok(pieces.iter().map(|(v, len)| len * (v - median).abs()).sum())
}

/// Smooth compactly supported bump `exp(-1/(1 - u^2))` on `(-1, 1)`.
pub fn bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

/// Discrete mollifier of width `eps` on the grid, normalized to unit sum.
fn mollifier_weights(grid: TorusGrid, eps: f64) -> Vec<f64> {
    let m = grid.m();
    let mut k: Vec<f64> = (0..m)
        .map(|i| {
            let d = i.min(m - i) as f64 * grid.dx();
            bump(d / eps)
        })
        .collect();
    let s: f64 = k.iter().sum();
    if s == 0.0 {
        k.iter_mut().for_each(|v| *v = 0.0);
        k[0] = 1.0;
    } else {
        k.iter_mut().for_each(|v| *v /= s);
    }
    k
}

fn circulant_apply(kernel: &[f64], values: &[f64]) -> Vec<f64> {
    let m = values.len();
    let support: Vec<(usize, f64)> = kernel
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, w)| *w != 0.0)
        .collect();
    (0..m)
        .map(|i| {
            support
                .iter()
                .map(|(s, w)| w * values[(i + m - s) % m])
                .sum()
        })
        .collect()
}

/// Mollification by a wrapped bump of half-width `eps`. Mass, positivity and
/// cell translations are preserved exactly up to rounding.
pub fn mollify(rho: &GridDensity, eps: f64) -> Result<GridDensity> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("mollifier width {eps}")));
    }
    let k = mollifier_weights(rho.grid, eps);
    GridDensity::normalized(rho.grid, circulant_apply(&k, &rho.values))
}

/// Mollification of a general field.
pub fn mollify_field(f: &GridField, eps: f64) -> Result<GridField> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("mollifier width {eps}")));
    }
    let k = mollifier_weights(f.grid, eps);
    Ok(GridField {
        grid: f.grid,
        values: circulant_apply(&k, &f.values),
    })
}

/// Random smooth positive density `exp(sum_k a_k cos(2 pi k x) + b_k sin(2 pi k x)) / Z`
/// with `k = 1..=modes` and coefficients uniform in `[-amplitude/k, amplitude/k]`.
pub fn random_smooth_density<R: rand::Rng + ?Sized>(
    grid: TorusGrid,
    modes: usize,
    amplitude: f64,
    rng: &mut R,
) -> GridDensity {
    let coeffs: Vec<(f64, f64)> = (1..=modes)
        .map(|k| {
            let s = amplitude / k as f64;
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        })
        .collect();
    GridDensity::from_fn(grid, |x| {
        let mut e = 0.0;
        for (k, (a, b)) in coeffs.iter().enumerate() {
            let w = 2.0 * PI * (k + 1) as f64 * x;
            e += a * w.cos() + b * w.sin();
        }
        e.exp()
    })
    .expect("exponential profile is a valid density")
}

/// Random smooth field `sum_k a_k cos(2 pi k x) + b_k sin(2 pi k x)`, `k = 1..=modes`.
pub fn random_smooth_field<R: rand::Rng + ?Sized>(
    grid: TorusGrid,
    modes: usize,
    amplitude: f64,
    rng: &mut R,
) -> GridField {
    let coeffs: Vec<(f64, f64)> = (1..=modes)
        .map(|k| {
            let s = amplitude / k as f64;
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        })
        .collect();
    GridField::from_fn(grid, |x| {
        let mut e = 0.0;
        for (k, (a, b)) in coeffs.iter().enumerate() {
            let w = 2.0 * PI * (k + 1) as f64 * x;
            e += a * w.cos() + b * w.sin();
        }
        e
    })
}

fn roll(values: &[f64], s: i64) -> Vec<f64> {
    let m = values.len() as i64;
    (0..m)
        .map(|i| values[(i - s).rem_euclid(m) as usize])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: usize) -> TorusGrid {
        TorusGrid::new(m).unwrap()
    }

    #[test]
    fn rejects_odd_or_small_grids() {
        assert!(TorusGrid::new(7).is_err());
        assert!(TorusGrid::new(6).is_err());
        assert!(TorusGrid::new(9).is_err());
        assert!(TorusGrid::new(8).is_ok());
    }

    #[test]
    fn density_validation() {
        let g = grid(8);
        assert!(GridDensity::new(g, vec![1.0; 8]).is_ok());
        assert!(GridDensity::new(g, vec![1.1; 8]).is_err());
        let mut v = vec![1.0; 8];
        v[0] = -0.5;
        v[1] = 2.5;
        assert!(GridDensity::new(g, v).is_err());
        assert!(GridDensity::new(g, vec![1.0; 6]).is_err());
    }

    #[test]
    fn cosine_coefficients() {
        let g = grid(64);
        let f = GridField::from_fn(g, |x| (2.0 * PI * x).cos());
        let c = spectral(f.values());
        assert!((c.get(1).re - 0.5).abs() < 1e-14 && c.get(1).im.abs() < 1e-14);
        assert!((c.get(-1).re - 0.5).abs() < 1e-14);
        for k in -32i64..32 {
            if k.abs() != 1 {
                assert!(c.get(k).norm() < 1e-14, "mode {k}");
            }
        }
        let back = inverse_spectral(&c);
        for (a, b) in back.iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_of_sine() {
        let g = grid(32);
        let f = GridField::from_fn(g, |x| (2.0 * PI * 3.0 * x).sin());
        let d = derivative(&f);
        let d2 = second_derivative(&f);
        for (i, x) in g.nodes().into_iter().enumerate() {
            let w = 6.0 * PI;
            assert!((d.values()[i] - w * (w * x).cos()).abs() < 1e-11);
            assert!((d2.values()[i] + w * w * (w * x).sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn nyquist_mode_dropped_by_first_derivative() {
        let g = grid(16);
        let f = GridField::new(g, (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect())
            .unwrap();
        assert!(derivative(&f).max_abs() < 1e-12);
        let lap = second_derivative(&f);
        let w = PI * 16.0;
        assert!((lap.values()[0] + w * w).abs() < 1e-8);
    }

    #[test]
    fn norm_of_single_mode() {
        let g = grid(32);
        let m = GridField::from_fn(g, |x| (2.0 * PI * x).cos());
        let n = h_minus1_norm(&m).finite().unwrap();
        let expected = (2.0 * 0.25 / (4.0 * PI * PI)).sqrt();
        assert!((n - expected).abs() < 1e-14);
    }

    #[test]
    fn nonzero_mean_is_infinite() {
        let g = grid(16);
        let m = GridField::from_fn(g, |_| 1e-6);
        assert!(h_minus1_norm(&m).is_infinite());
        assert!(matches!(neg_inv_laplacian(&m), Err(Error::NonZeroMean { .. })));
    }

    #[test]
    fn w1_of_translated_box() {
        // box of width 1/4 shifted by 1/8: W_1 = 1/8
        let g = grid(64);
        let a: Vec<f64> = (0..64).map(|i| if i < 16 { 4.0 } else { 0.0 }).collect();
        let rho = GridDensity::new(g, a).unwrap();
        let gamma = rho.shift_cells(8);
        let w = w1_circle(&rho, &gamma).unwrap();
        assert!((w - 0.125).abs() < 1e-12, "{w}");
    }

    #[test]
    fn w1_atomic_antipodal() {
        let w = w1_circle_atomic(&[(0.0, 1.0)], &[(0.5, 1.0)]).unwrap();
        assert!((w - 0.5).abs() < 1e-15);
        let w = w1_circle_atomic(&[(0.05, 1.0)], &[(0.95, 1.0)]).unwrap();
        assert!((w - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mollifier_narrower_than_cell_is_identity() {
        let g = grid(16);
        let rho = GridDensity::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x).sin()).unwrap();
        let m = mollify(&rho, 0.5 * g.dx()).unwrap();
        assert_eq!(m.values(), rho.values());
    }
}
