//! The regularized potential `Phi_eps` standing in for `1/2 log r`.
//!
//! `Phi_eps(r) = 1/2 log r + C_eps` for `r >= eps`, `r / eps` for `r < 0`, and a
//! bridge `theta_eps` on `[0, eps]` matching value, slope and curvature at both
//! ends. `C_eps = -3/2 log eps`, so `Phi_eps(eps) = -log eps`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Number of samples on `[-1, 2]` used to certify `Phi_eps' > 0`.
const MONOTONE_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Bridge {
    /// `p(s) = s + a3 s^3 + a4 s^4 + a5 s^5` in `s = r / eps`.
    Quintic { a3: f64, a4: f64, a5: f64 },
    /// Monotone cubic Hermite pieces on knots in `s`, with values and slopes.
    MonotoneCubic {
        knots: Vec<f64>,
        values: Vec<f64>,
        slopes: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularizedPotential {
    eps: f64,
    c_eps: f64,
    bridge: Bridge,
    theta_at_eps: f64,
}

impl RegularizedPotential {
    /// Quintic bridge, falling back to a monotone cubic if the quintic fails
    /// the positivity certificate.
    pub fn new(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        let quintic = Self::with_bridge(eps, quintic_bridge(eps));
        if quintic.certify_monotone() {
            return Ok(quintic);
        }
        Self::with_monotone_fallback(eps, 64)
    }

    /// Forces the monotone piecewise-cubic bridge with `pieces` uniform pieces.
    pub fn with_monotone_fallback(eps: f64, pieces: usize) -> Result<Self> {
        check_eps(eps)?;
        if pieces < 2 {
            return Err(Error::InvalidParameter("fallback needs at least 2 pieces".into()));
        }
        let p = Self::with_bridge(eps, cubic_bridge(eps, pieces));
        if p.certify_monotone() {
            Ok(p)
        } else {
            Err(Error::Construction(format!(
                "no monotone bridge found for eps = {eps}"
            )))
        }
    }

    fn with_bridge(eps: f64, bridge: Bridge) -> Self {
        let mut p = Self {
            eps,
            c_eps: -1.5 * eps.ln(),
            bridge,
            theta_at_eps: 0.0,
        };
        p.theta_at_eps = p.bridge_primitive(1.0);
        p
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn c_eps(&self) -> f64 {
        self.c_eps
    }

    pub fn bridge(&self) -> &Bridge {
        &self.bridge
    }

    pub fn uses_fallback(&self) -> bool {
        matches!(self.bridge, Bridge::MonotoneCubic { .. })
    }

    /// `Phi_eps' > 0` on a uniform sample of `[-1, 2]` and on the bridge.
    pub fn certify_monotone(&self) -> bool {
        let wide = (0..=MONOTONE_SAMPLES).map(|i| -1.0 + 3.0 * i as f64 / MONOTONE_SAMPLES as f64);
        let bridge = (0..=MONOTONE_SAMPLES).map(|i| self.eps * i as f64 / MONOTONE_SAMPLES as f64);
        wide.chain(bridge).all(|r| self.dphi(r) > 0.0)
    }

    pub fn phi(&self, r: f64) -> f64 {
        if r >= self.eps {
            0.5 * r.ln() + self.c_eps
        } else if r < 0.0 {
            r / self.eps
        } else {
            self.bridge_value(r / self.eps)
        }
    }

    pub fn dphi(&self, r: f64) -> f64 {
        if r >= self.eps {
            0.5 / r
        } else if r < 0.0 {
            1.0 / self.eps
        } else {
            self.bridge_slope(r / self.eps) / self.eps
        }
    }

    pub fn d2phi(&self, r: f64) -> f64 {
        if r >= self.eps {
            -0.5 / (r * r)
        } else if r < 0.0 {
            0.0
        } else {
            self.bridge_curvature(r / self.eps) / (self.eps * self.eps)
        }
    }

    /// Primitive `Psi_eps(r) = \int_0^r Phi_eps`, in closed form.
    pub fn psi(&self, r: f64) -> f64 {
        let e = self.eps;
        if r >= e {
            0.5 * (r * r.ln() - r) + self.c_eps * r - 0.5 * (e * e.ln() - e) - e * self.c_eps
                + self.theta_at_eps
        } else if r < 0.0 {
            r * r / (2.0 * e)
        } else {
            self.bridge_primitive(r / e)
        }
    }

    fn bridge_value(&self, s: f64) -> f64 {
        match &self.bridge {
            Bridge::Quintic { a3, a4, a5 } => s + s * s * s * (a3 + s * (a4 + s * a5)),
            Bridge::MonotoneCubic { knots, values, slopes } => {
                let (i, h, t) = locate(knots, s);
                let (h00, h10, h01, h11) = hermite_basis(t);
                h00 * values[i] + h10 * h * slopes[i] + h01 * values[i + 1] + h11 * h * slopes[i + 1]
            }
        }
    }

    fn bridge_slope(&self, s: f64) -> f64 {
        match &self.bridge {
            Bridge::Quintic { a3, a4, a5 } => 1.0 + s * s * (3.0 * a3 + s * (4.0 * a4 + s * 5.0 * a5)),
            Bridge::MonotoneCubic { knots, values, slopes } => {
                let (i, h, t) = locate(knots, s);
                let d00 = 6.0 * t * t - 6.0 * t;
                let d10 = 3.0 * t * t - 4.0 * t + 1.0;
                let d01 = -d00;
                let d11 = 3.0 * t * t - 2.0 * t;
                (d00 * values[i] + d01 * values[i + 1]) / h + d10 * slopes[i] + d11 * slopes[i + 1]
            }
        }
    }

    fn bridge_curvature(&self, s: f64) -> f64 {
        match &self.bridge {
            Bridge::Quintic { a3, a4, a5 } => s * (6.0 * a3 + s * (12.0 * a4 + s * 20.0 * a5)),
            Bridge::MonotoneCubic { knots, values, slopes } => {
                let (i, h, t) = locate(knots, s);
                let dd00 = 12.0 * t - 6.0;
                let dd10 = 6.0 * t - 4.0;
                let dd11 = 6.0 * t - 2.0;
                (dd00 * (values[i] - values[i + 1]) / h + dd10 * slopes[i] + dd11 * slopes[i + 1]) / h
            }
        }
    }

    /// `Theta_eps(eps s)`.
    fn bridge_primitive(&self, s: f64) -> f64 {
        let e = self.eps;
        match &self.bridge {
            Bridge::Quintic { a3, a4, a5 } => {
                let s2 = s * s;
                e * (s2 / 2.0 + s2 * s2 * (a3 / 4.0 + s * (a4 / 5.0 + s * a5 / 6.0)))
            }
            Bridge::MonotoneCubic { knots, .. } => {
                // Simpson is exact on each cubic piece
                let mut acc = 0.0;
                for w in knots.windows(2) {
                    let (a, b) = (w[0], w[1].min(s));
                    if b <= a {
                        break;
                    }
                    let m = 0.5 * (a + b);
                    acc += (b - a) / 6.0
                        * (self.bridge_value(a) + 4.0 * self.bridge_value(m) + self.bridge_value(b));
                }
                e * acc
            }
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "regularization parameter must lie in (0, 0.5), got {eps}"
        )));
    }
    Ok(())
}

/// Quintic in `s` with `(p, p', p'')` equal to `(0, 1, 0)` at 0 and
/// `(-log eps, 1/2, -1/2)` at 1.
fn quintic_bridge(eps: f64) -> Bridge {
    let a = -eps.ln() - 1.0;
    let b = 0.5 - 1.0;
    let c = -0.5;
    Bridge::Quintic {
        a3: 10.0 * a - 4.0 * b + 0.5 * c,
        a4: -15.0 * a + 7.0 * b - c,
        a5: 6.0 * a - 3.0 * b + 0.5 * c,
    }
}

/// Cubic Hermite interpolant of the primitive of a positive slope profile
/// running from 1 to 1/2 plus a bump carrying the remaining rise, with
/// Fritsch-Carlson limiting. Matches value and slope at both ends.
fn cubic_bridge(eps: f64, pieces: usize) -> Bridge {
    let total = -eps.ln();
    let rise = total - 0.75;
    // bump 30 s^2 (1-s)^2 has unit integral
    let q = |s: f64| 1.0 - 0.5 * s + rise * 30.0 * s * s * (1.0 - s) * (1.0 - s);
    let big_q = |s: f64| {
        s - 0.25 * s * s + rise * (10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5))
    };
    let knots: Vec<f64> = (0..=pieces).map(|i| i as f64 / pieces as f64).collect();
    let values: Vec<f64> = knots.iter().map(|&s| big_q(s)).collect();
    let mut slopes: Vec<f64> = knots.iter().map(|&s| q(s).max(0.0)).collect();
    for i in 0..pieces {
        let h = knots[i + 1] - knots[i];
        let delta = (values[i + 1] - values[i]) / h;
        if delta <= 0.0 {
            slopes[i] = 0.0;
            slopes[i + 1] = 0.0;
            continue;
        }
        let a = slopes[i] / delta;
        let b = slopes[i + 1] / delta;
        let r = a * a + b * b;
        if r > 9.0 {
            let tau = 3.0 / r.sqrt();
            slopes[i] = tau * a * delta;
            slopes[i + 1] = tau * b * delta;
        }
    }
    Bridge::MonotoneCubic {
        knots,
        values,
        slopes,
    }
}

fn locate(knots: &[f64], s: f64) -> (usize, f64, f64) {
    let n = knots.len() - 1;
    let i = match knots.binary_search_by(|k| k.total_cmp(&s)) {
        Ok(i) => i.min(n - 1),
        Err(i) => i.saturating_sub(1).min(n - 1),
    };
    let h = knots[i + 1] - knots[i];
    (i, h, (s - knots[i]) / h)
}

fn hermite_basis(t: f64) -> (f64, f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + t,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn boundary_data() {
        for &eps in &[1e-4, 0.01, 0.1, 0.3, 0.49] {
            let p = RegularizedPotential::new(eps).unwrap();
            assert!(!p.uses_fallback(), "eps {eps}");
            assert_eq!(p.phi(0.0), 0.0);
            assert!((p.phi(eps * (1.0 - 1e-15)) + eps.ln()).abs() < 1e-9);
            assert!((p.phi(eps) + eps.ln()).abs() < 1e-12);
            assert!((p.phi(-1.0) + 1.0 / eps).abs() < 1e-12);
            let below = p.dphi(eps * (1.0 - 1e-14));
            assert!((below - 0.5 / eps).abs() < 1e-6 * below);
            assert!((p.dphi(1e-300) - 1.0 / eps).abs() < 1e-6 / eps);
            let c_left = p.d2phi(eps * (1.0 - 1e-14));
            assert!((c_left + 0.5 / (eps * eps)).abs() < 1e-5 / (eps * eps));
            assert!(p.d2phi(1e-300).abs() < 1e-6 / (eps * eps));
        }
    }

    #[test]
    fn primitive_matches_quadrature() {
        for &eps in &[0.01, 0.1, 0.25] {
            for p in [
                RegularizedPotential::new(eps).unwrap(),
                RegularizedPotential::with_monotone_fallback(eps, 16).unwrap(),
            ] {
                for &r in &[-0.7, -0.01, 0.3 * eps, 0.99 * eps, eps, 0.5, 1.7] {
                    let direct = if r >= eps {
                        quad(|x| p.phi(x), 0.0, eps, 2000) + quad(|x| p.phi(x), eps, r, 20000)
                    } else {
                        quad(|x| p.phi(x), 0.0, r, 2000)
                    };
                    assert!(
                        (p.psi(r) - direct).abs() < 1e-10,
                        "eps {eps} r {r}: {} vs {direct}",
                        p.psi(r)
                    );
                }
            }
        }
    }

    #[test]
    fn negative_branch_primitive() {
        let p = RegularizedPotential::new(0.1).unwrap();
        for &r in &[-2.0, -0.5, -1e-3] {
            assert!((p.psi(r) - r * r / 0.2).abs() < 1e-14);
        }
    }

    #[test]
    fn fallback_is_monotone_and_c1() {
        let p = RegularizedPotential::with_monotone_fallback(0.05, 32).unwrap();
        assert!(p.uses_fallback());
        assert!(p.certify_monotone());
        assert_eq!(p.phi(0.0), 0.0);
        assert!((p.phi(0.05 * (1.0 - 1e-15)) + 0.05f64.ln()).abs() < 1e-9);
        assert!((p.dphi(0.0) - 20.0).abs() < 1e-9);
        assert!((p.dphi(0.05 * (1.0 - 1e-15)) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        assert!(RegularizedPotential::new(0.0).is_err());
        assert!(RegularizedPotential::new(0.5).is_err());
        assert!(RegularizedPotential::new(-0.1).is_err());
    }
}
