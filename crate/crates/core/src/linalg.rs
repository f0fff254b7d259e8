//! Small banded and dense solvers used by the numerical layers.

use crate::error::{Error, Result};

/// Periodic tridiagonal matrix. Row `i` reads
/// `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1]` with indices mod `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CyclicTridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CyclicTridiag {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                self.lower[i] * x[(i + n - 1) % n]
                    + self.diag[i] * x[i]
                    + self.upper[i] * x[(i + 1) % n]
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let n = self.len();
        Self {
            lower: (0..n).map(|i| self.upper[(i + n - 1) % n]).collect(),
            diag: self.diag.clone(),
            upper: (0..n).map(|i| self.lower[(i + 1) % n]).collect(),
        }
    }

    /// Thomas elimination with a Sherman-Morrison correction for the corners.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if n < 3 || rhs.len() != n {
            return Err(Error::InvalidParameter(format!(
                "cyclic solve needs n >= 3 and matching rhs, got {n} / {}",
                rhs.len()
            )));
        }
        let alpha = self.upper[n - 1];
        let beta = self.lower[0];
        let gamma = -self.diag[0];
        let mut bb = self.diag.clone();
        bb[0] -= gamma;
        bb[n - 1] -= alpha * beta / gamma;
        let x = thomas(&self.lower, &bb, &self.upper, rhs)?;
        let mut u = vec![0.0; n];
        u[0] = gamma;
        u[n - 1] = alpha;
        let z = thomas(&self.lower, &bb, &self.upper, &u)?;
        let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
        if !fact.is_finite() {
            return Err(Error::NonConvergence("singular cyclic system".into()));
        }
        Ok(x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect())
    }
}

/// Non-periodic tridiagonal solve; `lower[0]` and `upper[n-1]` are ignored.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv == 0.0 || !piv.is_finite() {
        return Err(Error::NonConvergence("zero pivot in tridiagonal solve".into()));
    }
    c[0] = upper[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - lower[i] * c[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return Err(Error::NonConvergence("zero pivot in tridiagonal solve".into()));
        }
        c[i] = if i + 1 < n { upper[i] / piv } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / piv;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

/// Number of eigenvalues below `x` of the symmetric tridiagonal matrix with
/// diagonal `d` and off-diagonal `e` (`e[i]` couples `i` and `i+1`).
pub fn sturm_count(d: &[f64], e: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..d.len() {
        let off = if i == 0 { 0.0 } else { e[i - 1] * e[i - 1] };
        q = d[i] - x - if i == 0 { 0.0 } else { off / q };
        if q == 0.0 {
            q = f64::EPSILON * (d[i].abs() + x.abs() + 1.0);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Largest eigenvalue of a symmetric tridiagonal matrix by bisection.
pub fn largest_eigenvalue(d: &[f64], e: &[f64]) -> f64 {
    let n = d.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { e[i - 1].abs() } else { 0.0 } + if i + 1 < n { e[i].abs() } else { 0.0 };
        lo = lo.min(d[i] - r);
        hi = hi.max(d[i] + r);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(d, e, mid) == n {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Dense Gaussian elimination with partial pivoting; `a` is row-major `n x n`.
pub fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::InvalidParameter("dense solve shape".into()));
    }
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[p * n + col].abs() < 1e-300 {
            return Err(Error::NonConvergence("singular dense system".into()));
        }
        if p != col {
            for k in 0..n {
                a.swap(p * n + k, col * n + k);
            }
            b.swap(p, col);
        }
        for i in col + 1..n {
            let f = a[i * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[i * n + k] -= f * a[col * n + k];
                }
                b[i] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i * n + k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i * n + i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_solve_matches_matvec() {
        let n = 9;
        let m = CyclicTridiag {
            lower: (0..n).map(|i| -1.0 - 0.1 * i as f64).collect(),
            diag: (0..n).map(|i| 4.0 + (i as f64).sin()).collect(),
            upper: (0..n).map(|i| -0.5 + 0.05 * i as f64).collect(),
        };
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
        let b = m.matvec(&x);
        let y = m.solve(&b).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-13);
        }
        let bt = m.transpose().matvec(&x);
        let yt = m.transpose().solve(&bt).unwrap();
        for (a, b) in x.iter().zip(&yt) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let n = 7;
        let m = CyclicTridiag {
            lower: (0..n).map(|i| i as f64 + 1.0).collect(),
            diag: (0..n).map(|i| 10.0 - i as f64).collect(),
            upper: (0..n).map(|i| 0.3 * i as f64 - 1.0).collect(),
        };
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sqrt()).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 / (i as f64 + 2.0)).collect();
        let ax = m.matvec(&x);
        let aty = m.transpose().matvec(&y);
        let l: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let r: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((l - r).abs() < 1e-12);
    }

    #[test]
    fn largest_eigenvalue_of_discrete_laplacian() {
        // -tridiag(1, -2, 1) has eigenvalues 2 - 2 cos(k pi / (n + 1))
        let n = 50;
        let d = vec![-2.0; n];
        let e = vec![1.0; n - 1];
        let lam = largest_eigenvalue(&d, &e);
        let expected = -2.0 + 2.0 * (std::f64::consts::PI / (n as f64 + 1.0)).cos();
        assert!((lam - expected).abs() < 1e-13, "{lam} vs {expected}");
    }

    #[test]
    fn dense_solve_small_system() {
        let a = vec![2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0];
        let x = dense_solve(a, vec![3.0, 5.0, 5.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }
}
