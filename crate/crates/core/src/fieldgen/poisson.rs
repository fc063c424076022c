//! Five-point Poisson solves on the unit square.
//!
//! -laplace(u) = f with u = 0 on the boundary, discretized on an n by n
//! node grid (boundary ring included, spacing 1/(n-1)) and solved by
//! conjugate gradients in f64. The system is symmetric positive
//! definite, so CG converges; the iteration cap only guards degenerate
//! input.

use super::FieldGrid;
use crate::error::{Error, Result};

/// Apply the five-point operator to the interior vector `u` (m by m).
fn apply_laplacian(m: usize, h2inv: f64, u: &[f64], out: &mut [f64]) {
    for i in 0..m {
        for j in 0..m {
            let idx = i * m + j;
            let mut v = 4.0 * u[idx];
            if i > 0 {
                v -= u[idx - m];
            }
            if i + 1 < m {
                v -= u[idx + m];
            }
            if j > 0 {
                v -= u[idx - 1];
            }
            if j + 1 < m {
                v -= u[idx + 1];
            }
            out[idx] = v * h2inv;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve the Dirichlet problem for the source grid `f`. Only interior
/// values of `f` enter the system; the returned grid carries the zero
/// boundary ring.
pub fn poisson_solve(f: &FieldGrid) -> Result<FieldGrid> {
    let n = f.h;
    if f.w != n || n < 3 {
        return Err(Error::Config(format!(
            "poisson_solve: need a square grid with n >= 3, got {}x{}",
            f.h, f.w
        )));
    }
    let m = n - 2;
    let h = 1.0 / (n as f64 - 1.0);
    let h2inv = 1.0 / (h * h);

    let mut b = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            b[i * m + j] = f.at(i + 1, j + 1);
        }
    }
    let bnorm = dot(&b, &b).sqrt();
    let mut x = vec![0.0f64; m * m];

    if bnorm > 0.0 {
        let tol2 = (1e-10 * bnorm) * (1e-10 * bnorm);
        let cap = 10 * n * n;
        let mut r = b.clone();
        let mut p = b;
        let mut ap = vec![0.0f64; m * m];
        let mut rs = dot(&r, &r);
        let mut converged = rs <= tol2;
        let mut it = 0;
        while !converged && it < cap {
            apply_laplacian(m, h2inv, &p, &mut ap);
            let alpha = rs / dot(&p, &ap);
            for k in 0..x.len() {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            let rs_new = dot(&r, &r);
            if rs_new <= tol2 {
                converged = true;
            } else {
                let beta = rs_new / rs;
                for k in 0..p.len() {
                    p[k] = r[k] + beta * p[k];
                }
            }
            rs = rs_new;
            it += 1;
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "poisson_solve: residual {:.3e} after {cap} iterations (target {:.3e})",
                rs.sqrt(),
                1e-10 * bnorm
            )));
        }
    }

    let mut u = FieldGrid::zeros(n, n);
    for i in 0..m {
        for j in 0..m {
            u.data[(i + 1) * n + (j + 1)] = x[i * m + j];
        }
    }
    Ok(u)
}
