//! Closed-form plate-with-hole stress fields.
//!
//! An infinite plate under uniaxial far-field tension S with a circular
//! hole of radius a carries the classical Kirsch stress state. Its von
//! Mises magnitude gives an exact, cheap stand-in for a solver-made
//! stress map: concentration factor 3 at the rim, smooth decay to the
//! far field. The load axis can be rotated so datasets are not all
//! aligned the same way.

use serde::{Deserialize, Serialize};

use super::FieldGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KirschParams {
    /// Far-field tension.
    pub s: f64,
    /// Hole radius, must fit inside the domain.
    pub a: f64,
    /// Side length of the square domain centered on the hole.
    pub extent: f64,
    /// Angle of the load axis.
    pub rotation: f64,
    /// Grid cells per side.
    pub resolution: usize,
}

/// Polar stress components (srr, stt, srt) at radius r and angle theta
/// measured from the load axis.
pub fn kirsch_components(s: f64, a: f64, r: f64, theta: f64) -> (f64, f64, f64) {
    let q = (a / r) * (a / r);
    let q2 = q * q;
    let c = (2.0 * theta).cos();
    let sn = (2.0 * theta).sin();
    let srr = 0.5 * s * (1.0 - q) + 0.5 * s * (1.0 - 4.0 * q + 3.0 * q2) * c;
    let stt = 0.5 * s * (1.0 + q) - 0.5 * s * (1.0 + 3.0 * q2) * c;
    let srt = -0.5 * s * (1.0 + 2.0 * q - 3.0 * q2) * sn;
    (srr, stt, srt)
}

/// Plane-stress von Mises magnitude of a polar stress state.
pub fn von_mises(srr: f64, stt: f64, srt: f64) -> f64 {
    (srr * srr - srr * stt + stt * stt + 3.0 * srt * srt).sqrt()
}

/// Sample the von Mises Kirsch field at the cell centers of a square
/// grid. Cells inside the hole are masked to zero.
pub fn kirsch_field(p: &KirschParams) -> Result<FieldGrid> {
    if !(p.a > 0.0 && p.a < 0.5 * p.extent) {
        return Err(Error::Config(format!(
            "kirsch_field: hole radius {} must lie in (0, {}), the grid half-extent",
            p.a,
            0.5 * p.extent
        )));
    }
    if p.resolution < 8 {
        return Err(Error::Config(format!(
            "kirsch_field: resolution {} is below the minimum of 8",
            p.resolution
        )));
    }
    let n = p.resolution;
    let step = p.extent / n as f64;
    let mut g = FieldGrid::zeros(n, n);
    for i in 0..n {
        let y = -0.5 * p.extent + (i as f64 + 0.5) * step;
        for j in 0..n {
            let x = -0.5 * p.extent + (j as f64 + 0.5) * step;
            let r = x.hypot(y);
            if r < p.a {
                continue;
            }
            let theta = y.atan2(x) - p.rotation;
            let (srr, stt, srt) = kirsch_components(p.s, p.a, r, theta);
            g.data[i * n + j] = von_mises(srr, stt, srt);
        }
    }
    Ok(g)
}
