//! Universal constants of the boundary-bubble expansions.
//!
//! Every constant is an integral of a radial profile over the full space or
//! the upper half-space. [`compute_constants`] reduces each one to a single
//! radial integral and runs adaptive quadrature; [`closed_form_constants`]
//! evaluates the same quantities through Beta and digamma identities and is
//! kept as an independent oracle.

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{invalid, Result};
use crate::quadrature::integrate_half_line;

pub const QUAD_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniversalConstants {
    pub n: usize,
    pub c0: f64,
    pub p: f64,
    #[serde(rename = "S_n")]
    pub s_n: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub cbar: f64,
}

impl UniversalConstants {
    /// `c0^{2n/(n-2)} = (n(n-2))^{n/2}`, the prefactor shared by all five
    /// integrals.
    pub fn c0_pow(&self) -> f64 {
        amplitude(self.n)
    }

    /// Field-wise relative differences against another set, in the order
    /// `S_n, c2, c3, c4, c5`.
    pub fn rel_diffs(&self, other: &Self) -> [f64; 5] {
        let rd = |a: f64, b: f64| ((a - b) / b).abs();
        [
            rd(self.s_n, other.s_n),
            rd(self.c2, other.c2),
            rd(self.c3, other.c3),
            rd(self.c4, other.c4),
            rd(self.c5, other.c5),
        ]
    }
}

pub(crate) fn check_dim(n: usize) -> Result<()> {
    if n < 5 {
        return invalid(format!("dimension n = {n} is not supported: n >= 5 is required"));
    }
    Ok(())
}

/// Area of the unit sphere S^{n-1} in R^n.
pub fn sphere_area(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    2.0 * (h * std::f64::consts::PI.ln() - ln_gamma(h)).exp()
}

/// Integral of the last coordinate over the upper unit hemisphere of
/// S^{n-1}: the area of S^{n-2} divided by n - 1.
pub fn hemisphere_xn_moment(n: usize) -> f64 {
    sphere_area(n - 1) / (n as f64 - 1.0)
}

pub fn c0(n: usize) -> f64 {
    let nf = n as f64;
    (nf * (nf - 2.0)).powf((nf - 2.0) / 4.0)
}

fn amplitude(n: usize) -> f64 {
    let nf = n as f64;
    (nf * (nf - 2.0)).powf(nf / 2.0)
}

pub fn critical_exponent(n: usize) -> f64 {
    (n as f64 + 2.0) / (n as f64 - 2.0)
}

pub fn cbar(n: usize) -> f64 {
    (n as f64 - 2.0) / 2f64.powi(n as i32 - 1)
}

/// `r^a (1 + r^2)^{-b}` in log space, so that the far tail underflows to zero
/// instead of producing `inf * 0`.
fn radial(r: f64, a: f64, b: f64) -> f64 {
    if r <= 0.0 {
        return if a == 0.0 { 1.0 } else { 0.0 };
    }
    (a * r.ln() - b * r.mul_add(r, 1.0).ln()).exp()
}

pub fn compute_constants(n: usize) -> Result<UniversalConstants> {
    check_dim(n)?;
    let nf = n as f64;
    let amp = amplitude(n);
    let sigma = sphere_area(n);
    let q = |f: &dyn Fn(f64) -> f64| integrate_half_line(f, QUAD_REL_TOL).map(|r| r.value);

    let s_n = amp * 0.5 * sigma * q(&|r| radial(r, nf - 1.0, nf))?;
    let c2 = 0.5 * amp * sigma * q(&|r| radial(r, nf - 1.0, (nf + 2.0) / 2.0))?;
    let c3 = (nf - 2.0)
        * amp
        * hemisphere_xn_moment(n)
        * q(&|r| (r * r - 1.0) * radial(r, nf, nf + 1.0))?;
    let c4 = amp * (nf - 2.0).powi(2) / 8.0
        * sigma
        * q(&|r| (r * r - 1.0) * r.mul_add(r, 1.0).ln() * radial(r, nf - 1.0, nf + 1.0))?;
    let c5 = amp * (nf - 2.0) / nf * sigma * q(&|r| radial(r, nf + 1.0, nf + 1.0))?;

    Ok(UniversalConstants {
        n,
        c0: c0(n),
        p: critical_exponent(n),
        s_n,
        c2,
        c3,
        c4,
        c5,
        cbar: cbar(n),
    })
}

/// `int_0^inf r^a (1 + r^2)^{-b} dr = B((a+1)/2, b - (a+1)/2) / 2`.
fn beta_radial(a: f64, b: f64) -> f64 {
    let x = (a + 1.0) / 2.0;
    0.5 * ln_beta(x, b - x).exp()
}

/// Same radial integral with an extra `ln(1 + r^2)` weight: minus the
/// derivative of [`beta_radial`] in `b`.
fn beta_radial_log(a: f64, b: f64) -> f64 {
    let x = (a + 1.0) / 2.0;
    beta_radial(a, b) * (digamma(b) - digamma(b - x))
}

pub fn closed_form_constants(n: usize) -> Result<UniversalConstants> {
    check_dim(n)?;
    let nf = n as f64;
    let amp = amplitude(n);
    let sigma = sphere_area(n);
    Ok(UniversalConstants {
        n,
        c0: c0(n),
        p: critical_exponent(n),
        s_n: amp * 0.5 * sigma * beta_radial(nf - 1.0, nf),
        c2: 0.5 * amp * sigma * beta_radial(nf - 1.0, (nf + 2.0) / 2.0),
        c3: (nf - 2.0)
            * amp
            * hemisphere_xn_moment(n)
            * (beta_radial(nf + 2.0, nf + 1.0) - beta_radial(nf, nf + 1.0)),
        c4: amp * (nf - 2.0).powi(2) / 8.0
            * sigma
            * (beta_radial_log(nf + 1.0, nf + 1.0) - beta_radial_log(nf - 1.0, nf + 1.0)),
        c5: amp * (nf - 2.0) / nf * sigma * beta_radial(nf + 1.0, nf + 1.0),
        cbar: cbar(n),
    })
}
