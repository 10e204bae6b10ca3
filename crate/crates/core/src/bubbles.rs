//! Boundary bubbles on the half-space chart, their interaction quantities and
//! the M_eps neighbourhood check.
//!
//! Chart: `z` is the origin, the boundary is `{x_n = 0}` and the domain is
//! `{x_n > 0}`. Bubble centres are stored by their `n - 1` tangential
//! coordinates.

use serde::{Deserialize, Serialize};

use crate::constants::c0;
use crate::error::{invalid, Result};
use crate::expansion::{IntegratorMethod, IntegratorSpec};
use crate::hamiltonian::{dist2, Configuration, CurvatureModel};
use crate::mc::{self, Estimate, McOptions, Mixture, ProfileConsts};
use crate::quadrature::integrate_half_line;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bubble {
    /// Tangential coordinates of the centre; the normal coordinate is zero.
    pub center: Vec<f64>,
    pub lambda: f64,
}

impl Bubble {
    pub fn new(center: Vec<f64>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return invalid(format!("bubble rate must be positive, got {lambda}"));
        }
        if center.is_empty() || center.iter().any(|v| !v.is_finite()) {
            return invalid("bubble centre must be a finite tangential point");
        }
        Ok(Self { center, lambda })
    }

    /// Ambient dimension `n`.
    pub fn n(&self) -> usize {
        self.center.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleEnsemble {
    pub eps: f64,
    pub bubbles: Vec<Bubble>,
    pub alphas: Vec<f64>,
    /// Blow-up point in tangential coordinates (the chart origin).
    pub z: Vec<f64>,
    /// Configuration the ensemble was assembled from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Configuration>,
}

impl BubbleEnsemble {
    pub fn new(eps: f64, bubbles: Vec<Bubble>, alphas: Vec<f64>) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return invalid(format!("eps must lie in (0, 1), got {eps}"));
        }
        if bubbles.is_empty() || bubbles.len() != alphas.len() {
            return invalid("ensemble needs one amplitude per bubble");
        }
        let n = bubbles[0].n();
        if bubbles.iter().any(|b| b.n() != n) {
            return invalid("bubbles must share one dimension");
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return invalid("amplitudes must be positive");
        }
        Ok(Self {
            eps,
            bubbles,
            alphas,
            z: vec![0.0; n - 1],
            reference: None,
        })
    }

    pub fn n(&self) -> usize {
        self.bubbles[0].n()
    }

    pub fn m(&self) -> usize {
        self.bubbles.len()
    }

    pub(crate) fn mixture(&self, tail_weight: f64) -> Result<Mixture> {
        Mixture::new(
            self.n(),
            self.bubbles.iter().map(|b| b.center.clone()).collect(),
            self.bubbles.iter().map(|b| b.lambda).collect(),
            tail_weight,
        )
    }
}

/// `delta(x) = c0 lambda^{(n-2)/2} / (1 + lambda^2 |x - a|^2)^{(n-2)/2}` for
/// `x` in the closed half-space (length `n`).
pub fn eval_bubble(b: &Bubble, x: &[f64]) -> f64 {
    debug_assert!(x.len() == b.n() && x[b.n() - 1] >= 0.0);
    mc::profile(b.n(), c0(b.n()), &b.center, b.lambda, x).0
}

/// `(lambda_i/lambda_j + lambda_j/lambda_i + lambda_i lambda_j |x_i - x_j|^2)^{(2-n)/2}`.
pub fn eps_ij(bi: &Bubble, bj: &Bubble) -> f64 {
    let n = bi.n() as f64;
    let q = bi.lambda / bj.lambda
        + bj.lambda / bi.lambda
        + bi.lambda * bj.lambda * dist2(&bi.center, &bj.center);
    q.powf((2.0 - n) / 2.0)
}

/// Gradient of [`eps_ij`] in the tangential centre of `bi`:
/// `(n-2) eps_ij^{n/(n-2)} lambda_i lambda_j (x_j - x_i)`.
pub fn d_eps_ij_dx(bi: &Bubble, bj: &Bubble) -> Vec<f64> {
    let n = bi.n() as f64;
    let c = (n - 2.0) * eps_ij(bi, bj).powf(n / (n - 2.0)) * bi.lambda * bj.lambda;
    bi.center.iter().zip(&bj.center).map(|(xi, xj)| c * (xj - xi)).collect()
}

/// Half-space integral of `delta_j^p delta_i`.
pub fn pair_inner_product(bi: &Bubble, bj: &Bubble, spec: &IntegratorSpec) -> Result<Estimate> {
    let n = bi.n();
    if bj.n() != n {
        return invalid("bubbles must share one dimension");
    }
    let pc = ProfileConsts::new(n);
    if spec.method == IntegratorMethod::RadialAdaptive {
        if bi != bj {
            return invalid("radial quadrature handles only the self product of one bubble");
        }
        // lambda drops out: c0^{p+1} * (half of sigma) * int r^{n-1} (1+r^2)^{-n} dr
        let nf = n as f64;
        let r = integrate_half_line(
            |r| (((nf - 1.0) * r.ln()) - nf * (1.0 + r * r).ln()).exp(),
            spec.target_rel_err.min(1e-10),
        )?;
        let v = pc.c0.powf(pc.p + 1.0) * 0.5 * crate::constants::sphere_area(n) * r.value;
        return Ok(Estimate {
            mean: vec![v],
            stderr: vec![r.abs_err * v / r.value],
            samples: r.intervals * 15,
        });
    }
    let mix = Mixture::new(
        n,
        vec![bi.center.clone(), bj.center.clone()],
        vec![bi.lambda, bj.lambda],
        spec.tail_weight,
    )?;
    mc::integrate(&mix, 1, &spec.mc_options(), |x, out| {
        let (di, _) = mc::profile(n, pc.c0, &bi.center, bi.lambda, x);
        let (dj, _) = mc::profile(n, pc.c0, &bj.center, bj.lambda, x);
        out[0] = dj.powf(pc.p) * di;
    })
}

/// Half-space Dirichlet product `int grad delta_i . grad delta_j`, which equals
/// [`pair_inner_product`] because both profiles satisfy `-Laplace delta =
/// delta^p` with zero normal derivative on the boundary.
pub fn pair_dirichlet_product(bi: &Bubble, bj: &Bubble, spec: &IntegratorSpec) -> Result<Estimate> {
    let n = bi.n();
    let pc = ProfileConsts::new(n);
    let mix = Mixture::new(
        n,
        vec![bi.center.clone(), bj.center.clone()],
        vec![bi.lambda, bj.lambda],
        spec.tail_weight,
    )?;
    let opts: McOptions = spec.mc_options();
    mc::integrate(&mix, 1, &opts, |x, out| {
        let gi = grad_profile(n, pc.c0, bi, x);
        let gj = grad_profile(n, pc.c0, bj, x);
        out[0] = gi.iter().zip(&gj).map(|(a, b)| a * b).sum();
    })
}

/// Ambient gradient of a bubble at `x`.
pub(crate) fn grad_profile(n: usize, c0: f64, b: &Bubble, x: &[f64]) -> Vec<f64> {
    let (d, r2) = mc::profile(n, c0, &b.center, b.lambda, x);
    let l2 = b.lambda * b.lambda;
    let c = -(n as f64 - 2.0) * d * l2 / (1.0 + l2 * r2);
    (0..n)
        .map(|k| c * (x[k] - if k < n - 1 { b.center[k] } else { 0.0 }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: String,
    pub bubbles: Vec<usize>,
    pub value: f64,
    pub bound: f64,
    /// Signed distance to the bound; negative means violated.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MEpsReport {
    pub ok: bool,
    /// Every inequality evaluated, violated or not.
    pub checks: Vec<Violation>,
    pub violations: Vec<Violation>,
}

impl MEpsReport {
    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| {
                format!(
                    "{} for bubbles {:?}: value {:e}, bound {:e}, margin {:e}",
                    v.constraint, v.bubbles, v.value, v.bound, v.margin
                )
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Evaluate every M_eps inequality:
/// `|alpha_i^{4/(n-2)} K(x_i) - 1| < eps ln^2 eps`,
/// `eps / C <= 1/lambda_i <= C eps`, `|x_i - z| <= mu`, and
/// `eps^{(n-2)/n} / C <= |x_i - x_j| <= C eps^{(n-2)/n}`.
pub fn check_m_eps(ens: &BubbleEnsemble, c: f64, mu: f64, model: &CurvatureModel) -> Result<MEpsReport> {
    let n = ens.n();
    if model.n != n {
        return invalid("model and ensemble dimensions differ");
    }
    if !(c > 1.0 && mu > 0.0) {
        return invalid("M_eps needs C > 1 and mu > 0");
    }
    let eps = ens.eps;
    let nf = n as f64;
    let mut checks = Vec::new();
    let mut push = |name: &str, idx: Vec<usize>, value: f64, bound: f64, margin: f64| {
        checks.push(Violation {
            constraint: name.to_string(),
            bubbles: idx,
            value,
            bound,
            margin,
        });
    };
    let band = eps * eps.ln().powi(2);
    let sep = eps.powf((nf - 2.0) / nf);
    for (i, (b, &a)) in ens.bubbles.iter().zip(&ens.alphas).enumerate() {
        let rel: Vec<f64> = b.center.iter().zip(&ens.z).map(|(x, z)| x - z).collect();
        let dev = (a.powf(4.0 / (nf - 2.0)) * model.k_tangential(&rel) - 1.0).abs();
        push("|alpha^{4/(n-2)} K(x) - 1| < eps ln^2 eps", vec![i], dev, band, band - dev);
        let inv = 1.0 / b.lambda;
        push("eps / C <= 1/lambda", vec![i], inv, eps / c, inv - eps / c);
        push("1/lambda <= C eps", vec![i], inv, c * eps, c * eps - inv);
        let dz = rel.iter().map(|v| v * v).sum::<f64>().sqrt();
        push("|x - z| <= mu", vec![i], dz, mu, mu - dz);
    }
    for i in 0..ens.m() {
        for j in i + 1..ens.m() {
            let d = dist2(&ens.bubbles[i].center, &ens.bubbles[j].center).sqrt();
            push("eps^{(n-2)/n} / C <= |x_i - x_j|", vec![i, j], d, sep / c, d - sep / c);
            push("|x_i - x_j| <= C eps^{(n-2)/n}", vec![i, j], d, c * sep, c * sep - d);
        }
    }
    // the amplitude band is strict, the others are not
    let violations: Vec<Violation> = checks
        .iter()
        .filter(|v| if v.constraint.starts_with("|alpha") { v.margin <= 0.0 } else { v.margin < 0.0 })
        .cloned()
        .collect();
    Ok(MEpsReport {
        ok: violations.is_empty(),
        checks,
        violations,
    })
}
