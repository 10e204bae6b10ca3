//! Gradient pairings of the subcritical functional at `u = sum alpha_j delta_j`.
//!
//! Numerically, `<grad I_eps(u), h> = <u, h> - int K~ u^{p-eps} h` over the
//! half-space with the local curvature model
//! `K~(x) = K_z + s dK/dnu x_n + (t/2) <hessK1 x', x'>`, and `<u, h>` taken
//! through `<delta_j, h> = int delta_j^p h`. The test functions are
//! `delta_i`, `lambda_i d(delta_i)/d(lambda_i)` and
//! `lambda_i^{-1} d(delta_i)/d(x_i)`. Analytically, the leading-order
//! formulas in the universal constants.

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::bubbles::{d_eps_ij_dx, eps_ij, grad_profile, Bubble, BubbleEnsemble};
use crate::constants::{c0, critical_exponent, sphere_area, UniversalConstants};
use crate::error::{invalid, Error, Result};
use crate::fit::{fit_power_law, PowerFit};
use crate::hamiltonian::{Configuration, CurvatureModel};
use crate::mc::{self, Estimate, McOptions, Point, DEFAULT_TAIL_WEIGHT};
use crate::reduction::{assemble, MEpsParams, Perturbation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorMethod {
    ImportanceMc,
    /// One-dimensional adaptive quadrature; only for single-bubble radial
    /// integrals.
    RadialAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub method: IntegratorMethod,
    pub samples: usize,
    pub seed: u64,
    pub target_rel_err: f64,
    pub tail_weight: f64,
    pub antithetic: bool,
    pub control_variates: bool,
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        Self {
            method: IntegratorMethod::ImportanceMc,
            samples: 1_000_000,
            seed: 0,
            target_rel_err: 0.01,
            tail_weight: DEFAULT_TAIL_WEIGHT,
            antithetic: true,
            control_variates: true,
        }
    }
}

impl IntegratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return invalid("integrator needs at least one sample");
        }
        if !(self.target_rel_err > 0.0) {
            return invalid("target relative error must be positive");
        }
        if !(0.0..1.0).contains(&self.tail_weight) {
            return invalid("tail weight must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn mc_options(&self) -> McOptions {
        McOptions {
            samples: self.samples,
            seed: self.seed,
            antithetic: self.antithetic,
        }
    }
}

/// Scales of the normal and tangential parts of the local curvature model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartConvention {
    pub s: f64,
    pub t: f64,
}

impl Default for ChartConvention {
    fn default() -> Self {
        Self { s: -2.0, t: 2.0 }
    }
}

impl ChartConvention {
    /// `K~(x)` at an ambient point of the closed half-space, chart origin at z.
    pub fn k_tilde(&self, model: &CurvatureModel, x: &[f64]) -> f64 {
        let n = model.n;
        model.k_z + self.s * model.dk_dnu * x[n - 1] + 0.5 * self.t * model.quad_form(&x[..n - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingKind {
    Alpha,
    Lambda,
    X,
}

impl PairingKind {
    pub const ALL: [PairingKind; 3] = [PairingKind::Alpha, PairingKind::Lambda, PairingKind::X];

    pub fn name(self) -> &'static str {
        match self {
            PairingKind::Alpha => "alpha",
            PairingKind::Lambda => "lambda",
            PairingKind::X => "x",
        }
    }

    fn width(self, n: usize) -> usize {
        match self {
            PairingKind::X => n - 1,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub kind: PairingKind,
    pub eps: f64,
    pub bubble: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Euclidean norm of `numeric - analytic`.
    pub abs_err: f64,
    /// `abs_err / leading`.
    pub rel_err: f64,
    /// Size of the largest single term of the analytic formula.
    pub leading: f64,
    /// Remainder order with unit constant.
    pub budget: f64,
    pub samples: usize,
    pub se_target_met: bool,
}

impl PairingReport {
    fn new(
        kind: PairingKind,
        eps: f64,
        bubble: usize,
        analytic: Vec<f64>,
        est: Estimate,
        leading: f64,
        budget: f64,
        target: f64,
    ) -> Self {
        let abs_err = norm_diff(&est.mean, &analytic);
        let se = est.stderr_norm();
        Self {
            kind,
            eps,
            bubble,
            analytic,
            numeric: est.mean,
            stderr: est.stderr,
            abs_err,
            rel_err: abs_err / leading,
            leading,
            budget,
            samples: est.samples,
            se_target_met: se <= target * leading,
        }
    }

    pub fn stderr_norm(&self) -> f64 {
        self.stderr.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Fail with a numerical error when the standard error target was missed.
    pub fn require_target(&self) -> Result<&Self> {
        if self.se_target_met {
            Ok(self)
        } else {
            Err(Error::Numerical(format!(
                "{} pairing at eps = {:e}: standard error {:e} exceeds the target on leading term {:e} \
                 with {} samples",
                self.kind.name(),
                self.eps,
                self.stderr_norm(),
                self.leading,
                self.samples
            )))
        }
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_index(ens: &BubbleEnsemble, model: &CurvatureModel, i: usize) -> Result<()> {
    if model.n != ens.n() {
        return invalid("model and ensemble dimensions differ");
    }
    if i >= ens.m() {
        return invalid(format!("bubble index {i} out of range for {} bubbles", ens.m()));
    }
    Ok(())
}

fn rel_center(ens: &BubbleEnsemble, i: usize) -> Vec<f64> {
    ens.bubbles[i].center.iter().zip(&ens.z).map(|(x, z)| x - z).collect()
}

/// `alpha_i S_n (1 - alpha_i^{p-1} K(x_i))`.
pub fn analytic_pairing_alpha(model: &CurvatureModel, k: &UniversalConstants, ens: &BubbleEnsemble, i: usize) -> f64 {
    let a = ens.alphas[i];
    let kx = model.k_tangential(&rel_center(ens, i));
    a * k.s_n * (1.0 - a.powf(k.p - 1.0) * kx)
}

/// `alpha_i^p c4 K(x_i) eps - alpha_i^p (c3 / lambda_i) dK/dnu`.
pub fn analytic_pairing_lambda(model: &CurvatureModel, k: &UniversalConstants, ens: &BubbleEnsemble, i: usize) -> f64 {
    let (t1, t2) = lambda_terms(model, k, ens, i);
    t1 - t2
}

fn lambda_terms(model: &CurvatureModel, k: &UniversalConstants, ens: &BubbleEnsemble, i: usize) -> (f64, f64) {
    let ap = ens.alphas[i].powf(k.p);
    let kx = model.k_tangential(&rel_center(ens, i));
    (ap * k.c4 * kx * ens.eps, ap * k.c3 / ens.bubbles[i].lambda * model.dk_dnu)
}

/// `-sum_{j != i} alpha_j (c2 / lambda_i) d(eps_ij)/d(x_i) - alpha_i^p c5 grad K(x_i) / lambda_i`.
pub fn analytic_pairing_x(model: &CurvatureModel, k: &UniversalConstants, ens: &BubbleEnsemble, i: usize) -> Vec<f64> {
    let (pair, own) = x_terms(model, k, ens, i);
    pair.iter().zip(&own).map(|(a, b)| a + b).collect()
}

fn x_terms(model: &CurvatureModel, k: &UniversalConstants, ens: &BubbleEnsemble, i: usize) -> (Vec<f64>, Vec<f64>) {
    let bi = &ens.bubbles[i];
    let d = model.dim();
    let mut pair = vec![0.0; d];
    for (j, bj) in ens.bubbles.iter().enumerate() {
        if j == i {
            continue;
        }
        let g = d_eps_ij_dx(bi, bj);
        for c in 0..d {
            pair[c] -= ens.alphas[j] * k.c2 / bi.lambda * g[c];
        }
    }
    let ap = ens.alphas[i].powf(k.p);
    let own = model
        .hess_apply(&rel_center(ens, i))
        .into_iter()
        .map(|g| -ap * k.c5 * g / bi.lambda)
        .collect();
    (pair, own)
}

/// Largest individual term of the analytic formula for `kind`.
pub fn leading_term(model: &CurvatureModel, k: &UniversalConstants, ens: &BubbleEnsemble, i: usize, kind: PairingKind) -> f64 {
    match kind {
        PairingKind::Alpha => ens.alphas[i] * k.s_n,
        PairingKind::Lambda => {
            let (a, b) = lambda_terms(model, k, ens, i);
            a.abs().max(b.abs())
        }
        PairingKind::X => {
            let (pair, own) = x_terms(model, k, ens, i);
            norm(&pair).max(norm(&own))
        }
    }
}

/// Remainder orders with unit constants: `eps |ln eps|`,
/// `eps^2 |ln eps| + sum_j eps_ij`, and `eps^2 ln^2 eps`.
pub fn error_budget(ens: &BubbleEnsemble, i: usize, kind: PairingKind) -> f64 {
    let e = ens.eps;
    let l = e.ln().abs();
    match kind {
        PairingKind::Alpha => e * l,
        PairingKind::Lambda => {
            let inter: f64 = (0..ens.m())
                .filter(|&j| j != i)
                .map(|j| eps_ij(&ens.bubbles[i], &ens.bubbles[j]))
                .sum();
            e * e * l + inter
        }
        PairingKind::X => e * e * l * l,
    }
}

pub fn analytic_pairing(model: &CurvatureModel, k: &UniversalConstants, ens: &BubbleEnsemble, i: usize, kind: PairingKind) -> Vec<f64> {
    match kind {
        PairingKind::Alpha => vec![analytic_pairing_alpha(model, k, ens, i)],
        PairingKind::Lambda => vec![analytic_pairing_lambda(model, k, ens, i)],
        PairingKind::X => analytic_pairing_x(model, k, ens, i),
    }
}

/// `delta^{-eps}(x) = (c0 lambda^{(n-2)/2})^{-eps} (1 + lambda^2 |x - a|^2)^{eps (n-2)/2}`.
pub fn delta_eps_factor(b: &Bubble, eps: f64, x: &[f64]) -> f64 {
    (-eps * crate::bubbles::eval_bubble(b, x).ln()).exp()
}

/// `1 - eps ln delta(x)`.
pub fn delta_eps_factor_first_order(b: &Bubble, eps: f64, x: &[f64]) -> f64 {
    1.0 - eps * crate::bubbles::eval_bubble(b, x).ln()
}

/// Per-point quantities shared by the pairing integrands.
struct Frame {
    n: usize,
    hd: f64,
    p: f64,
    /// `ln(c0 lambda_j^{(n-2)/2})`.
    ln_pref: Vec<f64>,
    lambdas: Vec<f64>,
    alphas: Vec<f64>,
}

impl Frame {
    fn new(ens: &BubbleEnsemble) -> Self {
        let n = ens.n();
        let hd = (n as f64 - 2.0) / 2.0;
        let c = c0(n);
        Self {
            n,
            hd,
            p: critical_exponent(n),
            ln_pref: ens.bubbles.iter().map(|b| c.ln() + hd * b.lambda.ln()).collect(),
            lambdas: ens.bubbles.iter().map(|b| b.lambda).collect(),
            alphas: ens.alphas.clone(),
        }
    }

    #[inline]
    fn ln_delta(&self, pt: &Point, j: usize) -> f64 {
        self.ln_pref[j] - self.hd * pt.ln_s[j]
    }
}

/// Precomputed control-variate data for bubble `i`.
struct Controls {
    /// `alpha_i - K(x_i) alpha_i^{p-eps} (c0 lambda_i^{(n-2)/2})^{-eps}`.
    cv_scalar: f64,
    /// `-alpha_i^p t hessK1 (x_i - z)`.
    g1: Vec<f64>,
    /// `-p K(x_i) alpha_i^{p-1} sum_j alpha_j grad delta_j(x_i)`.
    g2: Vec<f64>,
    /// Exact means of the `g1` and `g2` variates.
    mean: Vec<f64>,
}

fn controls(model: &CurvatureModel, ens: &BubbleEnsemble, i: usize, conv: &ChartConvention, fr: &Frame) -> Controls {
    let n = fr.n;
    let d = n - 1;
    let nf = n as f64;
    let p = fr.p;
    let eps = ens.eps;
    let bi = &ens.bubbles[i];
    let ai = fr.alphas[i];
    let lam = bi.lambda;
    let rel = rel_center(ens, i);
    let kx = model.k_tangential(&rel);
    let cv_scalar = ai - kx * ai.powf(p - eps) * (-eps * fr.ln_pref[i]).exp();

    let g1: Vec<f64> = model.hess_apply(&rel).iter().map(|g| -ai.powf(p) * conv.t * g).collect();
    let c = c0(n);
    let mut g2 = vec![0.0; d];
    let mut at = vec![0.0; n];
    at[..d].copy_from_slice(&bi.center);
    for (j, bj) in ens.bubbles.iter().enumerate() {
        if j == i {
            continue;
        }
        let gd = grad_profile(n, c, bj, &at);
        for k in 0..d {
            g2[k] += -p * kx * ai.powf(p - 1.0) * fr.alphas[j] * gd[k];
        }
    }
    // int y_k^2 delta^p h_x / ... : the c5/(2 lambda) and M2 moments
    let c5_like = (nf - 2.0) / nf * c.powf(p + 1.0) * sphere_area(n) * half_beta(n + 1, nf + 1.0);
    let m1 = c5_like / (2.0 * lam);
    let m2 = (nf - 2.0) * c.powf(p) * lam.powf(-nf / 2.0) / (2.0 * nf) * sphere_area(n) * half_beta(n + 1, (nf + 4.0) / 2.0);
    let mean = (0..d).map(|k| g1[k] * m1 + g2[k] * m2).collect();
    Controls {
        cv_scalar,
        g1,
        g2,
        mean,
    }
}

/// `int_0^inf r^a (1 + r^2)^{-b} dr`.
fn half_beta(a: usize, b: f64) -> f64 {
    let a1 = (a as f64 + 1.0) / 2.0;
    0.5 * ln_beta(a1, b - a1).exp()
}

/// Monte Carlo estimates of `<grad I_eps(u), h>` for the requested kinds,
/// sharing one sample set. `u` is the ensemble with no remainder term.
pub fn numeric_pairings(
    model: &CurvatureModel,
    ens: &BubbleEnsemble,
    i: usize,
    kinds: &[PairingKind],
    spec: &IntegratorSpec,
    conv: &ChartConvention,
) -> Result<Vec<Estimate>> {
    check_index(ens, model, i)?;
    spec.validate()?;
    if spec.method != IntegratorMethod::ImportanceMc {
        return invalid("pairings over several bubbles need the importance-sampled integrator");
    }
    let n = ens.n();
    let d = n - 1;
    let fr = Frame::new(ens);
    let ctl = controls(model, ens, i, conv, &fr);
    let use_cv = spec.control_variates;
    let offsets: Vec<usize> = kinds
        .iter()
        .scan(0, |acc, k| {
            let o = *acc;
            *acc += k.width(n);
            Some(o)
        })
        .collect();
    let width: usize = kinds.iter().map(|k| k.width(n)).sum();
    let mix = ens.mixture(spec.tail_weight)?;
    let ci = ens.bubbles[i].center.clone();
    let lam = fr.lambdas[i];
    let p = fr.p;
    let eps = ens.eps;
    let m = ens.m();

    let est = mc::integrate_points(&mix, width, &spec.mc_options(), |pt, out| {
        let x = pt.x;
        let mut u = 0.0;
        let mut sum_p = 0.0;
        let mut di = 0.0;
        let mut dpi = 0.0;
        for j in 0..m {
            let ld = fr.ln_delta(pt, j);
            let dj = ld.exp();
            let dp = (p * ld).exp();
            u += fr.alphas[j] * dj;
            sum_p += fr.alphas[j] * dp;
            if j == i {
                di = dj;
                dpi = dp;
            }
        }
        debug_assert!(u > 0.0);
        let core = sum_p - conv.k_tilde(model, x) * ((p - eps) * u.ln()).exp();
        let s = lam * lam * pt.r2[i];
        let inv = 1.0 / (1.0 + s);
        let core_cv = if use_cv { core - ctl.cv_scalar * dpi } else { core };
        for (kind, &o) in kinds.iter().zip(&offsets) {
            match kind {
                PairingKind::Alpha => out[o] = core * di,
                PairingKind::Lambda => out[o] = core_cv * fr.hd * di * (1.0 - s) * inv,
                PairingKind::X => {
                    let mut gy1 = 0.0;
                    let mut gy2 = 0.0;
                    if use_cv {
                        for k in 0..d {
                            let y = x[k] - ci[k];
                            gy1 += y * ctl.g1[k];
                            gy2 += y * ctl.g2[k];
                        }
                    }
                    let corr = if use_cv { gy1 * dpi + gy2 * dpi / di } else { 0.0 };
                    let base = (n as f64 - 2.0) * di * lam * inv;
                    for k in 0..d {
                        out[o + k] = (core_cv - corr) * base * (x[k] - ci[k]);
                    }
                }
            }
        }
    })?;

    Ok(kinds
        .iter()
        .zip(&offsets)
        .map(|(kind, &o)| {
            let w = kind.width(n);
            let mut mean = est.mean[o..o + w].to_vec();
            if use_cv && *kind == PairingKind::X {
                for k in 0..w {
                    mean[k] += ctl.mean[k];
                }
            }
            Estimate {
                mean,
                stderr: est.stderr[o..o + w].to_vec(),
                samples: est.samples,
            }
        })
        .collect())
}

pub fn numeric_pairing(
    model: &CurvatureModel,
    ens: &BubbleEnsemble,
    i: usize,
    kind: PairingKind,
    spec: &IntegratorSpec,
    conv: &ChartConvention,
) -> Result<Estimate> {
    Ok(numeric_pairings(model, ens, i, &[kind], spec, conv)?.remove(0))
}

/// Analytic and numeric pairings of bubble `i` for every kind.
pub fn pairing_reports(
    model: &CurvatureModel,
    k: &UniversalConstants,
    ens: &BubbleEnsemble,
    i: usize,
    spec: &IntegratorSpec,
    conv: &ChartConvention,
) -> Result<Vec<PairingReport>> {
    let est = numeric_pairings(model, ens, i, &PairingKind::ALL, spec, conv)?;
    Ok(PairingKind::ALL
        .iter()
        .zip(est)
        .map(|(&kind, e)| {
            PairingReport::new(
                kind,
                ens.eps,
                i,
                analytic_pairing(model, k, ens, i, kind),
                e,
                leading_term(model, k, ens, i, kind),
                error_budget(ens, i, kind),
                spec.target_rel_err,
            )
        })
        .collect())
}

/// `<u, h>` evaluated two ways on one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerProductCheck {
    /// `sum_j alpha_j int delta_j^p h`.
    pub weak: Estimate,
    /// `sum_j alpha_j int grad delta_j . grad h`.
    pub dirichlet: Estimate,
    /// `dirichlet - weak`, with its own standard error.
    pub difference: Estimate,
}

pub fn inner_product_check(ens: &BubbleEnsemble, i: usize, kind: PairingKind, spec: &IntegratorSpec) -> Result<InnerProductCheck> {
    if i >= ens.m() {
        return invalid(format!("bubble index {i} out of range for {} bubbles", ens.m()));
    }
    spec.validate()?;
    let n = ens.n();
    let d = n - 1;
    let w = kind.width(n);
    let fr = Frame::new(ens);
    let mix = ens.mixture(spec.tail_weight)?;
    let bi = ens.bubbles[i].clone();
    let lam = bi.lambda;
    let c = c0(n);
    let est = mc::integrate_points(&mix, 3 * w, &spec.mc_options(), |pt, out| {
        let x = pt.x;
        let mut weak_w = 0.0;
        let mut grad_u = vec![0.0; n];
        for (j, b) in ens.bubbles.iter().enumerate() {
            weak_w += fr.alphas[j] * (fr.p * fr.ln_delta(pt, j)).exp();
            let g = grad_profile(n, c, b, x);
            for k in 0..n {
                grad_u[k] += fr.alphas[j] * g[k];
            }
        }
        let di = fr.ln_delta(pt, i).exp();
        let gdi = grad_profile(n, c, &bi, x);
        let l2 = lam * lam;
        let s = l2 * pt.r2[i];
        let inv = 1.0 / (1.0 + s);
        let y: Vec<f64> = (0..n).map(|k| x[k] - if k < d { bi.center[k] } else { 0.0 }).collect();
        let mut put = |slot: usize, h: f64, gh: &[f64]| {
            let dir: f64 = grad_u.iter().zip(gh).map(|(a, b)| a * b).sum();
            out[slot] = weak_w * h;
            out[w + slot] = dir;
            out[2 * w + slot] = dir - weak_w * h;
        };
        match kind {
            PairingKind::Alpha => put(0, di, &gdi),
            PairingKind::Lambda => {
                let hd = fr.hd;
                let gh: Vec<f64> = (0..n)
                    .map(|k| hd * (gdi[k] * (1.0 - s) * inv - 4.0 * di * l2 * y[k] * inv * inv))
                    .collect();
                put(0, hd * di * (1.0 - s) * inv, &gh);
            }
            PairingKind::X => {
                let c2h = (n as f64 - 2.0) * lam;
                for kk in 0..d {
                    let gh: Vec<f64> = (0..n)
                        .map(|l| {
                            let kron = if l == kk { inv } else { 0.0 };
                            c2h * (gdi[l] * y[kk] * inv + di * (kron - 2.0 * l2 * y[l] * y[kk] * inv * inv))
                        })
                        .collect();
                    put(kk, c2h * di * y[kk] * inv, &gh);
                }
            }
        }
    })?;
    let part = |o: usize| Estimate {
        mean: est.mean[o..o + w].to_vec(),
        stderr: est.stderr[o..o + w].to_vec(),
        samples: est.samples,
    };
    Ok(InnerProductCheck {
        weak: part(0),
        dirichlet: part(w),
        difference: part(2 * w),
    })
}

/// `int K~ u^{2n/(n-2)}` over the half-ball of the given radius about z.
pub fn energy_near_point(
    model: &CurvatureModel,
    ens: &BubbleEnsemble,
    radius: f64,
    spec: &IntegratorSpec,
    conv: &ChartConvention,
) -> Result<Estimate> {
    if model.n != ens.n() {
        return invalid("model and ensemble dimensions differ");
    }
    if !(radius > 0.0) {
        return invalid("radius must be positive");
    }
    spec.validate()?;
    let n = ens.n();
    let fr = Frame::new(ens);
    let mix = ens.mixture(spec.tail_weight)?;
    let r2max = radius * radius;
    let z = ens.z.clone();
    let est = mc::integrate_points(&mix, 1, &spec.mc_options(), |pt, out| {
        let x = pt.x;
        let mut d2 = x[n - 1] * x[n - 1];
        for k in 0..n - 1 {
            d2 += (x[k] - z[k]).powi(2);
        }
        if d2 >= r2max {
            return;
        }
        let u: f64 = (0..ens.m()).map(|j| fr.alphas[j] * fr.ln_delta(pt, j).exp()).sum();
        let mut local = x.to_vec();
        for k in 0..n - 1 {
            local[k] -= z[k];
        }
        out[0] = conv.k_tilde(model, &local) * ((fr.p + 1.0) * u.ln()).exp();
    })?;
    Ok(est)
}

/// `m S_n / K(z)^{(n-2)/2}`.
pub fn quantized_energy(model: &CurvatureModel, k: &UniversalConstants, m: usize) -> f64 {
    m as f64 * k.s_n / model.k_z.powf((model.n as f64 - 2.0) / 2.0)
}

/// Outcome of one candidate chart convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionTrial {
    pub parameter: String,
    pub value: f64,
    pub rel_err: f64,
    pub stderr_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionReport {
    pub chosen: ChartConvention,
    pub eps: f64,
    pub trials: Vec<ConventionTrial>,
}

/// Pin the chart scales by experiment with one bubble: `s` from the lambda
/// pairing at `Lambda = 0.1` with the bubble at z, `t` from the x pairing of a
/// bubble displaced along the tangential axes, without control variates.
/// Each candidate's relative residual is recorded; the smallest wins.
pub fn calibrate_convention(model: &CurvatureModel, k: &UniversalConstants, spec: &IntegratorSpec) -> Result<ConventionReport> {
    let n = model.n;
    let d = n - 1;
    let eps = 1e-4;
    let rho = crate::reduction::balance_ratio(model, k)?;
    let mut trials = Vec::new();

    let single = |center: Vec<f64>, lambda: f64| -> Result<BubbleEnsemble> {
        let a = model.k_tangential(&center).powf(-(n as f64 - 2.0) / 4.0);
        BubbleEnsemble::new(eps, vec![Bubble::new(center, lambda)?], vec![a])
    };
    let on_z = single(vec![0.0; d], 1.0 / (rho * eps * 1.1))?;
    let an = analytic_pairing_lambda(model, k, &on_z, 0);
    let lead = leading_term(model, k, &on_z, 0, PairingKind::Lambda);
    let mut best_s = (f64::INFINITY, 0.0);
    for s in [-2.0, -1.0, 1.0, 2.0] {
        let conv = ChartConvention { s, t: 2.0 };
        let e = numeric_pairing(model, &on_z, 0, PairingKind::Lambda, spec, &conv)?;
        let rel = (e.mean[0] - an).abs() / lead;
        trials.push(ConventionTrial {
            parameter: "s".into(),
            value: s,
            rel_err: rel,
            stderr_rel: e.stderr[0] / lead,
        });
        if rel < best_s.0 {
            best_s = (rel, s);
        }
    }

    let off = single(vec![0.05; d], 1.0 / (rho * eps))?;
    let an = analytic_pairing_x(model, k, &off, 0);
    let lead = leading_term(model, k, &off, 0, PairingKind::X);
    let plain = IntegratorSpec {
        control_variates: false,
        ..spec.clone()
    };
    let mut best_t = (f64::INFINITY, 0.0);
    for t in [1.0, 2.0] {
        let conv = ChartConvention { s: best_s.1, t };
        let e = numeric_pairing(model, &off, 0, PairingKind::X, &plain, &conv)?;
        let rel = norm_diff(&e.mean, &an) / lead;
        trials.push(ConventionTrial {
            parameter: "t".into(),
            value: t,
            rel_err: rel,
            stderr_rel: e.stderr_norm() / lead,
        });
        if rel < best_t.0 {
            best_t = (rel, t);
        }
    }
    Ok(ConventionReport {
        chosen: ChartConvention {
            s: best_s.1,
            t: best_t.1,
        },
        eps,
        trials,
    })
}

/// Scaling fit of one pairing kind's residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindFit {
    pub kind: PairingKind,
    pub fit: PowerFit,
    pub expected_order: f64,
    /// Power of `ln(1/eps)` divided out before fitting.
    pub log_power: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTable {
    pub rows: Vec<PairingReport>,
    pub fits: Vec<KindFit>,
}

pub const ORDER_TOLERANCE: f64 = 0.15;

/// Expected residual exponent and log power per kind. For `x` the residual is
/// first normalised by `eps^{(n-2)/n} / lambda_i`.
pub fn expected_order(n: usize, kind: PairingKind) -> (f64, f64) {
    let nf = n as f64;
    match kind {
        PairingKind::Alpha => (1.0, 1.0),
        PairingKind::Lambda => (1.0 + (nf - 4.0) / nf, 0.0),
        PairingKind::X => (2.0 / nf, 2.0),
    }
}

fn fit_input(row: &PairingReport, n: usize, lambda: f64) -> (f64, f64) {
    let nf = n as f64;
    match row.kind {
        PairingKind::X => {
            let sc = lambda / row.eps.powf((nf - 2.0) / nf);
            (row.abs_err * sc, row.stderr_norm() * sc)
        }
        _ => (row.abs_err, row.stderr_norm()),
    }
}

/// Pairings of bubble `i` at each eps for the ensemble assembled from `xibar`
/// at zero perturbation, with log-log fits of the residuals.
pub fn verify_expansion(
    model: &CurvatureModel,
    k: &UniversalConstants,
    xibar: &Configuration,
    eps_list: &[f64],
    i: usize,
    spec: &IntegratorSpec,
    conv: &ChartConvention,
) -> Result<ExpansionTable> {
    if eps_list.is_empty() {
        return invalid("eps list is empty");
    }
    let mut rows = Vec::new();
    let mut lambdas = Vec::new();
    for &eps in eps_list {
        let asm = assemble(model, k, xibar, eps, &Perturbation::zero(xibar.m(), model.dim()), &MEpsParams::default())?;
        lambdas.push(asm.ensemble.bubbles[i].lambda);
        rows.extend(pairing_reports(model, k, &asm.ensemble, i, spec, conv)?);
    }
    let mut fits = Vec::new();
    if eps_list.len() >= 2 {
        for kind in PairingKind::ALL {
            let (order, lp) = expected_order(model.n, kind);
            let mut x = Vec::new();
            let mut y = Vec::new();
            let mut se = Vec::new();
            for (r, &lam) in rows.iter().filter(|r| r.kind == kind).zip(&lambdas) {
                let (v, s) = fit_input(r, model.n, lam);
                x.push(r.eps);
                y.push(v);
                se.push(s);
            }
            let fit = fit_power_law(&x, &y, Some(&se), lp)?;
            fits.push(KindFit {
                kind,
                fit,
                expected_order: order,
                log_power: lp,
                within_tolerance: (fit.slope - order).abs() <= ORDER_TOLERANCE,
            });
        }
    }
    Ok(ExpansionTable { rows, fits })
}
