//! Critical points of the Kirchhoff-Routh function: the antipodal closed form
//! for two points, and a Levenberg-Marquardt Newton search with deflation for
//! general `m`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::cbar;
use crate::error::{invalid, Error, Result};
use crate::hamiltonian::{
    eval_flat, grad_flat, hess_flat, min_separation, Configuration, CurvatureModel,
};
use crate::SEPARATION_GUARD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointReport {
    pub cfg: Configuration,
    pub value: f64,
    pub grad_norm: f64,
    pub hessian_spectrum: Vec<f64>,
    pub morse_index: usize,
    pub nondegenerate: bool,
    pub method: Method,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Hessian eigenvalues with `|mu| <= degeneracy_tol * ||H||` count as zero.
    pub degeneracy_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            degeneracy_tol: 1e-8,
        }
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending. Eigenvectors are
/// sign-normalised so their largest-magnitude entry is positive.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut idx: Vec<usize> = (0..a.nrows()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(a.nrows(), a.ncols());
    for (k, &i) in idx.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        vecs.set_column(k, &v);
    }
    (vals, vecs)
}

fn classify(
    model: &CurvatureModel,
    cfg: Configuration,
    method: Method,
    opts: &SolverOptions,
) -> Result<CriticalPointReport> {
    let m = cfg.m();
    let x = cfg.flat();
    let g = grad_flat(model, &x, m)?;
    let h = hess_flat(model, &x, m)?;
    let spectrum = h.clone().symmetric_eigenvalues();
    if spectrum.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigensolver returned non-finite values".into()));
    }
    let mut spectrum: Vec<f64> = spectrum.iter().copied().collect();
    spectrum.sort_by(f64::total_cmp);
    let norm = spectrum.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let zero = opts.degeneracy_tol * norm;
    Ok(CriticalPointReport {
        value: eval_flat(model, &x, m)?,
        grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
        morse_index: spectrum.iter().filter(|&&v| v < 0.0).count(),
        nondegenerate: spectrum.iter().all(|v| v.abs() > zero),
        hessian_spectrum: spectrum,
        cfg,
        method,
    })
}

/// `true` when eigenvalue `k` of the ascending list is separated from its
/// neighbours by more than `rel_gap * max|eigenvalue|`.
pub fn is_simple(vals: &[f64], k: usize, rel_gap: f64) -> bool {
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let gap = rel_gap * scale;
    (k == 0 || vals[k] - vals[k - 1] > gap) && (k + 1 == vals.len() || vals[k + 1] - vals[k] > gap)
}

/// Two-point critical configuration `(x, -x)` with
/// `x = (cbar / lambda)^{1/n} u`, where `(lambda, u)` is eigenpair `eig_index`
/// of `hessK1` in ascending order.
pub fn closed_form_m2(model: &CurvatureModel, eig_index: usize) -> Result<CriticalPointReport> {
    closed_form_m2_with(model, eig_index, &SolverOptions::default())
}

pub fn closed_form_m2_with(
    model: &CurvatureModel,
    eig_index: usize,
    opts: &SolverOptions,
) -> Result<CriticalPointReport> {
    let (vals, vecs) = sorted_eigen(&model.hess_k1);
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigensolver failed on hessK1".into()));
    }
    let Some(&lambda) = vals.get(eig_index) else {
        return invalid(format!(
            "eigenvalue index {eig_index} out of range for {} eigenvalues",
            vals.len()
        ));
    };
    if lambda <= 0.0 {
        return invalid(format!(
            "eigenvalue {eig_index} of hessK1 is {lambda:e}; the closed form needs a positive one"
        ));
    }
    let r = (cbar(model.n) / lambda).powf(1.0 / model.n as f64);
    let xbar: Vec<f64> = vecs.column(eig_index).iter().map(|v| r * v).collect();
    let cfg = Configuration::new(vec![xbar.clone(), xbar.iter().map(|v| -v).collect()])?;
    let report = classify(model, cfg, Method::ClosedForm, opts)?;
    // each block of the gradient balances forces of size lambda * r
    let scale = lambda * r;
    if report.grad_norm > 1e-12 * scale.max(1.0) {
        return Err(Error::Numerical(format!(
            "closed-form gradient norm {:e} exceeds 1e-12 * {scale:e}",
            report.grad_norm
        )));
    }
    Ok(report)
}

/// Deflation operator `prod_k (||x - r_k||^{-2} + 1)` over known roots and
/// the gradient of its logarithm.
fn deflation(x: &[f64], roots: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let mut eta = 1.0;
    let mut grad_log = vec![0.0; x.len()];
    for r in roots {
        let d2: f64 = x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
        let d2 = d2.max(1e-300);
        let f = 1.0 / d2 + 1.0;
        eta *= f;
        // d/dx ln(1/d2 + 1) = -2 (x - r) / (d2^2 f)
        let c = -2.0 / (d2 * d2 * f);
        for (g, (a, b)) in grad_log.iter_mut().zip(x.iter().zip(r)) {
            *g += c * (a - b);
        }
    }
    (eta, grad_log)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Damped Newton on `grad F = 0`. Steps solve `(H^2 + mu I) d = -H g`, which
/// is plain Newton as `mu -> 0` and gradient descent on `|g|^2 / 2` for large
/// `mu`; `mu` grows tenfold on rejection and shrinks threefold on acceptance.
pub fn newton_solve(
    model: &CurvatureModel,
    m: usize,
    initial: &Configuration,
    opts: &SolverOptions,
) -> Result<CriticalPointReport> {
    newton_deflated(model, m, initial, opts, &[])
}

/// [`newton_solve`] with steps rescaled by the deflation factor of the given
/// roots, so that they repel the iteration.
pub fn newton_deflated(
    model: &CurvatureModel,
    m: usize,
    initial: &Configuration,
    opts: &SolverOptions,
    roots: &[Vec<f64>],
) -> Result<CriticalPointReport> {
    if initial.m() != m || initial.dim() != model.dim() {
        return invalid("initial configuration does not match m and the model dimension");
    }
    let mut x = initial.flat();
    if min_separation(&x, m) <= SEPARATION_GUARD {
        return Err(Error::Domain("initial configuration has coincident points".into()));
    }
    let dim = x.len();
    let merit = |x: &[f64]| -> Result<f64> {
        let g = grad_flat(model, x, m)?;
        let (eta, _) = deflation(x, roots);
        Ok(0.5 * eta * eta * g.iter().map(|v| v * v).sum::<f64>())
    };
    let mut g = grad_flat(model, &x, m)?;
    let mut phi = merit(&x)?;
    let mut mu = 0.0;
    let mut singular_hits = 0usize;
    for _ in 0..opts.max_iter {
        if norm(&g) <= opts.tol {
            let cfg = Configuration::from_flat(&x, m)?;
            return classify(model, cfg, Method::Newton, opts);
        }
        let h = hess_flat(model, &x, m)?;
        let h2 = &h * &h;
        let scale = h2.diagonal().max().max(1e-300);
        let rhs = -(&h * DVector::from_column_slice(&g));
        let mut accepted = false;
        while mu <= 1e16 * scale {
            let a = &h2 + DMatrix::identity(dim, dim) * mu;
            let Some(chol) = a.cholesky() else {
                singular_hits += 1;
                mu = (mu * 10.0).max(1e-12 * scale);
                continue;
            };
            let mut d: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
            if !roots.is_empty() {
                let (_, gl) = deflation(&x, roots);
                let denom = 1.0 - gl.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
                // a non-positive denominator means the step heads straight back
                // to a known root; keep the undeflated direction in that case
                if denom > 1e-8 {
                    for v in &mut d {
                        *v /= denom;
                    }
                }
            }
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            if min_separation(&trial, m) > SEPARATION_GUARD {
                if let Ok(p) = merit(&trial) {
                    if p.is_finite() && p < phi {
                        x = trial;
                        phi = p;
                        mu /= 3.0;
                        accepted = true;
                        break;
                    }
                }
            }
            mu = (mu * 10.0).max(1e-12 * scale);
        }
        if !accepted {
            return Err(Error::Numerical(format!(
                "Newton stalled at gradient norm {:e} (damping exhausted{})",
                norm(&g),
                if singular_hits > 0 { ", singular system regularised" } else { "" }
            )));
        }
        g = grad_flat(model, &x, m)?;
    }
    if norm(&g) <= opts.tol {
        return classify(model, Configuration::from_flat(&x, m)?, Method::Newton, opts);
    }
    Err(Error::Numerical(format!(
        "Newton did not converge in {} iterations (gradient norm {:e})",
        opts.max_iter,
        norm(&g)
    )))
}

/// Sort points lexicographically so permutation-equivalent configurations
/// share one representative.
pub fn canonical(cfg: &Configuration) -> Configuration {
    let mut pts = cfg.points.clone();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Configuration { points: pts }
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if k == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(k + 1, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, &mut Vec::new(), &mut vec![false; m], &mut out);
    out
}

/// Equality up to a permutation of the points, at relative tolerance `rel`.
pub fn same_up_to_permutation(a: &Configuration, b: &Configuration, rel: f64) -> bool {
    if a.m() != b.m() || a.dim() != b.dim() {
        return false;
    }
    let scale = a
        .points
        .iter()
        .chain(&b.points)
        .map(|p| norm(p))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let close = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(x, y)| (x - y).abs() <= rel * scale);
    if a.m() <= 7 {
        permutations(a.m())
            .iter()
            .any(|perm| perm.iter().enumerate().all(|(i, &j)| close(&a.points[i], &b.points[j])))
    } else {
        let mut used = vec![false; b.m()];
        a.points.iter().all(|p| {
            match (0..b.m()).find(|&j| !used[j] && close(p, &b.points[j])) {
                Some(j) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
    }
}

fn permuted_roots(x: &[f64], m: usize) -> Vec<Vec<f64>> {
    let d = x.len() / m;
    if m > 6 {
        return vec![x.to_vec()];
    }
    permutations(m)
        .into_iter()
        .map(|perm| perm.iter().flat_map(|&j| x[j * d..(j + 1) * d].to_vec()).collect())
        .collect()
}

/// Ring seed: `m` points equally spaced on a circle of radius
/// `(cbar / lambda_max)^{1/n}` in the plane of the two top eigenvectors,
/// followed by random rotation, scaling and Gaussian jitter.
pub fn ring_seed(model: &CurvatureModel, m: usize, rng: &mut impl Rng) -> Configuration {
    let (vals, vecs) = sorted_eigen(&model.hess_k1);
    let d = model.dim();
    let top = vals[d - 1].abs().max(vals[0].abs()).max(1e-300);
    let lam = if vals[d - 1] > 0.0 { vals[d - 1] } else { top };
    let r0 = (cbar(model.n) / lam).powf(1.0 / model.n as f64);
    let u1 = vecs.column(d - 1);
    let u2 = vecs.column(d.saturating_sub(2));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let scale: f64 = rng.random_range(0.5..2.0);
    let points = (0..m)
        .map(|k| {
            let th = phase + std::f64::consts::TAU * k as f64 / m as f64;
            (0..d)
                .map(|c| {
                    let jitter: f64 = rng.sample(StandardNormal);
                    scale * r0 * (th.cos() * u1[c] + th.sin() * u2[c]) + 0.3 * r0 * jitter
                })
                .collect()
        })
        .collect();
    Configuration { points }
}

/// Seeds per deflation round. Fixed so results do not depend on the thread
/// count.
const BATCH: usize = 16;

/// Multi-start Newton from ring seeds, deflating roots found in earlier
/// batches. Results are deduplicated modulo point permutations and sorted by
/// value of `F`, then lexicographically.
pub fn deflated_search(
    model: &CurvatureModel,
    m: usize,
    n_seeds: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Vec<CriticalPointReport> {
    let mut found: Vec<CriticalPointReport> = Vec::new();
    let mut roots: Vec<Vec<f64>> = Vec::new();
    let mut start = 0;
    while start < n_seeds {
        let end = (start + BATCH).min(n_seeds);
        let batch: Vec<Option<CriticalPointReport>> = (start..end)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let init = ring_seed(model, m, &mut rng);
                newton_deflated(model, m, &init, opts, &roots).ok()
            })
            .collect();
        for rep in batch.into_iter().flatten() {
            if found.iter().any(|f| same_up_to_permutation(&f.cfg, &rep.cfg, 1e-6)) {
                continue;
            }
            roots.extend(permuted_roots(&rep.cfg.flat(), m));
            found.push(CriticalPointReport {
                cfg: canonical(&rep.cfg),
                ..rep
            });
        }
        start = end;
    }
    sort_reports(&mut found);
    found
}

/// Closed-form points for `m = 2` (one per positive simple eigenvalue of
/// `hessK1`, ascending), followed by the search results not already among
/// them.
pub fn collect_critical_points(
    model: &CurvatureModel,
    m: usize,
    n_seeds: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<Vec<CriticalPointReport>> {
    if m < 2 {
        return invalid("a configuration needs at least two points");
    }
    let mut out = Vec::new();
    if m == 2 {
        let (vals, _) = sorted_eigen(&model.hess_k1);
        for k in 0..vals.len() {
            if vals[k] > 0.0 && is_simple(&vals, k, 1e-8) {
                out.push(closed_form_m2_with(model, k, opts)?);
            }
        }
    }
    for rep in deflated_search(model, m, n_seeds, seed, opts) {
        if !out.iter().any(|c| same_up_to_permutation(&c.cfg, &rep.cfg, 1e-6)) {
            out.push(rep);
        }
    }
    Ok(out)
}

pub fn sort_reports(reports: &mut [CriticalPointReport]) {
    reports.sort_by(|a, b| {
        a.value.total_cmp(&b.value).then_with(|| {
            a.cfg
                .flat()
                .iter()
                .zip(b.cfg.flat().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
}
