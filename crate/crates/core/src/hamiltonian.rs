//! The Kirchhoff-Routh function
//! `F(xi) = 1/2 sum_i <H xi_i, xi_i> + sum_{i<j} |xi_i - xi_j|^{-(n-2)}`
//! on configurations of `m` points in R^{n-1}, with `H = D^2 K_1(z)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::SEPARATION_GUARD;

/// Default bound on the smallest singular value of `hessK1`.
pub const DEFAULT_NONDEGENERACY_TOL: f64 = 1e-10;

/// Local curvature data at the boundary point `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureModel {
    pub n: usize,
    pub k_z: f64,
    pub dk_dnu: f64,
    pub hess_k1: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    n: usize,
    #[serde(rename = "K_z")]
    k_z: f64,
    #[serde(rename = "dK_dnu")]
    dk_dnu: f64,
    #[serde(rename = "hessK1")]
    hess_k1: Vec<f64>,
}

impl CurvatureModel {
    pub fn new(n: usize, k_z: f64, dk_dnu: f64, hess_k1: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(n, k_z, dk_dnu, hess_k1, DEFAULT_NONDEGENERACY_TOL)
    }

    pub fn with_tolerance(
        n: usize,
        k_z: f64,
        dk_dnu: f64,
        hess_k1: DMatrix<f64>,
        sv_tol: f64,
    ) -> Result<Self> {
        crate::constants::check_dim(n)?;
        let d = n - 1;
        if hess_k1.nrows() != d || hess_k1.ncols() != d {
            return invalid(format!(
                "hessK1 must be {d}x{d} for n = {n}, got {}x{}",
                hess_k1.nrows(),
                hess_k1.ncols()
            ));
        }
        if !(k_z > 0.0 && k_z.is_finite()) {
            return invalid(format!("K_z must be positive and finite, got {k_z}"));
        }
        if !dk_dnu.is_finite() || hess_k1.iter().any(|v| !v.is_finite()) {
            return invalid("model contains non-finite entries");
        }
        let scale = hess_k1.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (hess_k1[(i, j)] - hess_k1[(j, i)]).abs() > 1e-12 * scale {
                    return invalid(format!("hessK1 is not symmetric at ({i}, {j})"));
                }
            }
        }
        let smin = hess_k1
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if smin <= sv_tol {
            return invalid(format!(
                "hessK1 is degenerate: smallest singular value {smin:e} <= {sv_tol:e}"
            ));
        }
        Ok(Self {
            n,
            k_z,
            dk_dnu,
            hess_k1,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: ModelJson =
            serde_json::from_str(s).map_err(|e| Error::Invalid(format!("model JSON: {e}")))?;
        crate::constants::check_dim(raw.n)?;
        let d = raw.n - 1;
        if raw.hess_k1.len() != d * d {
            return invalid(format!(
                "model JSON: hessK1 needs {} entries for n = {}, got {}",
                d * d,
                raw.n,
                raw.hess_k1.len()
            ));
        }
        let h = DMatrix::from_row_slice(d, d, &raw.hess_k1);
        Self::new(raw.n, raw.k_z, raw.dk_dnu, h)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let d = self.dim();
        let mut flat = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                flat.push(self.hess_k1[(i, j)]);
            }
        }
        serde_json::to_value(ModelJson {
            n: self.n,
            k_z: self.k_z,
            dk_dnu: self.dk_dnu,
            hess_k1: flat,
        })
        .expect("plain struct")
    }

    /// Tangential dimension `n - 1`.
    pub fn dim(&self) -> usize {
        self.n - 1
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.hess_k1[(i, j)] * x[j];
            }
            s += row * x[i];
        }
        s
    }

    pub fn hess_apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.hess_k1[(i, j)] * x[j]).sum())
            .collect()
    }

    /// Boundary model `K(x) = K_z + 1/2 <hessK1 x', x'>` at a tangential point.
    pub fn k_tangential(&self, x: &[f64]) -> f64 {
        self.k_z + 0.5 * self.quad_form(x)
    }
}

/// `m` points in R^{n-1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub points: Vec<Vec<f64>>,
}

impl Configuration {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return invalid(format!("a configuration needs m >= 2 points, got {}", points.len()));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return invalid("configuration points must share one positive dimension");
        }
        Ok(Self { points })
    }

    pub fn from_flat(x: &[f64], m: usize) -> Result<Self> {
        if m == 0 || x.len() % m != 0 {
            return invalid("flat configuration length is not a multiple of m");
        }
        Self::new(x.chunks(x.len() / m).map(<[f64]>::to_vec).collect())
    }

    pub fn m(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.concat()
    }

    pub fn min_separation(&self) -> f64 {
        min_separation(&self.flat(), self.m())
    }
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn min_separation(x: &[f64], m: usize) -> f64 {
    let d = x.len() / m;
    let mut best = f64::INFINITY;
    for i in 0..m {
        for j in i + 1..m {
            best = best.min(dist2(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]).sqrt());
        }
    }
    best
}

fn check(model: &CurvatureModel, cfg: &Configuration) -> Result<()> {
    if cfg.dim() != model.dim() {
        return invalid(format!(
            "configuration points live in R^{} but the model needs R^{}",
            cfg.dim(),
            model.dim()
        ));
    }
    Ok(())
}

fn guard(x: &[f64], m: usize) -> Result<()> {
    let s = min_separation(x, m);
    if s <= SEPARATION_GUARD {
        return Err(Error::Domain(format!(
            "points closer than the separation guard ({s:e})"
        )));
    }
    Ok(())
}

/// Flat-vector evaluation used by the solvers; `x` holds `m` blocks.
pub(crate) fn eval_flat(model: &CurvatureModel, x: &[f64], m: usize) -> Result<f64> {
    guard(x, m)?;
    let d = model.dim();
    let k = model.n as f64 - 2.0;
    let mut f = 0.0;
    for i in 0..m {
        let xi = &x[i * d..(i + 1) * d];
        f += 0.5 * model.quad_form(xi);
        for j in i + 1..m {
            f += dist2(xi, &x[j * d..(j + 1) * d]).powf(-k / 2.0);
        }
    }
    Ok(f)
}

pub(crate) fn grad_flat(model: &CurvatureModel, x: &[f64], m: usize) -> Result<Vec<f64>> {
    guard(x, m)?;
    let d = model.dim();
    let nf = model.n as f64;
    let mut g = vec![0.0; m * d];
    for i in 0..m {
        let hx = model.hess_apply(&x[i * d..(i + 1) * d]);
        g[i * d..(i + 1) * d].copy_from_slice(&hx);
    }
    for i in 0..m {
        for j in i + 1..m {
            let r2 = dist2(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            let c = (nf - 2.0) * r2.powf(-nf / 2.0);
            for k in 0..d {
                let f = c * (x[i * d + k] - x[j * d + k]);
                g[i * d + k] -= f;
                g[j * d + k] += f;
            }
        }
    }
    Ok(g)
}

pub(crate) fn hess_flat(model: &CurvatureModel, x: &[f64], m: usize) -> Result<DMatrix<f64>> {
    guard(x, m)?;
    let d = model.dim();
    let nf = model.n as f64;
    let mut h = DMatrix::zeros(m * d, m * d);
    for i in 0..m {
        h.view_mut((i * d, i * d), (d, d)).copy_from(&model.hess_k1);
    }
    let mut phi = DMatrix::zeros(d, d);
    for i in 0..m {
        for j in i + 1..m {
            let diff: Vec<f64> = (0..d).map(|k| x[i * d + k] - x[j * d + k]).collect();
            let r2: f64 = diff.iter().map(|v| v * v).sum();
            let a = (nf - 2.0) * nf * r2.powf(-(nf + 2.0) / 2.0);
            let b = (nf - 2.0) * r2.powf(-nf / 2.0);
            for p in 0..d {
                for q in 0..d {
                    phi[(p, q)] = a * (diff[p] * diff[q]) - if p == q { b } else { 0.0 };
                }
            }
            for (bi, bj, s) in [(i, i, 1.0), (j, j, 1.0), (i, j, -1.0), (j, i, -1.0)] {
                let mut blk = h.view_mut((bi * d, bj * d), (d, d));
                blk += s * &phi;
            }
        }
    }
    Ok(h)
}

pub fn eval_f(model: &CurvatureModel, cfg: &Configuration) -> Result<f64> {
    check(model, cfg)?;
    eval_flat(model, &cfg.flat(), cfg.m())
}

pub fn grad_f(model: &CurvatureModel, cfg: &Configuration) -> Result<Vec<Vec<f64>>> {
    check(model, cfg)?;
    let g = grad_flat(model, &cfg.flat(), cfg.m())?;
    Ok(g.chunks(model.dim()).map(<[f64]>::to_vec).collect())
}

pub fn hess_f(model: &CurvatureModel, cfg: &Configuration) -> Result<DMatrix<f64>> {
    check(model, cfg)?;
    hess_flat(model, &cfg.flat(), cfg.m())
}

/// Value and r-derivative of `r -> F(r * direction)`, with `direction` a unit
/// vector in (R^{n-1})^m given as `m` blocks.
pub fn radial_form(model: &CurvatureModel, direction: &Configuration, r: f64) -> Result<(f64, f64)> {
    check(model, direction)?;
    if !(r > 0.0 && r.is_finite()) {
        return invalid(format!("radius must be positive, got {r}"));
    }
    let x = direction.flat();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-10 {
        return invalid(format!("direction must have unit norm, got {norm}"));
    }
    let m = direction.m();
    guard(&x, m)?;
    let d = model.dim();
    let k = model.n as f64 - 2.0;
    let quad: f64 = x.chunks(d).map(|xi| model.quad_form(xi)).sum();
    let mut pair = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            pair += dist2(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]).powf(-k / 2.0);
        }
    }
    let value = 0.5 * r * r * quad + r.powf(-k) * pair;
    let d_dr = r * quad - k * r.powf(-k - 1.0) * pair;
    Ok((value, d_dr))
}

pub fn to_dvector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}
