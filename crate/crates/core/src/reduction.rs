//! Change of variables between bubble parameters `(alpha, lambda, x)` and the
//! reduced unknowns `(beta, Lambda, xi)`:
//!
//! ```text
//! beta_i   = 1 - alpha_i^{4/(n-2)} K(x_i)
//! 1/lambda_i = rho eps (1 + Lambda_i),      rho = c4 K(z) / (c3 dK/dnu(z))
//! x_i      = z + gamma eps^{(n-2)/n} (xibar_i + xi_i)
//! ```
//!
//! with `gamma^n = (c2 K(z) / c5) rho^{n-2}` balancing confinement against
//! pair repulsion, and `xibar` a critical point of the Kirchhoff-Routh
//! function.

use serde::{Deserialize, Serialize};

use crate::bubbles::{check_m_eps, Bubble, BubbleEnsemble, MEpsReport};
use crate::constants::UniversalConstants;
use crate::error::{invalid, Error, Result};
use crate::hamiltonian::{hess_f, Configuration, CurvatureModel};

pub const DEFAULT_C: f64 = 10.0;
pub const DEFAULT_MU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedVariables {
    pub betas: Vec<f64>,
    #[serde(rename = "Lambdas")]
    pub lambdas: Vec<f64>,
    pub xis: Vec<Vec<f64>>,
    pub gamma: f64,
}

/// Offsets `(beta, Lambda, xi)` from the balanced configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub betas: Vec<f64>,
    #[serde(rename = "Lambdas")]
    pub lambdas: Vec<f64>,
    pub xis: Vec<Vec<f64>>,
}

impl Perturbation {
    pub fn zero(m: usize, d: usize) -> Self {
        Self {
            betas: vec![0.0; m],
            lambdas: vec![0.0; m],
            xis: vec![vec![0.0; d]; m],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MEpsParams {
    pub c: f64,
    pub mu: f64,
}

impl Default for MEpsParams {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            mu: DEFAULT_MU,
        }
    }
}

/// `rho = c4 K(z) / (c3 dK/dnu(z))`, the balanced value of `1 / (lambda eps)`.
pub fn balance_ratio(model: &CurvatureModel, k: &UniversalConstants) -> Result<f64> {
    if !(model.dk_dnu > 0.0) {
        return Err(Error::Regime(format!(
            "the construction needs dK/dnu(z) > 0, got {}",
            model.dk_dnu
        )));
    }
    let rho = k.c4 * model.k_z / (k.c3 * model.dk_dnu);
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Regime(format!(
            "c4 K(z) / (c3 dK/dnu(z)) = {rho:e} is not positive"
        )));
    }
    Ok(rho)
}

pub fn solve_gamma(model: &CurvatureModel, k: &UniversalConstants) -> Result<f64> {
    let rho = balance_ratio(model, k)?;
    let nf = model.n as f64;
    Ok((k.c2 * model.k_z / k.c5 * rho.powf(nf - 2.0)).powf(1.0 / nf))
}

/// Relative mismatch of `c5 gamma / K(z) = c2 rho^{n-2} / gamma^{n-1}`.
pub fn gamma_residual(model: &CurvatureModel, k: &UniversalConstants, gamma: f64) -> Result<f64> {
    let rho = balance_ratio(model, k)?;
    let nf = model.n as f64;
    let lhs = k.c5 * gamma / model.k_z;
    let rhs = k.c2 / gamma.powf(nf - 1.0) * rho.powf(nf - 2.0);
    Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assembly {
    pub ensemble: BubbleEnsemble,
    pub gamma: f64,
    pub m_eps: MEpsReport,
}

pub fn assemble(
    model: &CurvatureModel,
    k: &UniversalConstants,
    xibar: &Configuration,
    eps: f64,
    pert: &Perturbation,
    params: &MEpsParams,
) -> Result<Assembly> {
    let m = xibar.m();
    let d = model.dim();
    if xibar.dim() != d {
        return invalid("critical configuration does not match the model dimension");
    }
    if pert.betas.len() != m || pert.lambdas.len() != m || pert.xis.len() != m {
        return invalid("perturbation must have one entry per bubble");
    }
    if pert.xis.iter().any(|x| x.len() != d) {
        return invalid("xi offsets must live in R^{n-1}");
    }
    if !(eps > 0.0 && eps < 1.0) {
        return invalid(format!("eps must lie in (0, 1), got {eps}"));
    }
    let nf = model.n as f64;
    let rho = balance_ratio(model, k)?;
    let gamma = solve_gamma(model, k)?;
    let scale = gamma * eps.powf((nf - 2.0) / nf);
    let mut bubbles = Vec::with_capacity(m);
    let mut alphas = Vec::with_capacity(m);
    for i in 0..m {
        let x: Vec<f64> = (0..d).map(|c| scale * (xibar.points[i][c] + pert.xis[i][c])).collect();
        let inv = rho * eps * (1.0 + pert.lambdas[i]);
        if !(inv > 0.0) {
            return invalid(format!("Lambda_{i} = {} makes lambda non-positive", pert.lambdas[i]));
        }
        let kx = model.k_tangential(&x);
        let base = (1.0 - pert.betas[i]) / kx;
        if !(base > 0.0) {
            return invalid(format!("beta_{i} = {} gives a non-positive amplitude", pert.betas[i]));
        }
        alphas.push(base.powf((nf - 2.0) / 4.0));
        bubbles.push(Bubble::new(x, 1.0 / inv)?);
    }
    let mut ensemble = BubbleEnsemble::new(eps, bubbles, alphas)?;
    ensemble.reference = Some(xibar.clone());
    let m_eps = check_m_eps(&ensemble, params.c, params.mu, model)?;
    if !m_eps.ok {
        return Err(Error::Regime(format!(
            "assembled ensemble leaves M_eps at eps = {eps:e}: {}",
            m_eps.summary()
        )));
    }
    Ok(Assembly {
        ensemble,
        gamma,
        m_eps,
    })
}

/// Invert the change of variables against the ensemble's reference
/// configuration.
pub fn read_back(model: &CurvatureModel, k: &UniversalConstants, ens: &BubbleEnsemble) -> Result<ReducedVariables> {
    let Some(xibar) = &ens.reference else {
        return invalid("ensemble carries no reference configuration");
    };
    let nf = model.n as f64;
    let rho = balance_ratio(model, k)?;
    let gamma = solve_gamma(model, k)?;
    let scale = gamma * ens.eps.powf((nf - 2.0) / nf);
    let mut out = ReducedVariables {
        betas: Vec::new(),
        lambdas: Vec::new(),
        xis: Vec::new(),
        gamma,
    };
    for (i, (b, &a)) in ens.bubbles.iter().zip(&ens.alphas).enumerate() {
        let rel: Vec<f64> = b.center.iter().zip(&ens.z).map(|(x, z)| x - z).collect();
        out.betas.push(1.0 - a.powf(4.0 / (nf - 2.0)) * model.k_tangential(&rel));
        out.lambdas.push(1.0 / (b.lambda * rho * ens.eps) - 1.0);
        out.xis
            .push(rel.iter().zip(&xibar.points[i]).map(|(x, xb)| x / scale - xb).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedResidual {
    pub beta_residual: f64,
    #[serde(rename = "Lambda_residual")]
    pub lambda_residual: f64,
    pub xi_residual: Vec<f64>,
}

/// Leading-order left-hand sides of the reduced system:
/// `alpha_i S_n beta_i`, `-alpha_i^p c4 K(z) eps Lambda_i`, and
/// `-(eps^{(n-2)/n} / K(z)^{(n-2)/4}) (c5 gamma / K(z)) D^2F(xibar)(xi, .)_i`.
pub fn reduced_residuals(
    model: &CurvatureModel,
    k: &UniversalConstants,
    ens: &BubbleEnsemble,
) -> Result<Vec<ReducedResidual>> {
    let rep = check_m_eps(ens, DEFAULT_C, DEFAULT_MU, model)?;
    if !rep.ok {
        return Err(Error::Regime(format!("ensemble is not in M_eps: {}", rep.summary())));
    }
    let vars = read_back(model, k, ens)?;
    let xibar = ens.reference.as_ref().expect("checked by read_back");
    let h = hess_f(model, xibar)?;
    let xi_flat: Vec<f64> = vars.xis.concat();
    let hx = &h * nalgebra::DVector::from_column_slice(&xi_flat);
    let nf = model.n as f64;
    let d = model.dim();
    let pref = -ens.eps.powf((nf - 2.0) / nf) / model.k_z.powf((nf - 2.0) / 4.0)
        * (k.c5 * vars.gamma / model.k_z);
    Ok((0..ens.m())
        .map(|i| {
            let a = ens.alphas[i];
            ReducedResidual {
                beta_residual: a * k.s_n * vars.betas[i],
                lambda_residual: -a.powf(k.p) * k.c4 * model.k_z * ens.eps * vars.lambdas[i],
                xi_residual: (0..d).map(|c| pref * hx[i * d + c]).collect(),
            }
        })
        .collect())
}
