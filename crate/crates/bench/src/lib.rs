//! Fixtures shared by the benchmarks.

use hemibubble_core::reduction::{assemble, MEpsParams};
use hemibubble_core::{closed_form_constants, critical_points::closed_form_m2, BubbleEnsemble, CurvatureModel, Perturbation};

/// n = 5, K(z) = 1, dK/dnu = 1, hessK1 = diag(2, 1, 1, 1).
pub fn model() -> CurvatureModel {
    CurvatureModel::from_json(r#"{"n": 5, "K_z": 1.0, "dK_dnu": 1.0, "hessK1": [2,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}"#)
        .expect("valid model")
}

/// Balanced two-bubble ensemble at the given eps.
pub fn pair_ensemble(model: &CurvatureModel, eps: f64) -> BubbleEnsemble {
    let k = closed_form_constants(model.n).expect("n >= 5");
    let crit = closed_form_m2(model, model.n - 2).expect("positive simple eigenvalue");
    assemble(model, &k, &crit.cfg, eps, &Perturbation::zero(2, model.dim()), &MEpsParams::default())
        .expect("inside M_eps")
        .ensemble
}
