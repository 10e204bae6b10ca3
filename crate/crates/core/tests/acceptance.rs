//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hemibubble_core::bubbles::{eps_ij, Bubble, BubbleEnsemble};
use hemibubble_core::critical_points::{
    closed_form_m2, deflated_search, is_simple, newton_solve, sorted_eigen,
};
use hemibubble_core::expansion::{energy_near_point, quantized_energy, verify_expansion, ExpansionTable};
use hemibubble_core::fit::fit_power_law;
use hemibubble_core::hamiltonian::{eval_f, grad_f, hess_f, radial_form};
use hemibubble_core::io::to_json_string;
use hemibubble_core::reduction::{assemble, balance_ratio, gamma_residual, MEpsParams};
use hemibubble_core::{
    closed_form_constants, compute_constants, ChartConvention, Configuration, CurvatureModel, IntegratorSpec,
    Perturbation, SolverOptions, UniversalConstants,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn gaussian_sym(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a + a.transpose()) * 0.5
}

fn diag_model(dk: f64) -> CurvatureModel {
    CurvatureModel::new(5, 1.0, dk, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 1.0, 1.0])))
        .unwrap()
}

fn random_config(rng: &mut ChaCha8Rng, m: usize, d: usize, min_sep: f64) -> Configuration {
    loop {
        let pts: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cfg = Configuration::new(pts).unwrap();
        if cfg.min_separation() > min_sep {
            return cfg;
        }
    }
}

fn c1_constants() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for n in 5..=10 {
        let q = compute_constants(n).unwrap();
        let c = closed_form_constants(n).unwrap();
        worst = q.rel_diffs(&c).iter().fold(worst, |a, v| a.max(*v));
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-8 && el < Duration::from_secs(1),
        format!("max rel diff {worst:.2e} over n = 5..10 (tol 1e-8); {:.3} s (limit 1 s)", el.as_secs_f64()),
    )
}

fn c2_closed_form() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    let mut worst_grad = 0.0f64;
    let mut worst_gap = f64::INFINITY;
    let mut failures = 0;
    while checked < 50 {
        let n = 5 + checked % 3;
        let h = gaussian_sym(&mut rng, n - 1);
        let Ok(model) = CurvatureModel::new(n, 1.0, 1.0, h) else { continue };
        let (vals, _) = sorted_eigen(&model.hess_k1);
        let Some(k) = (0..vals.len()).rev().find(|&k| vals[k] > 0.0 && is_simple(&vals, k, 1e-6)) else {
            continue;
        };
        checked += 1;
        match closed_form_m2(&model, k) {
            Ok(r) => {
                let r0 = norm(&r.cfg.points[0]);
                let scale = (vals[k] * r0).max(1.0);
                worst_grad = worst_grad.max(r.grad_norm / scale);
                let spec_norm = r.hessian_spectrum.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let min_abs = r.hessian_spectrum.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
                worst_gap = worst_gap.min(min_abs / spec_norm);
                if !(r.grad_norm <= 1e-12 * scale && min_abs > 1e-8 * spec_norm) {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let el = t.elapsed();
    outcome(
        failures == 0 && el < Duration::from_secs(10),
        format!(
            "50 matrices, n in {{5,6,7}}: max |grad|/scale {worst_grad:.2e} (tol 1e-12), \
             min |mu|/||H|| {worst_gap:.2e} (> 1e-8), {failures} failures; {:.3} s (limit 10 s)",
            el.as_secs_f64()
        ),
    )
}

fn c3_derivatives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_g = 0.0f64;
    let mut worst_h = 0.0f64;
    let mut worst_r = 0.0f64;
    for inst in 0..100 {
        let n = 5 + inst % 3;
        let m = 2 + inst % 3;
        let d = n - 1;
        let model = loop {
            if let Ok(md) = CurvatureModel::new(n, 1.0, 1.0, gaussian_sym(&mut rng, d)) {
                break md;
            }
        };
        let cfg = random_config(&mut rng, m, d, 0.3);
        let x = cfg.flat();
        let f_at = |y: &[f64]| eval_f(&model, &Configuration::from_flat(y, m).unwrap()).unwrap();
        let g_at = |y: &[f64]| grad_f(&model, &Configuration::from_flat(y, m).unwrap()).unwrap().concat();
        let g = g_at(&x);
        let h = hess_f(&model, &cfg).unwrap();
        let step = 1e-5;
        let mut g_fd = vec![0.0; x.len()];
        let mut h_err = 0.0f64;
        for c in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += step;
            xm[c] -= step;
            g_fd[c] = (f_at(&xp) - f_at(&xm)) / (2.0 * step);
            let gp = g_at(&xp);
            let gm = g_at(&xm);
            for r in 0..x.len() {
                h_err = h_err.max(((gp[r] - gm[r]) / (2.0 * step) - h[(r, c)]).abs());
            }
        }
        let diff: Vec<f64> = g.iter().zip(&g_fd).map(|(a, b)| a - b).collect();
        worst_g = worst_g.max(norm(&diff) / norm(&g).max(1.0));
        worst_h = worst_h.max(h_err / h.abs().max().max(1.0));

        let nrm = norm(&x);
        let dir = Configuration::from_flat(&x.iter().map(|v| v / nrm).collect::<Vec<_>>(), m).unwrap();
        let r = rng.random_range(0.3..3.0);
        let (_, dr) = radial_form(&model, &dir, r).unwrap();
        let fd = (radial_form(&model, &dir, r + step).unwrap().0 - radial_form(&model, &dir, r - step).unwrap().0)
            / (2.0 * step);
        worst_r = worst_r.max((dr - fd).abs() / dr.abs().max(1.0));
    }
    outcome(
        worst_g <= 1e-6 && worst_h <= 1e-5 && worst_r <= 1e-6,
        format!(
            "100 instances: grad rel {worst_g:.2e} (tol 1e-6), hess rel {worst_h:.2e} (tol 1e-5), \
             d_dr rel {worst_r:.2e} (tol 1e-6)"
        ),
    )
}

fn c4_obstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 5;
    let d = n - 1;
    let m = 2;
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = -(&a.transpose() * &a) - DMatrix::identity(d, d) * 0.1;
    let model = CurvatureModel::new(n, 1.0, 1.0, h).unwrap();
    let mut positive = 0;
    let mut max_dr = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let v: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
        let nv = norm(&v);
        let dir = Configuration::from_flat(&v.iter().map(|x| x / nv).collect::<Vec<_>>(), m).unwrap();
        for k in 0..100 {
            let r = 10f64.powf(-3.0 + 5.0 * k as f64 / 99.0);
            let (_, dr) = radial_form(&model, &dir, r).unwrap();
            max_dr = max_dr.max(dr);
            if !(dr < 0.0) {
                positive += 1;
            }
        }
    }
    let found = deflated_search(&model, m, 1000, 4, &SolverOptions::default());
    outcome(
        positive == 0 && found.is_empty(),
        format!(
            "1000 x 100 grid: {positive} non-negative d_dr (max {max_dr:.2e}); deflated search from 1000 seeds found {}",
            found.len()
        ),
    )
}

fn c5_newton() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = diag_model(1.0);
    let target = closed_form_m2(&model, 3).unwrap();
    let scale = norm(&target.cfg.flat());
    let mut worst = 0.0f64;
    let mut misses = 0;
    let mut largest = 0.0f64;
    // noise of total relative size about 5% over the 8 coordinates
    for _ in 0..50 {
        let x: Vec<f64> = target
            .cfg
            .flat()
            .iter()
            .map(|v| v + 0.05 * scale / 8f64.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t0 = target.cfg.flat();
        largest = largest.max(norm(&x.iter().zip(&t0).map(|(a, b)| a - b).collect::<Vec<_>>()) / scale);
        match newton_solve(&model, 2, &Configuration::from_flat(&x, 2).unwrap(), &SolverOptions::default()) {
            Ok(r) => {
                // distance modulo swap and the sign symmetry x -> -x
                let flat = r.cfg.flat();
                let swapped: Vec<f64> = [&r.cfg.points[1][..], &r.cfg.points[0][..]].concat();
                let t0 = target.cfg.flat();
                let dist = [&flat, &swapped]
                    .iter()
                    .flat_map(|c| {
                        let plus: f64 = norm(&c.iter().zip(&t0).map(|(a, b)| a - b).collect::<Vec<_>>());
                        let minus: f64 = norm(&c.iter().zip(&t0).map(|(a, b)| a + b).collect::<Vec<_>>());
                        [plus, minus]
                    })
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(dist / scale);
                if dist > 1e-8 * scale {
                    misses += 1;
                }
            }
            Err(_) => misses += 1,
        }
    }
    let el = t.elapsed();
    outcome(
        misses == 0 && el < Duration::from_secs(5),
        format!(
            "50 starts, relative perturbation up to {largest:.3}: worst rel distance {worst:.2e} (tol 1e-8), \
             {misses} misses; {:.3} s (limit 5 s)",
            el.as_secs_f64()
        ),
    )
}

fn c6_assembly(k: &UniversalConstants) -> Outcome {
    let model = diag_model(1.0);
    let crit = closed_form_m2(&model, 3).unwrap();
    let rho = balance_ratio(&model, k).unwrap();
    let mut worst = 0.0f64;
    let mut all_in = true;
    let mut gamma_err = 0.0;
    for eps in [1e-2, 1e-3, 1e-4] {
        let asm = assemble(&model, k, &crit.cfg, eps, &Perturbation::zero(2, 4), &MEpsParams::default());
        let Ok(asm) = asm else {
            all_in = false;
            continue;
        };
        all_in &= asm.m_eps.ok;
        gamma_err = gamma_residual(&model, k, asm.gamma).unwrap();
        worst = worst.max(gamma_err);
        for b in &asm.ensemble.bubbles {
            worst = worst.max(rel(1.0 / b.lambda / eps, rho));
        }
        let sep = norm(
            &asm.ensemble.bubbles[0]
                .center
                .iter()
                .zip(&asm.ensemble.bubbles[1].center)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        let want = asm.gamma
            * norm(&crit.cfg.points[0].iter().zip(&crit.cfg.points[1]).map(|(a, b)| a - b).collect::<Vec<_>>());
        worst = worst.max(rel(sep / eps.powf(0.6), want));
    }
    outcome(
        worst <= 1e-12 && all_in,
        format!(
            "eps in {{1e-2,1e-3,1e-4}}: worst identity error {worst:.2e} (tol 1e-12), gamma residual {gamma_err:.2e}, \
             in M_eps (C=10, mu=0.5): {all_in}"
        ),
    )
}

fn c7_expansion(k: &UniversalConstants) -> (Outcome, Option<ExpansionTable>) {
    let t = Instant::now();
    let model = diag_model(1.0);
    let crit = closed_form_m2(&model, 3).unwrap();
    let spec = IntegratorSpec {
        samples: 10_000_000,
        seed: 7,
        ..IntegratorSpec::default()
    };
    let eps = [1e-2, 3e-3, 1e-3, 3e-4];
    let table = match verify_expansion(&model, k, &crit.cfg, &eps, 0, &spec, &ChartConvention::default()) {
        Ok(t) => t,
        Err(e) => return (outcome(false, format!("verification failed: {e}")), None),
    };
    let se_ok = table.rows.iter().all(|r| r.se_target_met);
    let worst_se = table
        .rows
        .iter()
        .map(|r| r.stderr_norm() / r.leading)
        .fold(0.0f64, f64::max);
    let mut parts = Vec::new();
    let mut fits_ok = true;
    for f in &table.fits {
        fits_ok &= f.within_tolerance;
        parts.push(format!(
            "{} {:.3} [{:.3}, {:.3}] vs {:.3} {}",
            f.kind.name(),
            f.fit.slope,
            f.fit.ci_low,
            f.fit.ci_high,
            f.expected_order,
            if f.within_tolerance { "ok" } else { "OUT" }
        ));
    }
    (
        outcome(
            fits_ok && se_ok,
            format!(
                "exponents: {} (tol 0.15); worst SE/leading {worst_se:.2e} (tol 1e-2); {:.1} s",
                parts.join("; "),
                t.elapsed().as_secs_f64()
            ),
        ),
        Some(table),
    )
}

fn c8_energy(k: &UniversalConstants) -> Outcome {
    let model = diag_model(1.0);
    let eps = 1e-4;
    let spec = IntegratorSpec {
        samples: 2_000_000,
        seed: 8,
        ..IntegratorSpec::default()
    };
    let conv = ChartConvention::default();
    let rho = balance_ratio(&model, k).unwrap();
    let single = BubbleEnsemble::new(
        eps,
        vec![Bubble::new(vec![0.0; 4], 1.0 / (rho * eps)).unwrap()],
        vec![model.k_z.powf(-0.75)],
    )
    .unwrap();
    let crit = closed_form_m2(&model, 3).unwrap();
    let pair = assemble(&model, k, &crit.cfg, eps, &Perturbation::zero(2, 4), &MEpsParams::default())
        .unwrap()
        .ensemble;
    let mut ok = true;
    let mut parts = Vec::new();
    for (m, ens) in [(1, &single), (2, &pair)] {
        let e = energy_near_point(&model, ens, 0.1, &spec, &conv).unwrap();
        let want = quantized_energy(&model, k, m);
        let dev = (e.mean[0] - want).abs();
        let tol = 0.03 * want + 3.0 * e.stderr[0];
        ok &= dev <= tol;
        parts.push(format!("m={m}: {:.6} vs {:.6} (rel {:.2e}, se {:.1e})", e.mean[0], want, dev / want, e.stderr[0]));
    }
    outcome(ok, format!("{} (tol 3% + 3 se)", parts.join("; ")))
}

fn c9_eps_ij(k: &UniversalConstants) -> Outcome {
    let model = diag_model(1.0);
    let crit = closed_form_m2(&model, 3).unwrap();
    let eps = [1e-2, 1e-3, 1e-4, 1e-5];
    let vals: Vec<f64> = eps
        .iter()
        .map(|&e| {
            let ens = assemble(&model, k, &crit.cfg, e, &Perturbation::zero(2, 4), &MEpsParams::default())
                .unwrap()
                .ensemble;
            eps_ij(&ens.bubbles[0], &ens.bubbles[1])
        })
        .collect();
    let f = fit_power_law(&eps, &vals, None, 0.0).unwrap();
    let want = 2.0 * 3.0 / 5.0;
    outcome((f.slope - want).abs() <= 0.05, format!("slope {:.4} vs {want} (tol 0.05)", f.slope))
}

fn c10_determinism(k: &UniversalConstants) -> Outcome {
    let model = diag_model(1.0);
    let crit = closed_form_m2(&model, 3).unwrap();
    let spec = IntegratorSpec {
        samples: 200_000,
        seed: 10,
        ..IntegratorSpec::default()
    };
    let run = || -> String {
        let t = verify_expansion(&model, k, &crit.cfg, &[1e-2, 1e-3], 1, &spec, &ChartConvention::default()).unwrap();
        let s = deflated_search(&model, 2, 48, 10, &SolverOptions::default());
        to_json_string(&(t, s)).unwrap()
    };
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(run)
    };
    let a = in_pool(1);
    let b = in_pool(1);
    let c = in_pool(4);
    let d = in_pool(3);
    outcome(
        a == b && a == c && a == d,
        format!(
            "expansion table and critical-point search JSON ({} bytes): repeat {}, 1 vs 4 threads {}, 1 vs 3 threads {}",
            a.len(),
            a == b,
            a == c,
            a == d
        ),
    )
}

fn main() -> ExitCode {
    let k = closed_form_constants(5).unwrap();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 constants dual oracle", c1_constants()),
        ("2 closed-form critical points", c2_closed_form()),
        ("3 derivative oracles", c3_derivatives()),
        ("4 local-maximum obstruction", c4_obstruction()),
        ("5 Newton vs closed form", c5_newton()),
        ("6 assembly identities", c6_assembly(&k)),
    ];
    let (o7, table) = c7_expansion(&k);
    results.push(("7 expansion scaling", o7));
    results.push(("8 energy quantization", c8_energy(&k)));
    results.push(("9 eps_ij regime", c9_eps_ij(&k)));
    results.push(("10 determinism", c10_determinism(&k)));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if let Some(t) = table {
        println!("  criterion 7 rows (eps, kind, |residual|, stderr, leading):");
        for r in &t.rows {
            println!(
                "    {:.0e} {:6} {:.4e} {:.2e} {:.4e}",
                r.eps,
                r.kind.name(),
                r.abs_err,
                r.stderr_norm(),
                r.leading
            );
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
