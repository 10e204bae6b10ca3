//! Stratified importance sampling over the upper half-space.
//!
//! The proposal is a mixture over bubbles of two radial components: the
//! normalised `delta^{p+1}` profile, and a heavier `(1 + lambda^2 r^2)^{-(n+1)/2}`
//! component that keeps integrands decaying like `|y|^{-(n+3)}` at finite
//! variance. Each component is sampled as its own stratum, with antithetic
//! reflection of the tangential offset about the bubble centre.
//!
//! Work is cut into fixed-size chunks, each with its own ChaCha stream, and
//! chunk statistics are merged by a fixed binary tree, so estimates are
//! bit-identical for a given seed whatever the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::constants::{c0, critical_exponent, sphere_area};
use crate::error::{invalid, Result};

/// Pairs per chunk.
pub const CHUNK: usize = 4096;

pub const DEFAULT_TAIL_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct Mixture {
    n: usize,
    centers: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
    tail_weight: f64,
    /// Reciprocal half-space masses of `(1 + |y|^2)^{-n}` and
    /// `(1 + |y|^2)^{-(n+1)/2}`.
    core_norm: f64,
    tail_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Component {
    bubble: usize,
    tail: bool,
}

impl Mixture {
    /// `centers` are tangential coordinates (length `n - 1`) on the boundary.
    pub fn new(n: usize, centers: Vec<Vec<f64>>, lambdas: Vec<f64>, tail_weight: f64) -> Result<Self> {
        if centers.is_empty() || centers.len() != lambdas.len() {
            return invalid("mixture needs one lambda per centre and at least one centre");
        }
        if centers.iter().any(|c| c.len() != n - 1) {
            return invalid("mixture centres must have n - 1 tangential coordinates");
        }
        if lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return invalid("mixture rates must be positive");
        }
        if !(0.0..1.0).contains(&tail_weight) {
            return invalid("tail weight must lie in [0, 1)");
        }
        let nf = n as f64;
        let sigma = sphere_area(n);
        // half-space integrals of (1 + |y|^2)^{-n} and (1 + |y|^2)^{-(n+1)/2}
        let core_mass = 0.5 * sigma * 0.5 * ln_beta(nf / 2.0, nf / 2.0).exp();
        let tail_mass = 0.5 * sigma * 0.5 * ln_beta(nf / 2.0, 0.5).exp();
        Ok(Self {
            n,
            centers,
            lambdas,
            tail_weight,
            core_norm: 1.0 / core_mass,
            tail_norm: 1.0 / tail_mass,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn components(&self) -> Vec<(Component, f64)> {
        let m = self.centers.len() as f64;
        let mut out: Vec<(Component, f64)> = (0..self.centers.len())
            .map(|b| (Component { bubble: b, tail: false }, (1.0 - self.tail_weight) / m))
            .collect();
        if self.tail_weight > 0.0 {
            out.extend(
                (0..self.centers.len()).map(|b| (Component { bubble: b, tail: true }, self.tail_weight / m)),
            );
        }
        out
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        let mut r2 = vec![0.0; self.centers.len()];
        let mut ln_s = vec![0.0; self.centers.len()];
        self.geometry(x, &mut r2, &mut ln_s);
        self.pdf_from(&ln_s)
    }

    /// Squared distance to every centre and `ln(1 + lambda^2 r^2)`.
    fn geometry(&self, x: &[f64], r2: &mut [f64], ln_s: &mut [f64]) {
        let n = self.n;
        let xn2 = x[n - 1] * x[n - 1];
        for (b, (c, &lam)) in self.centers.iter().zip(&self.lambdas).enumerate() {
            let mut d2 = xn2;
            for k in 0..n - 1 {
                let d = x[k] - c[k];
                d2 += d * d;
            }
            r2[b] = d2;
            ln_s[b] = (lam * lam * d2).ln_1p();
        }
    }

    fn pdf_from(&self, ln_s: &[f64]) -> f64 {
        let nf = self.n as f64;
        let m = self.centers.len() as f64;
        let wc = (1.0 - self.tail_weight) / m * self.core_norm;
        let wt = self.tail_weight / m * self.tail_norm;
        let mut q = 0.0;
        for (&lam, &ls) in self.lambdas.iter().zip(ln_s) {
            let ln_lam_n = nf * lam.ln();
            q += wc * (ln_lam_n - nf * ls).exp();
            if wt > 0.0 {
                q += wt * (ln_lam_n - 0.5 * (nf + 1.0) * ls).exp();
            }
        }
        q
    }

    /// Offset `y` from the component's centre: radius from a Beta variate,
    /// uniform direction folded into `y_n >= 0`.
    fn draw(&self, comp: Component, beta: &Beta<f64>, rng: &mut ChaCha8Rng, y: &mut [f64]) {
        let lam = self.lambdas[comp.bubble];
        let s: f64 = beta.sample(rng);
        let r = (s / (1.0 - s)).sqrt() / lam;
        let mut norm2 = 0.0;
        for v in y.iter_mut() {
            *v = rng.sample(StandardNormal);
            norm2 += *v * *v;
        }
        let scale = r / norm2.sqrt();
        for v in y.iter_mut() {
            *v *= scale;
        }
        let last = y.len() - 1;
        y[last] = y[last].abs();
    }
}

/// Running mean and sum of squared deviations per output.
#[derive(Debug, Clone, PartialEq)]
struct Stats {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Stats {
    fn new(k: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; k],
            m2: vec![0.0; k],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.count += 1.0;
        for ((mu, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(v) {
            let d = x - *mu;
            *mu += d / self.count;
            *m2 += d * (x - *mu);
        }
    }

    fn merge(a: Stats, b: Stats) -> Stats {
        if a.count == 0.0 {
            return b;
        }
        if b.count == 0.0 {
            return a;
        }
        let n = a.count + b.count;
        let mut out = Stats::new(a.mean.len());
        out.count = n;
        for k in 0..a.mean.len() {
            let d = b.mean[k] - a.mean[k];
            out.mean[k] = a.mean[k] + d * b.count / n;
            out.m2[k] = a.m2[k] + b.m2[k] + d * d * a.count * b.count / n;
        }
        out
    }
}

fn tree_merge(mut v: Vec<Stats>) -> Stats {
    while v.len() > 1 {
        let mut next = Vec::with_capacity(v.len().div_ceil(2));
        let mut it = v.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => Stats::merge(a, b),
                None => a,
            });
        }
        v = next;
    }
    v.pop().expect("at least one chunk")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

impl Estimate {
    pub fn scalar(&self) -> (f64, f64) {
        (self.mean[0], self.stderr[0])
    }

    /// Euclidean norm of the per-component standard errors.
    pub fn stderr_norm(&self) -> f64 {
        self.stderr.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub samples: usize,
    pub seed: u64,
    pub antithetic: bool,
}

/// A sample point with its distances to the mixture centres, in mixture
/// order.
pub struct Point<'a> {
    pub x: &'a [f64],
    pub r2: &'a [f64],
    /// `ln(1 + lambda_b^2 r2_b)`.
    pub ln_s: &'a [f64],
}

/// Estimate `int_{R^n_+} f(x) dx` for a vector-valued `f` with `k` outputs.
/// `f` writes into its output slice and may leave it untouched for zeros.
pub fn integrate<F>(mix: &Mixture, k: usize, opts: &McOptions, f: F) -> Result<Estimate>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    integrate_points(mix, k, opts, |pt, out| f(pt.x, out))
}

/// [`integrate`] with the per-centre geometry handed to the integrand.
pub fn integrate_points<F>(mix: &Mixture, k: usize, opts: &McOptions, f: F) -> Result<Estimate>
where
    F: Fn(&Point, &mut [f64]) + Sync,
{
    let n = mix.n;
    let per_draw = if opts.antithetic { 2 } else { 1 };
    let comps = mix.components();
    let mut plan = Vec::new();
    for (ci, &(comp, w)) in comps.iter().enumerate() {
        let draws = ((opts.samples as f64 * w).round() as usize / per_draw).max(2);
        let chunks = draws.div_ceil(CHUNK);
        for ch in 0..chunks {
            let len = CHUNK.min(draws - ch * CHUNK);
            plan.push((ci, comp, ch, len));
        }
    }
    let nf = n as f64;
    let core_beta = Beta::new(nf / 2.0, nf / 2.0).expect("valid Beta parameters");
    let tail_beta = Beta::new(nf / 2.0, 0.5).expect("valid Beta parameters");

    let chunk_stats: Vec<(usize, Stats)> = plan
        .par_iter()
        .map(|&(ci, comp, ch, len)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(((ci as u64) << 32) | ch as u64);
            let beta = if comp.tail { &tail_beta } else { &core_beta };
            let center = &mix.centers[comp.bubble];
            let mut y = vec![0.0; n];
            let mut x = vec![0.0; n];
            let mut out = vec![0.0; k];
            let mut acc = vec![0.0; k];
            let mut r2 = vec![0.0; mix.centers.len()];
            let mut ln_s = vec![0.0; mix.centers.len()];
            let mut st = Stats::new(k);
            for _ in 0..len {
                mix.draw(comp, beta, &mut rng, &mut y);
                acc.iter_mut().for_each(|v| *v = 0.0);
                for refl in 0..per_draw {
                    let sgn = if refl == 0 { 1.0 } else { -1.0 };
                    for c in 0..n - 1 {
                        x[c] = center[c] + sgn * y[c];
                    }
                    x[n - 1] = y[n - 1];
                    out.iter_mut().for_each(|v| *v = 0.0);
                    mix.geometry(&x, &mut r2, &mut ln_s);
                    f(
                        &Point {
                            x: &x,
                            r2: &r2,
                            ln_s: &ln_s,
                        },
                        &mut out,
                    );
                    let q = mix.pdf_from(&ln_s);
                    for (a, o) in acc.iter_mut().zip(&out) {
                        *a += o / q / per_draw as f64;
                    }
                }
                st.push(&acc);
            }
            (ci, st)
        })
        .collect();

    let mut mean = vec![0.0; k];
    let mut var = vec![0.0; k];
    let mut total = 0usize;
    for (ci, &(_, w)) in comps.iter().enumerate() {
        let parts: Vec<Stats> = chunk_stats
            .iter()
            .filter(|(c, _)| *c == ci)
            .map(|(_, s)| s.clone())
            .collect();
        let st = tree_merge(parts);
        total += st.count as usize * per_draw;
        for j in 0..k {
            mean[j] += w * st.mean[j];
            var[j] += w * w * st.m2[j] / (st.count - 1.0) / st.count;
        }
    }
    Ok(Estimate {
        mean,
        stderr: var.iter().map(|v| v.sqrt()).collect(),
        samples: total,
    })
}

/// Bubble profile `c0 lambda^{(n-2)/2} (1 + lambda^2 |x - a|^2)^{-(n-2)/2}` with
/// `a` on the boundary, as used by the integrands. Returns the value and the
/// squared distance.
#[inline]
pub(crate) fn profile(n: usize, c0: f64, center: &[f64], lambda: f64, x: &[f64]) -> (f64, f64) {
    let mut r2 = x[n - 1] * x[n - 1];
    for k in 0..n - 1 {
        let d = x[k] - center[k];
        r2 += d * d;
    }
    let h = (n as f64 - 2.0) / 2.0;
    let v = c0 * (h * lambda.ln() - h * (1.0 + lambda * lambda * r2).ln()).exp();
    (v, r2)
}

/// Constants needed by integrands, bundled so closures stay small.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProfileConsts {
    pub c0: f64,
    pub p: f64,
}

impl ProfileConsts {
    pub fn new(n: usize) -> Self {
        Self {
            c0: c0(n),
            p: critical_exponent(n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::closed_form_constants;

    fn opts(samples: usize, seed: u64) -> McOptions {
        McOptions {
            samples,
            seed,
            antithetic: true,
        }
    }

    #[test]
    fn core_profile_mass_is_s_n() {
        let n = 5;
        let k = closed_form_constants(n).unwrap();
        let mix = Mixture::new(n, vec![vec![0.0; 4]], vec![3.0], 0.25).unwrap();
        let pc = ProfileConsts::new(n);
        let est = integrate(&mix, 1, &opts(200_000, 1), |x, out| {
            let (d, _) = profile(n, pc.c0, &[0.0; 4], 3.0, x);
            out[0] = d.powf(pc.p + 1.0);
        })
        .unwrap();
        let (v, se) = est.scalar();
        assert!((v - k.s_n).abs() < 4.0 * se + 1e-9 * k.s_n, "{v} +- {se} vs {}", k.s_n);
    }

    #[test]
    fn half_ball_volume() {
        let n = 5;
        let mix = Mixture::new(n, vec![vec![0.0; 4]], vec![1.0], 0.5).unwrap();
        let est = integrate(&mix, 1, &opts(400_000, 2), |x, out| {
            if x.iter().map(|v| v * v).sum::<f64>() < 1.0 {
                out[0] = 1.0;
            }
        })
        .unwrap();
        let exact = 0.5 * sphere_area(n) / n as f64;
        let (v, se) = est.scalar();
        assert!((v - exact).abs() < 4.0 * se, "{v} +- {se} vs {exact}");
    }

    #[test]
    fn deterministic_and_independent_of_thread_count() {
        let n = 6;
        let mix = Mixture::new(n, vec![vec![0.0; 5], vec![0.3, 0.0, 0.1, 0.0, 0.0]], vec![5.0, 7.0], 0.25)
            .unwrap();
        let f = |x: &[f64], out: &mut [f64]| {
            out[0] = (-x.iter().map(|v| v * v).sum::<f64>()).exp();
            out[1] = x[0] * out[0];
        };
        let a = integrate(&mix, 2, &opts(100_000, 9), f).unwrap();
        let b = integrate(&mix, 2, &opts(100_000, 9), f).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| integrate(&mix, 2, &opts(100_000, 9), f).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, c);
        let d = integrate(&mix, 2, &opts(100_000, 10), f).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn stats_merge_matches_single_pass() {
        let data: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let mut whole = Stats::new(1);
        data.iter().for_each(|v| whole.push(&[*v]));
        let parts: Vec<Stats> = data
            .chunks(77)
            .map(|c| {
                let mut s = Stats::new(1);
                c.iter().for_each(|v| s.push(&[*v]));
                s
            })
            .collect();
        let merged = tree_merge(parts);
        assert!((merged.mean[0] - whole.mean[0]).abs() < 1e-12);
        assert!((merged.m2[0] / whole.m2[0] - 1.0).abs() < 1e-12);
    }
}
