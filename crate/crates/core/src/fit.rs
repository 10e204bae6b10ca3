//! Log-log regression for error-scaling exponents.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Least-squares slope of `ln y - log_power * ln ln(1/x)` against `ln x`, i.e.
/// the exponent `a` in `y ~ x^a ln^{log_power}(1/x)`.
///
/// With `stderr` given, the slope's standard error propagates the Monte Carlo
/// errors through the (linear) OLS weights, using `se_i / y_i` as the error
/// of `ln y_i`. Without it, the residual scatter of the fit is used. The
/// interval is +-1.96 standard errors.
pub fn fit_power_law(x: &[f64], y: &[f64], stderr: Option<&[f64]>, log_power: f64) -> Result<PowerFit> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("power fit needs at least two (x, y) pairs of equal length");
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return invalid("power fit needs positive finite data");
    }
    if log_power != 0.0 && x.iter().any(|v| *v >= 1.0) {
        return invalid("log-corrected fit needs x < 1");
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(xv, yv)| {
            let corr = if log_power != 0.0 { log_power * (-xv.ln()).ln() } else { 0.0 };
            yv.ln() - corr
        })
        .collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("power fit needs distinct x values");
    }
    let weights: Vec<f64> = lx.iter().map(|v| (v - mx) / sxx).collect();
    let slope: f64 = weights.iter().zip(&ly).map(|(c, v)| c * v).sum();
    let intercept = my - slope * mx;
    let slope_se = match stderr {
        Some(se) => {
            if se.len() != y.len() {
                return invalid("one standard error per point is required");
            }
            weights
                .iter()
                .zip(se.iter().zip(y))
                .map(|(c, (s, yv))| (c * s / yv).powi(2))
                .sum::<f64>()
                .sqrt()
        }
        None if lx.len() > 2 => {
            let rss: f64 = lx
                .iter()
                .zip(&ly)
                .map(|(a, b)| (b - intercept - slope * a).powi(2))
                .sum();
            (rss / (k - 2.0) / sxx).sqrt()
        }
        None => 0.0,
    };
    Ok(PowerFit {
        slope,
        intercept,
        slope_se,
        ci_low: slope - 1.96 * slope_se,
        ci_high: slope + 1.96 * slope_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn recovers_exact_power_laws(a in -3.0f64..3.0, c in 0.1f64..10.0, lp in 0.0f64..2.0) {
            let x = [1e-2, 3e-3, 1e-3, 3e-4];
            let y: Vec<f64> = x.iter().map(|v: &f64| c * v.powf(a) * (-v.ln()).powf(lp)).collect();
            let f = fit_power_law(&x, &y, None, lp).unwrap();
            prop_assert!((f.slope - a).abs() < 1e-10);
            prop_assert!(f.slope_se < 1e-8);
        }
    }

    #[test]
    fn monte_carlo_error_propagation() {
        let x = [1.0, 10.0];
        let y = [1.0, 10.0];
        // two points: weights +-1/ln 10
        let f = fit_power_law(&x, &y, Some(&[0.1, 1.0]), 0.0).unwrap();
        let expect = (2.0f64 * 0.01).sqrt() / 10f64.ln();
        assert!((f.slope - 1.0).abs() < 1e-14);
        assert!((f.slope_se - expect).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_power_law(&[1.0], &[1.0], None, 0.0).is_err());
        assert!(fit_power_law(&[1.0, 2.0], &[1.0, -1.0], None, 0.0).is_err());
        assert!(fit_power_law(&[0.1, 2.0], &[1.0, 1.0], None, 1.0).is_err());
    }
}
