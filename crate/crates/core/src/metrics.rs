//! Distances between laws on ℕ and log-linear decay-rate fits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pmf::{zip_padded, Pmf};

/// Values below this are treated as having hit the double-precision floor.
pub const PRECISION_FLOOR: f64 = 100.0 * 1e-15;
pub const MIN_FIT_POINTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("window [{t_lo}, {t_hi}] holds {got} usable points, need {MIN_FIT_POINTS}")]
    WindowTooSmall { t_lo: f64, t_hi: f64, got: usize },
    #[error("every value in the window is below the precision floor")]
    AllFloored,
    #[error("invalid fit input: {0}")]
    Invalid(String),
}

pub fn ell1_dist(p: &Pmf, q: &Pmf) -> f64 {
    zip_padded(p.weights(), q.weights()).map(|(a, b)| (a - b).abs()).sum()
}

pub fn ell2_dist(p: &Pmf, q: &Pmf) -> f64 {
    zip_padded(p.weights(), q.weights())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `‖q‖_𝒮 = Σ (1 + n)|q_n|`; accepts signed sequences such as generator output.
pub fn weighted_s_norm(q: &[f64]) -> f64 {
    q.iter().enumerate().map(|(n, x)| (1 + n) as f64 * x.abs()).sum()
}

/// `W₁` for cost `|m − n|` on ℕ, via `Σ_k |F_p(k) − F_q(k)|`.
pub fn wasserstein1(p: &Pmf, q: &Pmf) -> f64 {
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for (a, b) in zip_padded(p.weights(), q.weights()) {
        cdf_gap += a - b;
        total += cdf_gap.abs();
    }
    // the last partial sum is the mass difference, not a transport term
    total - cdf_gap.abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    /// `log y = c − r t`
    PureExponential,
    /// `log y = c − r t + k log t`
    ExponentialTimesPower,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub rate: f64,
    pub log_prefactor: f64,
    pub window: (f64, f64),
    pub rmse: f64,
    pub model: FitModel,
    /// Fitted power of `t`, for [`FitModel::ExponentialTimesPower`].
    pub power: Option<f64>,
    pub n_points: usize,
}

/// Least squares on `log(value)` over `t ∈ [t_lo, t_hi]`. Points below
/// [`PRECISION_FLOOR`] are dropped before fitting.
pub fn fit_decay(
    times: &[f64],
    values: &[f64],
    window: (f64, f64),
    model: FitModel,
) -> Result<RateFit, FitError> {
    let (t_lo, t_hi) = window;
    if times.len() != values.len() {
        return Err(FitError::Invalid("times and values differ in length".into()));
    }
    if !(t_lo < t_hi) {
        return Err(FitError::Invalid(format!("empty window [{t_lo}, {t_hi}]")));
    }
    if model == FitModel::ExponentialTimesPower && t_lo <= 0.0 {
        return Err(FitError::Invalid("power model needs t_lo > 0".into()));
    }
    let in_window: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= t_lo && **t <= t_hi)
        .map(|(&t, &v)| (t, v))
        .collect();
    let usable: Vec<(f64, f64)> = in_window
        .iter()
        .filter(|(_, v)| v.is_finite() && *v >= PRECISION_FLOOR)
        .map(|&(t, v)| (t, v.ln()))
        .collect();
    if usable.is_empty() && !in_window.is_empty() {
        return Err(FitError::AllFloored);
    }
    if usable.len() < MIN_FIT_POINTS {
        return Err(FitError::WindowTooSmall { t_lo, t_hi, got: usable.len() });
    }

    let n = usable.len() as f64;
    let t_mean = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let (rate, power, intercept) = match model {
        FitModel::PureExponential => {
            let (mut stt, mut sty) = (0.0, 0.0);
            for &(t, y) in &usable {
                stt += (t - t_mean) * (t - t_mean);
                sty += (t - t_mean) * (y - y_mean);
            }
            let slope = sty / stt;
            (-slope, None, y_mean - slope * t_mean)
        }
        FitModel::ExponentialTimesPower => {
            let l_mean = usable.iter().map(|p| p.0.ln()).sum::<f64>() / n;
            let (mut stt, mut sll, mut stl, mut sty, mut sly) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(t, y) in &usable {
                let (dt, dl, dy) = (t - t_mean, t.ln() - l_mean, y - y_mean);
                stt += dt * dt;
                sll += dl * dl;
                stl += dt * dl;
                sty += dt * dy;
                sly += dl * dy;
            }
            let det = stt * sll - stl * stl;
            if det.abs() <= 1e-300 {
                return Err(FitError::Invalid("degenerate design for power model".into()));
            }
            let slope = (sty * sll - sly * stl) / det;
            let k = (stt * sly - stl * sty) / det;
            (-slope, Some(k), y_mean - slope * t_mean - k * l_mean)
        }
    };
    let sse: f64 = usable
        .iter()
        .map(|&(t, y)| {
            let pred = intercept - rate * t + power.map_or(0.0, |k| k * t.ln());
            (y - pred) * (y - pred)
        })
        .sum();
    Ok(RateFit {
        rate,
        log_prefactor: intercept,
        window,
        rmse: (sse / n).sqrt(),
        model,
        power,
        n_points: usable.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::generator;
    use proptest::prelude::*;

    fn pmf(w: &[f64]) -> Pmf {
        Pmf::new(w.to_vec(), true).unwrap()
    }

    #[test]
    fn ell_distances() {
        let p = pmf(&[0.2, 0.8]);
        assert_eq!(ell1_dist(&p, &p), 0.0);
        assert_eq!(ell2_dist(&p, &p), 0.0);
        let (d0, d1) = (Pmf::delta(0, 3), Pmf::delta(1, 3));
        assert_eq!(ell1_dist(&d0, &d1), 2.0);
        assert!((ell2_dist(&d0, &d1) - 2f64.sqrt()).abs() < 1e-15);
        assert!((ell1_dist(&p, &pmf(&[0.0, 1.0])) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn distances_pad_with_zeros() {
        let short = pmf(&[0.5, 0.5]);
        let long = pmf(&[0.5, 0.25, 0.25]);
        assert!((ell1_dist(&short, &long) - 0.5).abs() < 1e-15);
        assert!((wasserstein1(&short, &long) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn s_norm_values() {
        assert_eq!(weighted_s_norm(Pmf::delta(0, 3).weights()), 1.0);
        assert_eq!(weighted_s_norm(Pmf::delta(2, 3).weights()), 3.0);
        let f = generator(&Pmf::delta(2, 10), 2.0);
        assert_eq!(weighted_s_norm(&f), 24.0);
    }

    #[test]
    fn wasserstein_translation() {
        let p = pmf(&[0.1, 0.6, 0.3]);
        assert_eq!(wasserstein1(&p, &p), 0.0);
        for k in 0..7 {
            assert!((wasserstein1(&Pmf::delta(0, 8), &Pmf::delta(k, 8)) - k as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn pure_exponential_fit() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.1).collect();
        let v: Vec<f64> = t.iter().map(|t| (-0.4 * t).exp()).collect();
        let fit = fit_decay(&t, &v, (2.0, 15.0), FitModel::PureExponential).unwrap();
        assert!((fit.rate - 0.4).abs() < 1e-10);
        assert!(fit.rmse < 1e-12);
        assert!(fit.log_prefactor.abs() < 1e-10);
    }

    #[test]
    fn power_model_fit() {
        let t: Vec<f64> = (1..200).map(|i| i as f64 * 0.1).collect();
        let v: Vec<f64> = t.iter().map(|t| 3.0 * t * (-t).exp()).collect();
        let fit = fit_decay(&t, &v, (2.0, 15.0), FitModel::ExponentialTimesPower).unwrap();
        assert!((fit.rate - 1.0).abs() < 1e-8);
        assert!((fit.power.unwrap() - 1.0).abs() < 1e-6);
        assert!((fit.log_prefactor - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn fit_excludes_noise_floor() {
        let t: Vec<f64> = (0..1000).map(|i| i as f64 * 0.1).collect();
        // deterministic pseudo-noise of size 1e-13
        let v: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(i, t)| (-0.4 * t).exp() + 1e-13 * ((i * 7919 % 13) as f64 / 13.0))
            .collect();
        let fit = fit_decay(&t, &v, (2.0, 40.0), FitModel::PureExponential).unwrap();
        assert!((fit.rate - 0.4).abs() < 1e-3, "{}", fit.rate);
    }

    #[test]
    fn fit_errors() {
        let t: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let v = vec![1e-20; 100];
        assert_eq!(fit_decay(&t, &v, (10.0, 50.0), FitModel::PureExponential), Err(FitError::AllFloored));
        let v: Vec<f64> = t.iter().map(|t| (-t).exp()).collect();
        assert!(matches!(
            fit_decay(&t, &v, (2.0, 5.0), FitModel::PureExponential),
            Err(FitError::WindowTooSmall { got: 4, .. })
        ));
        assert!(fit_decay(&t, &v, (5.0, 2.0), FitModel::PureExponential).is_err());
    }

    fn random_pmf() -> impl Strategy<Value = Pmf> {
        prop::collection::vec(0.0f64..1.0, 2..12)
            .prop_filter("mass", |w| w.iter().sum::<f64>() > 1e-3)
            .prop_map(|w| Pmf::new(w, true).unwrap())
    }

    proptest! {
        #[test]
        fn metric_axioms(p in random_pmf(), q in random_pmf(), r in random_pmf()) {
            for d in [ell1_dist, ell2_dist, wasserstein1] {
                prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-14);
                prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
                prop_assert!(d(&p, &p).abs() < 1e-14);
            }
        }

        #[test]
        fn wasserstein_below_weighted_difference(p in random_pmf(), q in random_pmf()) {
            let bound: f64 = zip_padded(p.weights(), q.weights())
                .enumerate()
                .map(|(n, (a, b))| n as f64 * (a - b).abs())
                .sum();
            prop_assert!(wasserstein1(&p, &q) <= bound + 1e-12);
        }
    }
}
