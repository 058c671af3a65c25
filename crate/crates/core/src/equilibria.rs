//! Equilibrium laws of the mean-field system and the Lambert-W machinery
//! that fixes the Poisson parameter `ν` of the overpopulated regime.

use std::f64::consts::E;

use serde::Serialize;
use thiserror::Error;

use crate::pmf::{Pmf, PmfError};

/// `−1/e`, the branch point of `W₀`.
const BRANCH_POINT: f64 = -1.0 / E;
const MAX_HALLEY_ITERS: usize = 50;

/// Largest admissible Chernoff estimate of the truncated ZTP tail mass.
pub const ZTP_TAIL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("argument {value} outside the domain of {what}")]
    OutOfDomain { what: &'static str, value: f64 },
    #[error("n_max = {n_max} too small: equilibrium tail mass bound {tail:e} exceeds {ZTP_TAIL_TOL:e}")]
    TruncationTooSmall { n_max: usize, tail: f64 },
    #[error(transparent)]
    Pmf(#[from] PmfError),
}

/// Principal branch `W₀(x)`: the solution `y ≥ −1` of `y·eʸ = x`.
///
/// Halley iteration. Starting points: branch-point series below −0.25,
/// the two-term log asymptotic above `e`, `x(1 − x)` on `[−0.25, 1]` and
/// `ln(1 + x)` in between.
pub fn lambert_w0(x: f64) -> Result<f64, EquilibriumError> {
    if x.is_nan() || x < BRANCH_POINT - 1e-12 {
        return Err(EquilibriumError::OutOfDomain { what: "lambert_w0", value: x });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let mut w = if x < -0.25 {
        let p2 = 2.0 * (E * x + 1.0);
        if p2 <= 0.0 {
            return Ok(-1.0);
        }
        let p = p2.sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else if x >= E {
        let l1 = x.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    } else if x <= 1.0 {
        x * (1.0 - x)
    } else {
        x.ln_1p()
    };

    for _ in 0..MAX_HALLEY_ITERS {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        if !step.is_finite() {
            break;
        }
        let next = (w - step).max(-1.0);
        let converged = (next - w).abs() <= 4.0 * f64::EPSILON * (1.0 + next.abs());
        w = next;
        if converged {
            break;
        }
    }
    Ok(w)
}

/// `ν = μ + W₀(−μ e^{−μ})` for `μ > 1`.
pub fn nu_of_mu(mu: f64) -> Result<f64, EquilibriumError> {
    if !(mu > 1.0) || !mu.is_finite() {
        return Err(EquilibriumError::OutOfDomain { what: "nu_of_mu", value: mu });
    }
    let nu = mu + lambert_w0(-mu * (-mu).exp())?;
    Ok(nu.max(0.0))
}

/// Residual of the fixed-point relation `e^ν = μ (e^ν − 1)/ν`, scaled by `e^{-ν}`
/// so that it reads `1 − μ (1 − e^{−ν})/ν`.
pub fn nu_fixed_point_residual(mu: f64, nu: f64) -> f64 {
    (1.0 - mu * (-(-nu).exp_m1()) / nu).abs()
}

/// Inverse map `μ(ν) = ν e^ν/(e^ν − 1)`, handy for picking `μ` from a target `ν`.
pub fn mu_of_nu(nu: f64) -> f64 {
    nu / (-(-nu).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EquilibriumKind {
    Bernoulli,
    ZeroTruncatedPoisson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub kind: EquilibriumKind,
    pub pmf: Pmf,
    pub mu: f64,
    pub nu: Option<f64>,
}

/// `{1 − μ, μ, 0, …}` for `0 < μ ≤ 1`; `μ = 1` is the point mass at 1.
pub fn bernoulli_equilibrium(mu: f64, n_max: usize) -> Result<Equilibrium, EquilibriumError> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(EquilibriumError::OutOfDomain { what: "bernoulli_equilibrium", value: mu });
    }
    let mut weights = vec![0.0; n_max.max(1) + 1];
    weights[0] = 1.0 - mu;
    weights[1] = mu;
    Ok(Equilibrium {
        kind: EquilibriumKind::Bernoulli,
        pmf: Pmf::new(weights, false)?,
        mu,
        nu: None,
    })
}

/// Log of the Chernoff bound `(eν/x)^x / (e^ν − 1)` on the ZTP mass at
/// indices `≥ x`; `None` when `x < ν` and the bound does not apply.
pub fn ztp_log_tail_bound(nu: f64, x: usize) -> Option<f64> {
    let x = x as f64;
    if x < nu {
        return None;
    }
    Some(x * (1.0 + nu.ln() - x.ln()) - nu.exp_m1().ln())
}

/// Zero-truncated Poisson law with parameter `ν(μ)`, truncated at `n_max`.
///
/// Terms come from `p̄_{n+1} = p̄_n ν/(n+1)` with `p̄_1 = ν/(e^ν − 1)`. The
/// dropped tail is not redistributed, so the mass is `1 − tail`.
pub fn ztp_equilibrium(mu: f64, n_max: usize) -> Result<Equilibrium, EquilibriumError> {
    let nu = nu_of_mu(mu)?;
    let tail = ztp_log_tail_bound(nu, n_max + 1).map_or(f64::INFINITY, f64::exp);
    if tail > ZTP_TAIL_TOL {
        return Err(EquilibriumError::TruncationTooSmall { n_max, tail });
    }
    let mut weights = Vec::with_capacity(n_max + 1);
    weights.push(0.0);
    let mut term = nu / nu.exp_m1();
    for n in 1..=n_max {
        weights.push(term);
        term *= nu / (n + 1) as f64;
    }
    Ok(Equilibrium {
        kind: EquilibriumKind::ZeroTruncatedPoisson,
        pmf: Pmf::with_tolerance(weights, false, 2.0 * ZTP_TAIL_TOL)?,
        mu,
        nu: Some(nu),
    })
}

/// The equilibrium matching `μ`: Bernoulli for `μ ≤ 1`, ZTP otherwise.
pub fn equilibrium(mu: f64, n_max: usize) -> Result<Equilibrium, EquilibriumError> {
    if mu <= 1.0 {
        bernoulli_equilibrium(mu, n_max)
    } else {
        ztp_equilibrium(mu, n_max)
    }
}
