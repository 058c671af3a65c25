use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibria::{nu_fixed_point_residual, nu_of_mu, EquilibriumError};

pub const DEFAULT_N_MAX: usize = 100;
pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_TOL_FIXEDPOINT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("mu must be positive and finite, got {0}")]
    InvalidMu(f64),
    #[error("n_max must be at least 1")]
    InvalidNMax,
    #[error("dt must be positive and finite, got {0}")]
    InvalidDt(f64),
    #[error("nu = {nu} fails its fixed-point relation (residual {residual:e})")]
    FixedPoint { nu: f64, residual: f64 },
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

/// Parameters of a mean-field run. `nu` is present exactly when `mu > 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mu: f64,
    pub nu: Option<f64>,
    pub n_max: usize,
    pub dt: f64,
    pub tol_mass: f64,
    pub tol_fixedpoint: f64,
}

impl ModelParams {
    pub fn new(mu: f64) -> Result<Self, ParamsError> {
        Self::with_grid(mu, DEFAULT_N_MAX, DEFAULT_DT)
    }

    pub fn with_grid(mu: f64, n_max: usize, dt: f64) -> Result<Self, ParamsError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ParamsError::InvalidMu(mu));
        }
        if n_max < 1 {
            return Err(ParamsError::InvalidNMax);
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ParamsError::InvalidDt(dt));
        }
        let nu = if mu > 1.0 {
            let nu = nu_of_mu(mu)?;
            let residual = nu_fixed_point_residual(mu, nu);
            // the relation degenerates as ν → 0, where only the Lambert route is meaningful
            if nu > 1e-6 && residual > DEFAULT_TOL_FIXEDPOINT {
                return Err(ParamsError::FixedPoint { nu, residual });
            }
            Some(nu)
        } else {
            None
        };
        Ok(Self {
            mu,
            nu,
            n_max,
            dt,
            tol_mass: crate::pmf::DEFAULT_TOL_MASS,
            tol_fixedpoint: DEFAULT_TOL_FIXEDPOINT,
        })
    }
}
