//! Mean-field dispersion process: the discrete Fokker-Planck system, its
//! equilibria, generating-function diagnostics and an exact stochastic
//! simulator of the finite particle system.

pub mod abm;
pub mod cli;
pub mod equilibria;
pub mod meanfield;
pub mod metrics;
pub mod params;
pub mod pgf;
pub mod pmf;
pub mod quadrature;

pub use equilibria::{equilibrium, nu_of_mu, Equilibrium, EquilibriumKind};
pub use meanfield::{solve, Trajectory};
pub use params::ModelParams;
pub use pmf::Pmf;
