//! Generating-function machinery for the overpopulated regime.
//!
//! Along a trajectory, the auxiliary function
//! `v(t) = exp(∫₀ᵗ e^{s−t} a(s) ds)` drives the characteristic-line formula
//! for `G(t, z) = Σ p_n(t) zⁿ` and satisfies a nonlinear Volterra relation.
//! Everything here is evaluated on the trajectory's own time grid.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::equilibria::nu_of_mu;
use crate::meanfield::Trajectory;
use crate::pmf::Pmf;
use crate::quadrature::adaptive_simpson;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PgfError {
    #[error("z = {0} lies outside the admissible disk")]
    OutOfDisk(Complex64),
    #[error("t = {0} is not a grid time of the auxiliary solution")]
    OffGrid(f64),
    #[error("trajectory samples are not uniformly spaced")]
    NonUniformSampling,
    #[error("argument {value} outside the domain of {what}")]
    OutOfDomain { what: &'static str, value: f64 },
}

/// Horner evaluation of `Σ q_n zⁿ` for `|z| ≤ 1`.
pub fn pgf_eval(q: &Pmf, z: Complex64) -> Result<Complex64, PgfError> {
    if z.norm() > 1.0 + 1e-12 {
        return Err(PgfError::OutOfDisk(z));
    }
    Ok(horner(q.weights(), z))
}

fn horner(weights: &[f64], z: Complex64) -> Complex64 {
    weights.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &w| acc * z + w)
}

fn horner_real(weights: &[f64], x: f64) -> f64 {
    weights.iter().rev().fold(0.0, |acc, &w| acc * x + w)
}

/// `v`, `H` and `∫ log v` sampled on a trajectory grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuxiliarySolution {
    pub mu: f64,
    pub times: Vec<f64>,
    /// `log v(t) = ∫₀ᵗ e^{s−t} a(s) ds`
    pub log_v: Vec<f64>,
    pub v_series: Vec<f64>,
    /// `H(t) = ∫₀ᵗ e^s a(s) ds = e^t log v(t)`
    pub h_series: Vec<f64>,
    /// `∫₀ᵗ log v(s) ds`
    pub log_v_integral: Vec<f64>,
    spacing: f64,
}

impl AuxiliarySolution {
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let idx = self.times.partition_point(|&s| s < t - 1e-9);
        (idx < self.times.len() && (self.times[idx] - t).abs() <= 1e-9).then_some(idx)
    }

    /// `∫₀^{t_i} [v(s)]^{z e^{s−t_i}} e^{s−t_i} ds`, trapezoid in `v^{…}`
    /// with the `e^{s−t_i}` kernel integrated exactly on each step.
    pub fn memory_integral(&self, i: usize, z: Complex64) -> Complex64 {
        let t = self.times[i];
        let g = |j: usize| (z * ((self.times[j] - t).exp() * self.log_v[j])).exp();
        self.kernel_sum(i, g)
    }

    fn memory_integral_real(&self, i: usize) -> f64 {
        let t = self.times[i];
        let g = |j: usize| ((self.times[j] - t).exp() * self.log_v[j]).exp();
        self.kernel_sum(i, g)
    }

    fn kernel_sum<T, F>(&self, i: usize, g: F) -> T
    where
        T: Copy + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + Default,
        F: Fn(usize) -> T,
    {
        let (wl, wr) = exact_kernel_weights(self.spacing);
        let t = self.times[i];
        let mut acc = T::default();
        if i == 0 {
            return acc;
        }
        let mut left = g(0);
        for j in 1..=i {
            let right = g(j);
            acc = acc + (left * wl + right * wr) * (self.times[j] - t).exp();
            left = right;
        }
        acc
    }
}

/// One-step weights of `∫_{t_i}^{t_i+Δ} e^{s−t_i−Δ} a(s) ds` for `a` linear
/// between the two samples: returns `(w_left, w_right)`.
fn exact_kernel_weights(delta: f64) -> (f64, f64) {
    let em1 = (-delta).exp_m1(); // e^{−Δ} − 1
    let total = -em1; // 1 − e^{−Δ}
    // (Δ − 1 + e^{−Δ})/Δ, with a series for tiny Δ
    let right = if delta < 1e-4 {
        delta / 2.0 - delta * delta / 6.0 + delta.powi(3) / 24.0
    } else {
        (delta + em1) / delta
    };
    (total - right, right)
}

/// Builds `v` from the trajectory's active-particle series. `log v` obeys
/// `I(t+Δ) = e^{−Δ} I(t) + ∫_t^{t+Δ} e^{s−t−Δ} a(s) ds`, with the
/// exponential kernel integrated exactly against the linear interpolant
/// of `a`.
pub fn v_from_trajectory(traj: &Trajectory) -> Result<AuxiliarySolution, PgfError> {
    let h = traj.uniform_spacing().ok_or(PgfError::NonUniformSampling)?;
    let a = &traj.a_series;
    let (wl, wr) = exact_kernel_weights(h);
    let decay = (-h).exp();
    let n = traj.len();
    let mut log_v = Vec::with_capacity(n);
    let mut acc = 0.0;
    log_v.push(0.0);
    for i in 1..n {
        acc = decay * acc + wl * a[i - 1] + wr * a[i];
        log_v.push(acc);
    }
    let mut log_v_integral = Vec::with_capacity(n);
    let mut cum = 0.0;
    log_v_integral.push(0.0);
    for i in 1..n {
        cum += 0.5 * h * (log_v[i - 1] + log_v[i]);
        log_v_integral.push(cum);
    }
    Ok(AuxiliarySolution {
        mu: traj.mu,
        times: traj.times.clone(),
        v_series: log_v.iter().map(|l| l.exp()).collect(),
        h_series: traj.times.iter().zip(&log_v).map(|(t, l)| t.exp() * l).collect(),
        log_v,
        log_v_integral,
        spacing: h,
    })
}

/// `|v(t) − RHS(t)|` of the Volterra relation
/// `v = 1 − f₀ + f₀(0) e^{−∫log v} + μ ∫₀ᵗ v(s)^{e^{s−t}} e^{s−t} ds`,
/// with `f₀(t) = G(0, 1 − e^{−t})`.
pub fn volterra_residual(traj: &Trajectory, aux: &AuxiliarySolution) -> Vec<f64> {
    let p0 = traj.states[0].weights();
    let f00 = p0[0];
    (0..aux.times.len())
        .map(|i| {
            let f0 = horner_real(p0, -(-aux.times[i]).exp_m1());
            let rhs = 1.0 - f0
                + f00 * (-aux.log_v_integral[i]).exp()
                + aux.mu * aux.memory_integral_real(i);
            (aux.v_series[i] - rhs).abs()
        })
        .collect()
}

/// `G(t, 1 − z)` from the characteristic-line formula
/// `1 + (G(0, 1 − z e^{−t}) − 1 − μ z ∫₀ᵗ v^{z e^{s−t}} e^{s−t} ds) v(t)^{−z}`,
/// for `|1 − z| ≤ 1` and `t` on the grid.
pub fn explicit_pgf(
    t: f64,
    z: Complex64,
    p0: &Pmf,
    aux: &AuxiliarySolution,
) -> Result<Complex64, PgfError> {
    if (Complex64::new(1.0, 0.0) - z).norm() > 1.0 + 1e-12 {
        return Err(PgfError::OutOfDisk(z));
    }
    let i = aux.index_of(t).ok_or(PgfError::OffGrid(t))?;
    let t = aux.times[i];
    let one = Complex64::new(1.0, 0.0);
    let g0 = horner(p0.weights(), one - z * (-t).exp());
    let memory = aux.memory_integral(i, z);
    let v_pow = (-z * aux.log_v[i]).exp();
    Ok(one + (g0 - one - z * memory * aux.mu) * v_pow)
}

/// Reconstructs `a(t) = μ − p₁(t) = v'/v + log v` at interior grid points
/// from centered differences of `log v`.
pub fn active_from_auxiliary(aux: &AuxiliarySolution) -> Vec<f64> {
    let h = aux.spacing;
    (1..aux.times.len().saturating_sub(1))
        .map(|i| (aux.log_v[i + 1] - aux.log_v[i - 1]) / (2.0 * h) + aux.log_v[i])
        .collect()
}

/// `φ(x) = μ (x − 1)/log x`, continuous through `φ(1) = μ`.
pub fn phi(x: f64, mu: f64) -> Result<f64, PgfError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(PgfError::OutOfDomain { what: "phi", value: x });
    }
    let d = x - 1.0;
    if d.abs() < 1e-6 {
        // (x − 1)/log x = 1 + d/2 − d²/12 + O(d³)
        return Ok(mu * (1.0 + d / 2.0 - d * d / 12.0));
    }
    let log_x = if d.abs() < 0.5 { d.ln_1p() } else { x.ln() };
    Ok(mu * d / log_x)
}

/// Lipschitz constant of `φ` on `[e^{μ−1}, e^μ]`:
/// `L_μ = (μ² − 2μ + μ e^{1−μ})/(μ − 1)²`.
pub fn contraction_constant(mu: f64) -> Result<f64, PgfError> {
    if !(mu > 1.0) {
        return Err(PgfError::OutOfDomain { what: "contraction_constant", value: mu });
    }
    Ok((mu * mu - 2.0 * mu + mu * (1.0 - mu).exp()) / ((mu - 1.0) * (mu - 1.0)))
}

/// `∫₀^∞ exp(L e^{−s} − r s) ds`. Past `s*` with `L e^{−s*} ≤ 1e−14` the
/// integrand is `e^{−rs}(1 + L e^{−s})` to double precision and the tail is
/// closed-form.
fn exp_kernel_integral(log_x: f64, rate: f64) -> f64 {
    if log_x == 0.0 {
        return 1.0 / rate;
    }
    let s_star = (log_x / 1e-14).ln().max(0.0);
    let body = adaptive_simpson(&|s: f64| (log_x * (-s).exp() - rate * s).exp(), 0.0, s_star, 1e-14);
    let tail = (-rate * s_star).exp() / rate + log_x * (-(rate + 1.0) * s_star).exp() / (rate + 1.0);
    body + tail
}

fn check_phi_c_args(x: f64, c: f64) -> Result<(), PgfError> {
    if !(x >= 1.0) || !x.is_finite() {
        return Err(PgfError::OutOfDomain { what: "phi_c (x)", value: x });
    }
    if !(0.0..1.0).contains(&c) {
        return Err(PgfError::OutOfDomain { what: "phi_c (c)", value: c });
    }
    Ok(())
}

/// `φ_c(x) = μ ∫₀^∞ x^{e^{−s}} e^{−(1−c)s} ds` for `x ≥ 1`, `0 ≤ c < 1`.
pub fn phi_c(x: f64, mu: f64, c: f64) -> Result<f64, PgfError> {
    check_phi_c_args(x, c)?;
    Ok(mu * exp_kernel_integral(x.ln(), 1.0 - c))
}

/// `φ_c′(x) = μ ∫₀^∞ x^{e^{−s} − 1} e^{−(2−c)s} ds`.
pub fn phi_c_derivative(x: f64, mu: f64, c: f64) -> Result<f64, PgfError> {
    check_phi_c_args(x, c)?;
    Ok(mu / x * exp_kernel_integral(x.ln(), 2.0 - c))
}

/// `ε_c = μ e^{−ν}(1 − c) / (2(2 − c))`.
pub fn epsilon_c(mu: f64, c: f64) -> Result<f64, PgfError> {
    let nu = nu_of_mu(mu).map_err(|_| PgfError::OutOfDomain { what: "epsilon_c", value: mu })?;
    Ok(mu * (-nu).exp() * (1.0 - c) / (2.0 * (2.0 - c)))
}
