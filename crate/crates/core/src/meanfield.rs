//! The truncated discrete Fokker–Planck system `p' = 𝓕[p]` of the
//! mean-field dispersion process, its RK4 integrator and the Lyapunov
//! energy `ℰ[q] = Σ n² q_n − μ`.
//!
//! # Boundary closure
//!
//! The infinite system is cut to `n = 0..=n_max`. A silent cut leaks both
//! mass and particles through the row `n_max`. Here sites holding `n_max`
//! particles cannot receive more, and the gain rate of the remaining
//! sites is rescaled so that total gain equals total loss:
//!
//! ```text
//! g = (μ − q₁) / Σ_{n<n_max} q_n
//! 𝓕[q]_0     = −g q₀
//! 𝓕[q]_1     = 2 q₂ − g (q₁ − q₀)
//! 𝓕[q]_n     = (n+1) q_{n+1} − n q_n − g (q_n − q_{n−1})      2 ≤ n < n_max
//! 𝓕[q]_n_max = −n_max q_n_max + g q_{n_max−1}
//! ```
//!
//! With `q_{n_max} = 0` this is the untruncated generator row for row.
//! `Σ 𝓕 = 0` holds identically and `Σ n 𝓕 = μ − mean(q)`, which vanishes on
//! mean-μ data.

use std::io::{BufRead, Write};

use log::warn;
use serde::Serialize;
use thiserror::Error;

use crate::equilibria::{nu_of_mu, ztp_log_tail_bound};
use crate::pmf::{Pmf, PmfError};

/// Negative weights below this after a step abort the integration.
pub const UNSTABLE_WEIGHT: f64 = -1e-8;
/// Renormalize only when the mass has drifted by more than this.
pub const RENORM_DRIFT: f64 = 1e-13;
/// Required agreement between the initial mean and `μ`.
pub const MEAN_MATCH_TOL: f64 = 1e-10;
/// `dt · (n_max + 2μ)` must stay below this (the RK4 real-axis stability
/// interval is about 2.78).
pub const RK4_STABILITY_LIMIT: f64 = 2.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanFieldError {
    #[error(
        "RK4 step unstable at t = {time}: weight {weight:e} at n = {index}; \
         try dt <= {suggested_dt}"
    )]
    StepUnstable { time: f64, index: usize, weight: f64, suggested_dt: f64 },
    #[error("dt = {dt} too large for n_max = {n_max} (need dt*(n_max+2mu) <= {RK4_STABILITY_LIMIT})")]
    StepTooLarge { dt: f64, n_max: usize },
    #[error("initial mean {mean} differs from mu = {mu}")]
    MeanMismatch { mean: f64, mu: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("trajectory samples are not uniformly spaced")]
    NonUniformSampling,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("malformed trajectory csv: {0}")]
    Parse(String),
    #[error(transparent)]
    Pmf(#[from] PmfError),
}

/// Evaluates the closed generator into `out` (same length as `q`).
pub fn generator_into(q: &[f64], mu: f64, out: &mut [f64]) {
    let n_max = q.len() - 1;
    debug_assert_eq!(out.len(), q.len());
    let a = mu - q[1];
    let open: f64 = q[..n_max].iter().sum();
    let g = if open > 0.0 { a / open } else { a };

    out[0] = -g * q[0];
    for n in 1..n_max {
        let loss = if n >= 2 { n as f64 * q[n] } else { 0.0 };
        out[n] = (n + 1) as f64 * q[n + 1] - loss - g * (q[n] - q[n - 1]);
    }
    let loss = if n_max >= 2 { n_max as f64 * q[n_max] } else { 0.0 };
    out[n_max] = -loss + g * q[n_max - 1];
}

/// `𝓕[q]` with the conservative truncation closure.
pub fn generator(q: &Pmf, mu: f64) -> Vec<f64> {
    let mut out = vec![0.0; q.n_max() + 1];
    generator_into(q.weights(), mu, &mut out);
    out
}

/// Scratch buffers for [`Rk4`].
#[derive(Debug, Clone)]
struct Rk4 {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
}

impl Rk4 {
    fn new(len: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; len]), stage: vec![0.0; len] }
    }

    /// Classical RK4 step of `q' = 𝓕[q]`, in place.
    fn step(&mut self, q: &mut [f64], mu: f64, dt: f64) {
        let Self { k, stage } = self;
        generator_into(q, mu, &mut k[0]);
        for (s, (&x, &d)) in stage.iter_mut().zip(q.iter().zip(&k[0])) {
            *s = x + 0.5 * dt * d;
        }
        generator_into(stage, mu, &mut k[1]);
        for (s, (&x, &d)) in stage.iter_mut().zip(q.iter().zip(&k[1])) {
            *s = x + 0.5 * dt * d;
        }
        generator_into(stage, mu, &mut k[2]);
        for (s, (&x, &d)) in stage.iter_mut().zip(q.iter().zip(&k[2])) {
            *s = x + dt * d;
        }
        generator_into(stage, mu, &mut k[3]);
        for (n, x) in q.iter_mut().enumerate() {
            *x += dt / 6.0 * (k[0][n] + 2.0 * k[1][n] + 2.0 * k[2][n] + k[3][n]);
        }
    }
}

fn check_step_size(dt: f64, n_max: usize, mu: f64) -> Result<(), MeanFieldError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MeanFieldError::InvalidArgument(format!("dt = {dt}")));
    }
    if dt * (n_max as f64 + 2.0 * mu) > RK4_STABILITY_LIMIT {
        return Err(MeanFieldError::StepTooLarge { dt, n_max });
    }
    Ok(())
}

/// Clamps round-off negatives and renormalizes on drift. Fails on a weight
/// below [`UNSTABLE_WEIGHT`].
fn sanitize(q: &mut [f64], time: f64) -> Result<(), MeanFieldError> {
    let n_max = q.len() - 1;
    for (index, w) in q.iter_mut().enumerate() {
        if !w.is_finite() || *w < UNSTABLE_WEIGHT {
            return Err(MeanFieldError::StepUnstable {
                time,
                index,
                weight: *w,
                suggested_dt: 0.5 / n_max as f64,
            });
        }
        if *w < 0.0 {
            *w = 0.0;
        }
    }
    let mass: f64 = q.iter().sum();
    if (mass - 1.0).abs() > RENORM_DRIFT {
        q.iter_mut().for_each(|w| *w /= mass);
    }
    Ok(())
}

/// One classical RK4 step of length `dt`.
pub fn rk4_step(q: &Pmf, mu: f64, dt: f64) -> Result<Pmf, MeanFieldError> {
    check_step_size(dt, q.n_max(), mu)?;
    let mut state = q.weights().to_vec();
    Rk4::new(state.len()).step(&mut state, mu, dt);
    sanitize(&mut state, dt)?;
    Ok(Pmf::new(state, false)?)
}

/// `ℰ[q] = Σ n² q_n − μ`.
pub fn energy(q: &Pmf, mu: f64) -> f64 {
    q.moment(2) - mu
}

/// Sampled solution of the mean-field system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub mu: f64,
    pub times: Vec<f64>,
    pub states: Vec<Pmf>,
    pub a_series: Vec<f64>,
    pub energy_series: Vec<f64>,
}

impl Trajectory {
    fn with_capacity(mu: f64, cap: usize) -> Self {
        Self {
            mu,
            times: Vec::with_capacity(cap),
            states: Vec::with_capacity(cap),
            a_series: Vec::with_capacity(cap),
            energy_series: Vec::with_capacity(cap),
        }
    }

    fn push(&mut self, t: f64, state: Pmf) {
        self.a_series.push(self.mu - state.get(1));
        self.energy_series.push(energy(&state, self.mu));
        self.times.push(t);
        self.states.push(state);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &Pmf {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn n_max(&self) -> usize {
        self.states[0].n_max()
    }

    /// Common sample spacing, if the grid is uniform to 1e-9 relative.
    pub fn uniform_spacing(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let h = self.times[1] - self.times[0];
        let uniform = self
            .times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.max(1.0));
        uniform.then_some(h)
    }

    /// Index of the sample at time `t`, if one lies within `1e-9`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let idx = self.times.partition_point(|&s| s < t - 1e-9);
        (idx < self.times.len() && (self.times[idx] - t).abs() <= 1e-9).then_some(idx)
    }

    /// Writes the `t,a,energy,p0,...,p{nmax}` table.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let n_max = self.n_max();
        let mut header = vec!["t".to_string(), "a".to_string(), "energy".to_string()];
        header.extend((0..=n_max).map(|n| format!("p{n}")));
        wtr.write_record(&header)?;
        let mut row = Vec::with_capacity(n_max + 4);
        for i in 0..self.len() {
            row.clear();
            row.push(self.times[i].to_string());
            row.push(self.a_series[i].to_string());
            row.push(self.energy_series[i].to_string());
            row.extend(self.states[i].weights().iter().map(f64::to_string));
            wtr.write_record(&row)?;
        }
        wtr.flush()
    }

    /// Reads a table written by [`Trajectory::write_csv`]. `μ` is taken
    /// from `mu` when given, else from the mean of the first state; `a` and
    /// the energy are recomputed from the states.
    pub fn read_csv<R: BufRead>(reader: R, mu: Option<f64>) -> Result<Self, MeanFieldError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| MeanFieldError::Parse(e.to_string()))?.clone();
        if headers.len() < 5 || &headers[0] != "t" || &headers[3] != "p0" {
            return Err(MeanFieldError::Parse("expected header t,a,energy,p0,...".into()));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| MeanFieldError::Parse(e.to_string()))?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| MeanFieldError::Parse(e.to_string()));
            times.push(parse(&record[0])?);
            let weights = record.iter().skip(3).map(parse).collect::<Result<Vec<_>, _>>()?;
            states.push(Pmf::with_tolerance(weights, false, 1e-8)?);
        }
        if states.is_empty() {
            return Err(MeanFieldError::TooFewSamples { needed: 1, got: 0 });
        }
        let mu = mu.unwrap_or_else(|| states[0].mean());
        let mut traj = Self::with_capacity(mu, states.len());
        for (t, s) in times.into_iter().zip(states) {
            traj.push(t, s);
        }
        Ok(traj)
    }
}

/// Integrates from `p0` to `t_end` with fixed step `dt`, recording every
/// `record_every` steps and at the final time.
pub fn solve(
    p0: &Pmf,
    mu: f64,
    t_end: f64,
    dt: f64,
    record_every: usize,
) -> Result<Trajectory, MeanFieldError> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(MeanFieldError::InvalidArgument(format!("t_end = {t_end}")));
    }
    if record_every == 0 {
        return Err(MeanFieldError::InvalidArgument("record_every = 0".into()));
    }
    let n_max = p0.n_max();
    check_step_size(dt, n_max, mu)?;
    let mean = p0.mean();
    if (mean - mu).abs() > MEAN_MATCH_TOL {
        return Err(MeanFieldError::MeanMismatch { mean, mu });
    }
    if mu > 1.0 {
        if let Some(lb) = nu_of_mu(mu).ok().and_then(|nu| ztp_log_tail_bound(nu, n_max)) {
            if lb > 1e-10f64.ln() {
                warn!("equilibrium tail mass at n_max = {n_max} may reach {:.1e}", lb.exp());
            }
        }
    }

    let steps = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut traj = Trajectory::with_capacity(mu, steps / record_every + 2);
    let mut state = p0.weights().to_vec();
    let mut rk = Rk4::new(state.len());
    traj.push(0.0, p0.clone());
    for step in 1..=steps {
        let t_prev = (step - 1) as f64 * dt;
        let (h, t) = if step == steps { (t_end - t_prev, t_end) } else { (dt, step as f64 * dt) };
        rk.step(&mut state, mu, h);
        sanitize(&mut state, t)?;
        if step % record_every == 0 || step == steps {
            traj.push(t, Pmf::new(state.clone(), false)?);
        }
    }
    Ok(traj)
}

/// `|Δℰ/Δt − (−2ℰ + 2μ(μ − p₁))|` at interior samples, with a centered
/// difference on the sample grid.
pub fn energy_derivative_residual(traj: &Trajectory, mu: f64) -> Result<Vec<f64>, MeanFieldError> {
    if traj.len() < 3 {
        return Err(MeanFieldError::TooFewSamples { needed: 3, got: traj.len() });
    }
    let h = traj.uniform_spacing().ok_or(MeanFieldError::NonUniformSampling)?;
    let e = &traj.energy_series;
    Ok((1..traj.len() - 1)
        .map(|i| {
            let fd = (e[i + 1] - e[i - 1]) / (2.0 * h);
            let rhs = -2.0 * e[i] + 2.0 * mu * (mu - traj.states[i].get(1));
            (fd - rhs).abs()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibria::{bernoulli_equilibrium, ztp_equilibrium};
    use crate::metrics::ell1_dist;
    use proptest::prelude::*;

    #[test]
    fn generator_on_delta_two() {
        let q = Pmf::delta(2, 10);
        let f = generator(&q, 2.0);
        assert_eq!(&f[..5], &[0.0, 2.0, -4.0, 2.0, 0.0]);
        assert!(f[5..].iter().all(|&x| x == 0.0));
        let mass: f64 = f.iter().sum();
        let mean: f64 = f.iter().enumerate().map(|(n, x)| n as f64 * x).sum();
        assert_eq!(mass, 0.0);
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn generator_vanishes_at_equilibria() {
        for &mu in &[0.3, 0.8, 1.0] {
            let eq = bernoulli_equilibrium(mu, 50).unwrap();
            assert!(generator(&eq.pmf, mu).iter().all(|&x| x == 0.0), "mu={mu}");
        }
        let eq = ztp_equilibrium(2.0, 60).unwrap();
        let f = generator(&eq.pmf, 2.0);
        assert!(f.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn generator_untruncated_rows_when_boundary_empty() {
        // rows away from the boundary follow the plain formula
        let q = Pmf::new(vec![0.1, 0.3, 0.3, 0.2, 0.1, 0.0, 0.0], false).unwrap();
        let mu = q.mean();
        let a = mu - q.get(1);
        let f = generator(&q, mu);
        assert!((f[0] + a * q.get(0)).abs() < 1e-15);
        assert!((f[1] - (2.0 * q.get(2) - a * (q.get(1) - q.get(0)))).abs() < 1e-15);
        for n in 2..6 {
            let expect = (n + 1) as f64 * q.get(n + 1)
                - n as f64 * q.get(n)
                - a * (q.get(n) - q.get(n - 1));
            assert!((f[n] - expect).abs() < 1e-15, "row {n}");
        }
    }

    #[test]
    fn equilibrium_is_fixed_by_rk4() {
        let eq = bernoulli_equilibrium(0.8, 20).unwrap();
        for &dt in &[0.001, 0.01, 0.05] {
            let next = rk4_step(&eq.pmf, 0.8, dt).unwrap();
            assert!(ell1_dist(&next, &eq.pmf) < 1e-15);
        }
    }

    #[test]
    fn rk4_conserves_on_delta_two() {
        let q = Pmf::delta(2, 100);
        let next = rk4_step(&q, 2.0, 0.01).unwrap();
        assert!((next.mass() - 1.0).abs() < 1e-12);
        assert!((next.mean() - 2.0).abs() < 1e-12);
        assert!((next.get(1) - 0.0198).abs() < 1e-3);
    }

    #[test]
    fn rk4_local_error_is_fifth_order() {
        let q = Pmf::delta(2, 100);
        let split_gap = |dt: f64| {
            let full = rk4_step(&q, 2.0, dt).unwrap();
            let half = rk4_step(&rk4_step(&q, 2.0, dt / 2.0).unwrap(), 2.0, dt / 2.0).unwrap();
            ell1_dist(&full, &half)
        };
        let (coarse, fine) = (split_gap(0.01), split_gap(0.005));
        assert!(coarse < 1e-7);
        // 2^5 = 32 for an O(dt^5) local error
        let ratio = coarse / fine;
        assert!(ratio > 25.0 && ratio < 40.0, "ratio {ratio}");
    }

    #[test]
    fn rejects_oversized_step_and_bad_mean() {
        let q = Pmf::delta(2, 100);
        assert!(matches!(rk4_step(&q, 2.0, 0.05), Err(MeanFieldError::StepTooLarge { .. })));
        assert!(matches!(
            solve(&q, 1.5, 1.0, 0.01, 1),
            Err(MeanFieldError::MeanMismatch { .. })
        ));
    }

    #[test]
    fn equilibrium_trajectory_is_constant() {
        let eq = bernoulli_equilibrium(0.8, 30).unwrap();
        let traj = solve(&eq.pmf, 0.8, 2.0, 0.01, 10).unwrap();
        assert_eq!(traj.len(), 21);
        for s in &traj.states {
            assert!(ell1_dist(s, &eq.pmf) < 1e-15);
        }
        let resid = energy_derivative_residual(&traj, 0.8).unwrap();
        assert!(resid.iter().all(|&r| r < 1e-12));
    }

    #[test]
    fn solve_records_final_time() {
        let traj = solve(&Pmf::delta(2, 40), 2.0, 1.005, 0.01, 10).unwrap();
        assert_eq!(*traj.times.last().unwrap(), 1.005);
        assert_eq!(traj.times[0], 0.0);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        assert!(traj.uniform_spacing().is_none());
        assert!(matches!(
            energy_derivative_residual(&traj, 2.0),
            Err(MeanFieldError::NonUniformSampling)
        ));
    }

    #[test]
    fn energy_values() {
        let eq = bernoulli_equilibrium(0.8, 5).unwrap();
        assert!(energy(&eq.pmf, 0.8).abs() < 1e-15);
        assert_eq!(energy(&Pmf::delta(2, 5), 2.0), 2.0);
        // Poisson factorial moments give Σn²p̄ = μ(1 + ν)
        let ztp = ztp_equilibrium(2.0, 60).unwrap();
        let nu = ztp.nu.unwrap();
        let direct: f64 = (1..=60).map(|n| (n * n) as f64 * ztp.pmf.get(n)).sum::<f64>() - 2.0;
        assert!((energy(&ztp.pmf, 2.0) - direct).abs() < 1e-13);
        assert!((energy(&ztp.pmf, 2.0) - (2.0 * (1.0 + nu) - 2.0)).abs() < 1e-10);
    }

    #[test]
    fn csv_round_trip() {
        let traj = solve(&Pmf::delta(2, 20), 2.0, 0.5, 0.01, 5).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice(), Some(2.0)).unwrap();
        assert_eq!(back.times, traj.times);
        assert_eq!(back.states, traj.states);
        let header = String::from_utf8(buf).unwrap();
        assert!(header.starts_with("t,a,energy,p0,p1,"));
    }

    fn mean_preserving_pmf() -> impl Strategy<Value = Pmf> {
        prop::collection::vec(0.0f64..1.0, 3..30)
            .prop_filter("mass", |w| w.iter().sum::<f64>() > 0.1)
            .prop_map(|mut w| {
                w.push(0.0);
                Pmf::new(w, true).unwrap()
            })
    }

    proptest! {
        #[test]
        fn generator_conserves_mass_and_mean(q in mean_preserving_pmf()) {
            let mu = q.mean();
            let f = generator(&q, mu);
            let mass: f64 = f.iter().sum();
            let mean: f64 = f.iter().enumerate().map(|(n, x)| n as f64 * x).sum();
            let scale = f.iter().map(|x| x.abs()).sum::<f64>().max(1.0) * q.n_max() as f64;
            prop_assert!(mass.abs() < 1e-14 * scale);
            prop_assert!(mean.abs() < 1e-14 * scale);
        }

        #[test]
        fn boundary_mass_is_conserved(w in prop::collection::vec(0.0f64..1.0, 4..12)) {
            prop_assume!(w.iter().sum::<f64>() > 0.1 && *w.last().unwrap() > 0.01);
            let q = Pmf::new(w, true).unwrap();
            let mu = q.mean();
            let f = generator(&q, mu);
            let mass: f64 = f.iter().sum();
            let mean: f64 = f.iter().enumerate().map(|(n, x)| n as f64 * x).sum();
            prop_assert!(mass.abs() < 1e-12);
            prop_assert!(mean.abs() < 1e-12);
        }
    }
}
