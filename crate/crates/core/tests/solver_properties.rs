use num_complex::Complex64;
use proptest::prelude::*;

use dispersion_lab::equilibria::{bernoulli_equilibrium, nu_of_mu};
use dispersion_lab::meanfield::{energy, energy_derivative_residual, solve};
use dispersion_lab::metrics::{ell1_dist, ell2_dist, wasserstein1};
use dispersion_lab::pgf::{pgf_eval, phi};
use dispersion_lab::pmf::Pmf;

fn spike(mu: f64) -> Pmf {
    Pmf::split(100, mu / 100.0, 100).unwrap()
}

#[test]
fn energy_decays_at_least_exponentially_below_one() {
    for mu in [0.3, 0.5, 0.8] {
        let traj = solve(&spike(mu), mu, 15.0, 0.01, 10).unwrap();
        let e0 = traj.energy_series[0];
        for (t, e) in traj.times.iter().zip(&traj.energy_series) {
            let bound = e0 * (-2.0 * (1.0 - mu) * t).exp();
            assert!(*e <= 1.05 * bound, "mu={mu} t={t}: {e} > {bound}");
        }
    }
}

#[test]
fn critical_energy_bound_and_l1_control() {
    let traj = solve(&spike(1.0), 1.0, 40.0, 0.01, 10).unwrap();
    let p00 = traj.states[0].get(0);
    let e0 = traj.energy_series[0];
    let target = bernoulli_equilibrium(1.0, 100).unwrap().pmf;
    for ((t, e), s) in traj.times.iter().zip(&traj.energy_series).zip(&traj.states) {
        let bound = e0 * (-2.0 * t).exp() + 4.0 / (t + 2.0 / p00) + 2.0 * p00 * (-t).exp();
        assert!(*e <= bound, "t={t}");
        assert!(ell1_dist(s, &target) <= 2.0 * e + 1e-12, "t={t}");
    }
}

#[test]
fn weights_stay_nonnegative() {
    for (p0, mu) in [(spike(0.8), 0.8), (Pmf::delta(2, 100), 2.0), (Pmf::split(4, 0.75, 100).unwrap(), 3.0)] {
        let traj = solve(&p0, mu, 10.0, 0.01, 5).unwrap();
        assert!(traj.states.iter().flat_map(|s| s.weights()).all(|&w| w >= -1e-10));
    }
}

#[test]
fn halving_the_step_changes_little() {
    for (p0, mu) in [(spike(0.8), 0.8), (Pmf::delta(2, 100), 2.0)] {
        let coarse = solve(&p0, mu, 10.0, 0.01, 1000).unwrap();
        let fine = solve(&p0, mu, 10.0, 0.005, 2000).unwrap();
        let gap = ell1_dist(coarse.final_state(), fine.final_state());
        assert!(gap < 1e-9, "mu={mu}: {gap:e}");
    }
}

#[test]
fn identical_data_gives_identical_paths() {
    let p0 = Pmf::delta(2, 100);
    let a = solve(&p0, 2.0, 5.0, 0.01, 10).unwrap();
    let again = solve(&p0, 2.0, 5.0, 0.01, 10).unwrap();
    assert_eq!(a.states, again.states);
    // refinement only moves the path by discretization error
    let b = solve(&p0, 2.0, 5.0, 0.005, 20).unwrap();
    assert_eq!(a.times.len(), b.times.len());
    for (p, q) in a.states.iter().zip(&b.states) {
        let d = wasserstein1(p, q);
        assert!(d < 1e-6, "{d:e}");
    }
}

#[test]
fn energy_identity_residual_is_second_order_in_spacing() {
    let mu = 0.8;
    let worst = |every: usize| {
        // skip the boundary transient of the spike at nmax
        let traj = solve(&spike(mu), mu, 4.0, 0.0025, every).unwrap();
        let skip = traj.times.iter().position(|&t| t >= 1.0).unwrap();
        energy_derivative_residual(&traj, mu).unwrap()[skip..].iter().fold(0.0, |a: f64, &b| a.max(b))
    };
    let (r1, r2, r3) = (worst(40), worst(20), worst(10));
    for ratio in [r1 / r2, r2 / r3] {
        assert!((3.0..5.0).contains(&ratio), "{r1:e} {r2:e} {r3:e}");
    }
}

#[test]
fn parseval_on_unit_circle() {
    let p = Pmf::new((0..60).map(|n| 1.0 / (1.0 + n as f64).powi(2)).collect(), true).unwrap();
    let q = Pmf::new((0..80).map(|n| (-0.3 * n as f64).exp()).collect(), true).unwrap();
    let m = 256;
    let avg: f64 = (0..m)
        .map(|k| {
            let z = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / m as f64);
            (pgf_eval(&p, z).unwrap() - pgf_eval(&q, z).unwrap()).norm_sqr()
        })
        .sum::<f64>()
        / m as f64;
    assert!((avg - ell2_dist(&p, &q).powi(2)).abs() < 1e-10);
}

#[test]
fn squeeze_map_fixes_e_nu() {
    for k in 1..=40 {
        let mu = 1.0 + 0.1 * k as f64;
        let x = nu_of_mu(mu).unwrap().exp();
        assert!((phi(x, mu).unwrap() - x).abs() <= 1e-11, "mu={mu}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gronwall_for_mean_preserving_perturbations(eps in 0.001f64..0.05, n in 2usize..6) {
        // move eps from n to n - 1 and n + 1 equally
        let mu = n as f64;
        let base = Pmf::delta(n, 60);
        let mut w = base.weights().to_vec();
        w[n] -= eps;
        w[n - 1] += eps / 2.0;
        w[n + 1] += eps / 2.0;
        let pert = Pmf::new(w, false).unwrap();
        let a = solve(&base, mu, 5.0, 0.01, 10).unwrap();
        let b = solve(&pert, mu, 5.0, 0.01, 10).unwrap();
        let w0 = wasserstein1(&base, &pert);
        for ((t, p), q) in a.times.iter().zip(&a.states).zip(&b.states) {
            prop_assert!(wasserstein1(p, q) <= w0 * (2.0 * t).exp() * 1.01);
        }
    }

    #[test]
    fn conservation_from_random_two_point_laws(n in 2usize..40, frac in 0.05f64..1.0) {
        let p0 = Pmf::split(n, frac, 60).unwrap();
        let mu = p0.mean();
        let traj = solve(&p0, mu, 3.0, 0.01, 25).unwrap();
        for s in &traj.states {
            prop_assert!((s.mass() - 1.0).abs() <= 1e-8);
            prop_assert!((s.mean() - mu).abs() <= 1e-8);
            prop_assert!(energy(s, mu).is_finite());
        }
    }
}
