//! Truncated probability mass functions on ℕ.
//!
//! A [`Pmf`] stores weights densely for `n = 0..=n_max`. Mass beyond the
//! truncation index is treated as zero. All values are immutable once
//! constructed.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magnitudes below this are clamped to zero during validation.
pub const CLAMP_EPS: f64 = 1e-15;

/// Default tolerance on `|Σ p_n − 1|` for unnormalized construction.
pub const DEFAULT_TOL_MASS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PmfError {
    #[error("negative weight {value} at n = {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("all weights are zero")]
    ZeroMass,
    #[error("total mass {mass} differs from 1 by more than {tol}")]
    NotNormalized { mass: f64, tol: f64 },
    #[error("a pmf needs at least two entries (n_max >= 1), got {0}")]
    TooShort(usize),
    #[error("non-finite weight at n = {0}")]
    NonFinite(usize),
    #[error("malformed pmf input: {0}")]
    Parse(String),
}

/// Probability mass function on `{0, …, n_max}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Pmf {
    weights: Vec<f64>,
}

impl Pmf {
    /// Validates `weights` with the default mass tolerance.
    pub fn new(weights: Vec<f64>, normalize: bool) -> Result<Self, PmfError> {
        Self::with_tolerance(weights, normalize, DEFAULT_TOL_MASS)
    }

    /// Validates `weights`. Entries in `(-1e-15, 0)` are clamped to zero;
    /// a single-element input is padded to `n_max = 1`.
    pub fn with_tolerance(
        mut weights: Vec<f64>,
        normalize: bool,
        tol_mass: f64,
    ) -> Result<Self, PmfError> {
        if weights.is_empty() {
            return Err(PmfError::TooShort(0));
        }
        if weights.len() == 1 {
            weights.push(0.0);
        }
        for (index, w) in weights.iter_mut().enumerate() {
            if !w.is_finite() {
                return Err(PmfError::NonFinite(index));
            }
            if *w < -CLAMP_EPS {
                return Err(PmfError::NegativeWeight { index, value: *w });
            }
            if w.abs() < CLAMP_EPS {
                *w = 0.0;
            }
        }
        let mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            return Err(PmfError::ZeroMass);
        }
        if normalize {
            weights.iter_mut().for_each(|w| *w /= mass);
        } else if (mass - 1.0).abs() > tol_mass {
            return Err(PmfError::NotNormalized { mass, tol: tol_mass });
        }
        Ok(Self { weights })
    }

    /// Point mass at `n`, truncated at `n_max` (which must be ≥ n and ≥ 1).
    pub fn delta(n: usize, n_max: usize) -> Self {
        let n_max = n_max.max(n).max(1);
        let mut weights = vec![0.0; n_max + 1];
        weights[n] = 1.0;
        Self { weights }
    }

    /// Two-point law: `mass` at index `n`, the remainder at 0.
    pub fn split(n: usize, mass: f64, n_max: usize) -> Result<Self, PmfError> {
        if !(0.0..=1.0).contains(&mass) {
            return Err(PmfError::Parse(format!("split mass {mass} outside [0, 1]")));
        }
        let n_max = n_max.max(n).max(1);
        let mut weights = vec![0.0; n_max + 1];
        weights[0] += 1.0 - mass;
        weights[n] += mass;
        Self::new(weights, false)
    }

    pub fn n_max(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    /// `p_n`, zero beyond the truncation.
    pub fn get(&self, n: usize) -> f64 {
        self.weights.get(n).copied().unwrap_or(0.0)
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    /// Raw moment `Σ n^k p_n`, summed in increasing `n`.
    pub fn moment(&self, k: u32) -> f64 {
        if k == 0 {
            return self.mass();
        }
        self.weights
            .iter()
            .enumerate()
            .map(|(n, &w)| (n as f64).powi(k as i32) * w)
            .sum()
    }

    /// Active particles per site, `Σ_{n≥2} n p_n`.
    pub fn active_particles(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .skip(2)
            .map(|(n, &w)| n as f64 * w)
            .sum()
    }

    /// Copy truncated or zero-padded to a new `n_max`. Mass above the new
    /// truncation is dropped, so the result may need renormalizing.
    pub fn resized_weights(&self, n_max: usize) -> Vec<f64> {
        let mut w = self.weights.clone();
        w.resize(n_max + 1, 0.0);
        w
    }

    /// Parses `n,p_n` CSV. A header row is optional; indices must be
    /// listed in order starting at 0.
    pub fn read_csv<R: Read>(reader: R, normalize: bool) -> Result<Self, PmfError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut weights = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| PmfError::Parse(e.to_string()))?;
            if record.len() != 2 {
                return Err(PmfError::Parse(format!("line {}: expected 2 fields", line + 1)));
            }
            let (Ok(n), Ok(p)) = (record[0].parse::<usize>(), record[1].parse::<f64>()) else {
                if line == 0 {
                    continue;
                }
                return Err(PmfError::Parse(format!("line {}: bad number", line + 1)));
            };
            if n != weights.len() {
                return Err(PmfError::Parse(format!(
                    "line {}: expected index {}, got {n}",
                    line + 1,
                    weights.len()
                )));
            }
            weights.push(p);
        }
        Self::new(weights, normalize)
    }

    /// Writes `n,p_n` CSV with a header. Floats use Rust's shortest
    /// round-trip representation.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["n", "p_n"])?;
        for (n, w) in self.weights.iter().enumerate() {
            wtr.write_record([n.to_string(), w.to_string()])?;
        }
        wtr.flush()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("pmf serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PmfError> {
        let weights: Vec<f64> =
            serde_json::from_str(s).map_err(|e| PmfError::Parse(e.to_string()))?;
        Self::new(weights, false)
    }
}

impl<'de> Deserialize<'de> for Pmf {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let weights = Vec::<f64>::deserialize(deserializer)?;
        Pmf::new(weights, false).map_err(serde::de::Error::custom)
    }
}

/// `Σ |p_n − q_n|`-style helpers operate on aligned slices; this pads the
/// shorter one implicitly.
pub(crate) fn zip_padded<'a>(p: &'a [f64], q: &'a [f64]) -> impl Iterator<Item = (f64, f64)> + 'a {
    let len = p.len().max(q.len());
    (0..len).map(move |n| {
        (
            p.get(n).copied().unwrap_or(0.0),
            q.get(n).copied().unwrap_or(0.0),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bernoulli_weights_accepted() {
        let p = Pmf::new(vec![0.2, 0.8], false).unwrap();
        assert_eq!(p.get(0), 0.2);
        assert_eq!(p.get(1), 0.8);
        assert_eq!(p.n_max(), 1);
        assert!((p.moment(1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn single_point_normalizes() {
        let p = Pmf::new(vec![2.0], true).unwrap();
        assert_eq!(p.get(0), 1.0);
        assert_eq!(p.mass(), 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Pmf::new(vec![0.5, -0.1], false),
            Err(PmfError::NegativeWeight { index: 1, .. })
        ));
        assert_eq!(Pmf::new(vec![0.0, 0.0], true), Err(PmfError::ZeroMass));
        assert!(matches!(
            Pmf::new(vec![0.5, 0.4], false),
            Err(PmfError::NotNormalized { .. })
        ));
        assert!(Pmf::new(vec![f64::NAN, 1.0], false).is_err());
    }

    #[test]
    fn tiny_negatives_clamp() {
        let p = Pmf::new(vec![1.0, -1e-16, 0.0], false).unwrap();
        assert_eq!(p.get(1), 0.0);
    }

    #[test]
    fn moments_of_deltas() {
        let d0 = Pmf::delta(0, 5);
        for k in 1..5 {
            assert_eq!(d0.moment(k), 0.0);
        }
        let d2 = Pmf::delta(2, 5);
        assert_eq!(d2.moment(2), 4.0);
        assert_eq!(d2.moment(0), 1.0);
        assert_eq!(d2.active_particles(), 2.0);
        assert_eq!(Pmf::new(vec![0.2, 0.8], false).unwrap().active_particles(), 0.0);
    }

    #[test]
    fn split_has_requested_mean() {
        let p = Pmf::split(100, 0.008, 100).unwrap();
        assert!((p.mean() - 0.8).abs() < 1e-14);
        assert!((p.get(0) - 0.992).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let p = Pmf::new(vec![0.1, 0.2, 0.3, 0.4], true).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let back = Pmf::read_csv(buf.as_slice(), false).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn csv_rejects_gaps() {
        let text = "n,p_n\n0,0.5\n2,0.5\n";
        assert!(matches!(Pmf::read_csv(text.as_bytes(), false), Err(PmfError::Parse(_))));
    }

    fn weights_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..10.0, 2..40)
            .prop_filter("positive mass", |w| w.iter().sum::<f64>() > 1e-3)
    }

    proptest! {
        #[test]
        fn active_particles_identity(w in weights_strategy()) {
            let p = Pmf::new(w, true).unwrap();
            let lhs = p.active_particles();
            let rhs = p.moment(1) - p.get(1);
            prop_assert!((lhs - rhs).abs() <= 1e-14 * p.moment(1).max(1.0));
        }

        #[test]
        fn normalize_is_idempotent(w in weights_strategy()) {
            let p = Pmf::new(w, true).unwrap();
            let q = Pmf::new(p.weights().to_vec(), true).unwrap();
            for (a, b) in p.weights().iter().zip(q.weights()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn json_round_trip(w in weights_strategy()) {
            let p = Pmf::new(w, true).unwrap();
            let back = Pmf::from_json(&p.to_json()).unwrap();
            prop_assert_eq!(p, back);
        }

        #[test]
        fn two_point_moments_are_p1(p1 in 0.0f64..1.0, k in 1u32..6) {
            let p = Pmf::new(vec![1.0 - p1, p1], false).unwrap();
            prop_assert!((p.moment(k) - p1).abs() < 1e-15);
        }
    }
}
