//! Exact (Gillespie) simulation of the dispersion process on the complete
//! graph with `N` sites and `M` particles.
//!
//! A site holding `X ≥ 2` particles emits one at rate `X`; lone particles
//! never move. The particle lands on one of the other `N − 1` sites chosen
//! uniformly. Rates are integers, so the source is drawn from an integer
//! variate `u ∈ [0, active_total)` and located either by a linear scan or
//! by a Fenwick tree; both return the same site for the same `u`.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::pmf::Pmf;

/// Above this many sites the source lookup uses a Fenwick tree.
pub const LINEAR_SCAN_MAX_SITES: usize = 10_000;
const COHERENCE_CHECK_EVERY: u64 = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbmError {
    #[error("invalid placement: {0}")]
    InvalidPlacement(String),
    #[error("sample times must be increasing and not exceed t_end")]
    InvalidSampleTimes,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    AllAtOne,
    Even,
    FromCounts(Vec<u32>),
}

impl FromStr for Placement {
    type Err = AbmError;

    /// `all-at-one`, `even`, or `counts:3,0,1,...`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "all-at-one" | "AllAtOne" | "one" => Ok(Placement::AllAtOne),
            "even" | "Even" => Ok(Placement::Even),
            other => {
                let counts = other
                    .strip_prefix("counts:")
                    .ok_or_else(|| AbmError::InvalidPlacement(format!("unknown placement `{other}`")))?;
                counts
                    .split(',')
                    .map(|c| c.trim().parse::<u32>())
                    .collect::<Result<Vec<_>, _>>()
                    .map(Placement::FromCounts)
                    .map_err(|e| AbmError::InvalidPlacement(e.to_string()))
            }
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::AllAtOne => write!(f, "all-at-one"),
            Placement::Even => write!(f, "even"),
            Placement::FromCounts(c) => {
                let parts: Vec<String> = c.iter().map(u32::to_string).collect();
                write!(f, "counts:{}", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    LinearScan,
    Fenwick,
}

#[inline]
fn site_rate(x: u32) -> u64 {
    if x >= 2 {
        x as u64
    } else {
        0
    }
}

/// Binary indexed tree of per-site active rates.
#[derive(Debug, Clone, PartialEq)]
struct Fenwick {
    tree: Vec<u64>,
    top_bit: usize,
}

impl Fenwick {
    fn from_rates(rates: impl Iterator<Item = u64>, n: usize) -> Self {
        let mut tree = vec![0u64; n + 1];
        for (i, r) in rates.enumerate() {
            tree[i + 1] += r;
            let parent = (i + 1) + ((i + 1) & (i + 1).wrapping_neg());
            if parent <= n {
                tree[parent] += tree[i + 1];
            }
        }
        let top_bit = if n == 0 { 0 } else { 1 << (usize::BITS - 1 - n.leading_zeros()) };
        Self { tree, top_bit }
    }

    fn add(&mut self, index: usize, delta: i64) {
        let mut k = index + 1;
        while k < self.tree.len() {
            self.tree[k] = self.tree[k].wrapping_add(delta as u64);
            k += k & k.wrapping_neg();
        }
    }

    /// Smallest site `i` whose inclusive prefix sum exceeds `u`.
    fn find(&self, mut u: u64) -> usize {
        let mut pos = 0;
        let mut step = self.top_bit;
        while step > 0 {
            let next = pos + step;
            if next < self.tree.len() && self.tree[next] <= u {
                pos = next;
                u -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteState {
    occupancy: Vec<u32>,
    n_particles: u64,
    active_total: u64,
    time: f64,
    fenwick: Option<Fenwick>,
    events: u64,
}

impl SiteState {
    pub fn occupancy(&self) -> &[u32] {
        &self.occupancy
    }

    pub fn n_sites(&self) -> usize {
        self.occupancy.len()
    }

    pub fn n_particles(&self) -> u64 {
        self.n_particles
    }

    /// Cached `Σ X_i 1{X_i ≥ 2}`.
    pub fn active_total(&self) -> u64 {
        self.active_total
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn is_terminated(&self) -> bool {
        self.active_total == 0
    }

    pub fn max_occupancy(&self) -> u32 {
        self.occupancy.iter().copied().max().unwrap_or(0)
    }

    pub fn sampler(&self) -> SamplerKind {
        if self.fenwick.is_some() {
            SamplerKind::Fenwick
        } else {
            SamplerKind::LinearScan
        }
    }

    /// Switches the source lookup structure; the draws are unchanged.
    pub fn with_sampler(mut self, kind: SamplerKind) -> Self {
        self.fenwick = match kind {
            SamplerKind::LinearScan => None,
            SamplerKind::Fenwick => Some(Fenwick::from_rates(
                self.occupancy.iter().map(|&x| site_rate(x)),
                self.occupancy.len(),
            )),
        };
        self
    }

    pub fn recomputed_active_total(&self) -> u64 {
        self.occupancy.iter().map(|&x| site_rate(x)).sum()
    }

    fn locate(&self, u: u64) -> usize {
        if let Some(tree) = &self.fenwick {
            return tree.find(u);
        }
        let mut acc = 0u64;
        for (i, &x) in self.occupancy.iter().enumerate() {
            acc += site_rate(x);
            if acc > u {
                return i;
            }
        }
        unreachable!("u below active_total always lands on a site")
    }

    fn set_occupancy(&mut self, i: usize, x: u32) {
        let old = site_rate(self.occupancy[i]);
        let new = site_rate(x);
        self.occupancy[i] = x;
        self.active_total = self.active_total - old + new;
        if let Some(tree) = &mut self.fenwick {
            if old != new {
                tree.add(i, new as i64 - old as i64);
            }
        }
    }
}

pub fn init_state(n_sites: usize, n_particles: u64, placement: &Placement) -> Result<SiteState, AbmError> {
    if n_sites < 2 {
        return Err(AbmError::InvalidPlacement("need at least two sites".into()));
    }
    let occupancy = match placement {
        Placement::AllAtOne => {
            let m = u32::try_from(n_particles)
                .map_err(|_| AbmError::InvalidPlacement("too many particles for one site".into()))?;
            let mut occ = vec![0; n_sites];
            occ[0] = m;
            occ
        }
        Placement::Even => {
            if !n_particles.is_multiple_of(n_sites as u64) {
                return Err(AbmError::InvalidPlacement(format!(
                    "{n_particles} particles do not divide evenly over {n_sites} sites"
                )));
            }
            vec![(n_particles / n_sites as u64) as u32; n_sites]
        }
        Placement::FromCounts(counts) => {
            if counts.len() != n_sites {
                return Err(AbmError::InvalidPlacement(format!(
                    "{} counts given for {n_sites} sites",
                    counts.len()
                )));
            }
            let total: u64 = counts.iter().map(|&c| c as u64).sum();
            if total != n_particles {
                return Err(AbmError::InvalidPlacement(format!(
                    "counts hold {total} particles, expected {n_particles}"
                )));
            }
            counts.clone()
        }
    };
    let mut state = SiteState {
        occupancy,
        n_particles,
        active_total: 0,
        time: 0.0,
        fenwick: None,
        events: 0,
    };
    state.active_total = state.recomputed_active_total();
    let kind = if n_sites > LINEAR_SCAN_MAX_SITES { SamplerKind::Fenwick } else { SamplerKind::LinearScan };
    Ok(state.with_sampler(kind))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub source: usize,
    pub destination: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    Event(Event),
    Terminated,
}

/// `Exp(rate)` by inverse transform of a uniform on `(0, 1]`.
fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = 1.0 - rng.random::<f64>();
    -u.ln() / rate
}

pub fn gillespie_step<R: Rng + ?Sized>(state: &mut SiteState, rng: &mut R) -> Step {
    if state.active_total == 0 {
        return Step::Terminated;
    }
    let t = state.time + exponential(rng, state.active_total as f64);
    Step::Event(jump(state, t, rng))
}

/// Moves one particle at time `t`; the holding time has already been drawn.
fn jump<R: Rng + ?Sized>(state: &mut SiteState, t: f64, rng: &mut R) -> Event {
    state.time = t;
    let source = state.locate(rng.random_range(0..state.active_total));
    let n = state.occupancy.len();
    let destination = loop {
        let j = rng.random_range(0..n);
        if j != source {
            break j;
        }
    };
    state.set_occupancy(source, state.occupancy[source] - 1);
    state.set_occupancy(destination, state.occupancy[destination] + 1);
    state.events += 1;
    if cfg!(debug_assertions) && state.events.is_multiple_of(COHERENCE_CHECK_EVERY) {
        debug_assert_eq!(state.active_total, state.recomputed_active_total());
    }
    Event { time: t, source, destination }
}

/// Site-occupancy histogram, with occupancies above `n_max` folded into
/// the last bucket.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub overflow: bool,
}

impl Histogram {
    pub fn of(state: &SiteState, n_max: usize) -> Self {
        let mut counts = vec![0u64; n_max + 1];
        let mut overflow = false;
        for &x in &state.occupancy {
            let k = x as usize;
            if k > n_max {
                overflow = true;
                counts[n_max] += 1;
            } else {
                counts[k] += 1;
            }
        }
        Self { counts, overflow }
    }

    pub fn to_pmf(&self) -> Pmf {
        let total: u64 = self.counts.iter().sum();
        let weights = self.counts.iter().map(|&c| c as f64 / total as f64).collect();
        Pmf::new(weights, true).expect("histogram of a nonempty state is a valid law")
    }
}

/// `pmf_n = #{i : X_i = n}/N`; warns when some site exceeds `n_max`.
pub fn empirical_pmf(state: &SiteState, n_max: usize) -> Pmf {
    let hist = Histogram::of(state, n_max);
    if hist.overflow {
        warn!("occupancy {} exceeds n_max {n_max}; folded into the last bucket", state.max_occupancy());
    }
    hist.to_pmf()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub time: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub samples: Vec<Sample>,
    /// Time of the last event when the process absorbed before `t_end`.
    pub termination_time: Option<f64>,
    pub events: u64,
}

fn check_sample_times(t_end: f64, sample_times: &[f64]) -> Result<(), AbmError> {
    let increasing = sample_times.windows(2).all(|w| w[0] < w[1]);
    let in_range = sample_times.iter().all(|&t| t >= 0.0 && t <= t_end);
    if increasing && in_range {
        Ok(())
    } else {
        Err(AbmError::InvalidSampleTimes)
    }
}

/// Runs the event loop up to `t_end`, recording the histogram in force at
/// each sample time. After absorption the frozen state fills the rest.
pub fn run<R: Rng + ?Sized>(
    state: &mut SiteState,
    t_end: f64,
    sample_times: &[f64],
    n_max: usize,
    rng: &mut R,
) -> Result<RunOutput, AbmError> {
    check_sample_times(t_end, sample_times)?;
    let start_events = state.events;
    let mut samples = Vec::with_capacity(sample_times.len());
    let mut pending = sample_times.iter().copied().peekable();
    let mut termination_time = None;
    loop {
        // the same draw order as gillespie_step
        let t_next = if state.active_total == 0 {
            termination_time = Some(state.time);
            f64::INFINITY
        } else {
            state.time + exponential(rng, state.active_total as f64)
        };
        while let Some(t) = pending.next_if(|&t| t < t_next) {
            samples.push(Sample { time: t, histogram: Histogram::of(state, n_max) });
        }
        if t_next > t_end {
            break;
        }
        jump(state, t_next, rng);
    }
    if samples.iter().any(|s| s.histogram.overflow) {
        warn!("some sites exceeded n_max {n_max}; counts folded into the last bucket");
    }
    Ok(RunOutput { samples, termination_time, events: state.events - start_events })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSpec {
    pub n_sites: usize,
    pub n_particles: u64,
    pub placement: String,
    pub t_end: f64,
    pub sample_times: Vec<f64>,
    pub n_max: usize,
    pub base_seed: u64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub output: RunOutput,
    pub final_max_occupancy: u32,
}

/// Replicate `r` uses `ChaCha8Rng::seed_from_u64(base_seed + r)`.
pub fn replicate_rng(base_seed: u64, r: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(r as u64))
}

pub fn run_replicate(spec: &EnsembleSpec, placement: &Placement, r: usize) -> Result<ReplicateResult, AbmError> {
    let mut state = init_state(spec.n_sites, spec.n_particles, placement)?;
    let seed = spec.base_seed.wrapping_add(r as u64);
    let mut rng = replicate_rng(spec.base_seed, r);
    let output = run(&mut state, spec.t_end, &spec.sample_times, spec.n_max, &mut rng)?;
    Ok(ReplicateResult { replicate: r, seed, output, final_max_occupancy: state.max_occupancy() })
}

/// Runs all replicates on `jobs` threads (0 = rayon default). Results are
/// ordered by replicate index whatever the thread count.
pub fn run_ensemble(spec: &EnsembleSpec, jobs: usize) -> Result<Vec<ReplicateResult>, AbmError> {
    let placement: Placement = spec.placement.parse()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| AbmError::ThreadPool(e.to_string()))?;
    pool.install(|| {
        (0..spec.replicates)
            .into_par_iter()
            .map(|r| run_replicate(spec, &placement, r))
            .collect()
    })
}
