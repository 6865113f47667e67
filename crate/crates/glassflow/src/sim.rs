//! Continuous-time spin-flip dynamics over quenched couplings.
//!
//! Each site (replica `i`, spin `j`) owns an independent randomness stream
//! that supplies, in order: its initial spin, then alternating proposal gaps
//! (exponential at the declared sup rate `c1`) and acceptance draws. A
//! proposal at a site flips it with probability `c(sigma, G) / c1`, which by
//! thinning realizes jump rate `c(sigma, G)` exactly. Merging the per-site
//! proposal clocks through a time-ordered heap reproduces the global
//! uniformized chain: the superposition of the site clocks is the global
//! proposal clock, and the site picked is the one whose clock rang.
//!
//! Because every site's randomness is addressed by its own label, relabeling
//! sites together with their couplings permutes trajectories bit-exactly;
//! `SimOptions::labels` exposes the addressing for that check.
//!
//! Fields are maintained incrementally under flips (rank-one updates) and
//! resynced from the coupling matrix every `resync_interval` proposals; the
//! worst drift repaired is reported on the trajectory.

use crate::couplings::{sample_couplings, CouplingError, CouplingMatrix};
use crate::model::{validate_params, EmpiricalMeasure, ModelParams, ParamError};
use crate::moments::overlap_lambda_min;
use crate::rate::RateFunction;
use crate::rng::{exp_f64, stream, uniform_f64};
use rand_chacha::ChaCha12Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error("rate {observed} above declared sup {declared} at time {time}")]
    RateAboveBound {
        observed: f64,
        declared: f64,
        time: f64,
    },
    #[error("snapshot times must be finite, sorted, within [0, horizon]")]
    BadSnapshotTimes,
    #[error("initial spins must have length n*m with entries +-1")]
    BadInitialSpins,
    #[error("stream labels must have length n*m")]
    BadLabels,
}

/// One scheduled proposal; the heap pops the earliest, ties broken by site.
#[derive(PartialEq)]
struct Event {
    time: f64,
    site: usize,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so that BinaryHeap (a max-heap) pops the earliest time.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.site.cmp(&self.site))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    pub measure: EmpiricalMeasure,
    pub lambda_min: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    /// Time of the snapshot whose overlap spectrum triggered the stop, if any.
    pub stopped_at: Option<f64>,
    pub proposals: u64,
    pub flips: u64,
    pub flips_per_replica: Vec<u64>,
    /// Largest field discrepancy repaired by a resync (0 if none ran).
    pub max_field_drift: f64,
    pub final_time: f64,
    pub final_sigma: Vec<i8>,
    pub final_fields: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions<'a> {
    /// Per-site stream labels, length n*m, site (i, j) at index `i * n + j`.
    /// Defaults to the site index itself.
    pub labels: Option<&'a [u64]>,
    /// Fixed initial spins instead of the per-site stream draw.
    pub initial_spins: Option<&'a [i8]>,
    /// Proposals between full field recomputations; 0 keeps the default.
    pub resync_interval: u64,
}

const DEFAULT_RESYNC: u64 = 1_000_000;
const RATE_BOUND_SLACK: f64 = 1e-9;

/// A running dynamics instance; exposes stepping so callers can interleave
/// observation with evolution.
pub struct Simulation<'a> {
    pub n: usize,
    pub m: usize,
    pub time: f64,
    pub sigma: Vec<i8>,
    pub fields: Vec<f64>,
    couplings: &'a CouplingMatrix,
    rate: &'a dyn RateFunction,
    sup_rate: f64,
    streams: Vec<ChaCha12Rng>,
    heap: BinaryHeap<Event>,
    proposals: u64,
    flips: u64,
    flips_per_replica: Vec<u64>,
    resync_interval: u64,
    since_resync: u64,
    max_field_drift: f64,
}

impl<'a> Simulation<'a> {
    pub fn new(
        params: &ModelParams,
        couplings: &'a CouplingMatrix,
        rate: &'a dyn RateFunction,
        opts: SimOptions,
    ) -> Result<Self, SimError> {
        validate_params(params)?;
        assert_eq!(couplings.n(), params.n, "coupling matrix size mismatch");
        let sites = params.sites();
        if let Some(labels) = opts.labels {
            if labels.len() != sites {
                return Err(SimError::BadLabels);
            }
        }
        if let Some(init) = opts.initial_spins {
            if init.len() != sites || init.iter().any(|&s| s != 1 && s != -1) {
                return Err(SimError::BadInitialSpins);
            }
        }
        let sup_rate = rate.sup_rate();
        let mut streams = Vec::with_capacity(sites);
        let mut sigma = vec![0i8; sites];
        let mut heap = BinaryHeap::with_capacity(sites);
        for site in 0..sites {
            let label = opts.labels.map_or(site as u64, |l| l[site]);
            let mut rng = stream(params.seed, "sim-spin", label);
            // First word of every site stream decides its initial spin, so a
            // site's whole history is a function of its label alone.
            let drawn = if uniform_f64(&mut rng) < 0.5 { 1 } else { -1 };
            sigma[site] = opts.initial_spins.map_or(drawn, |init| init[site]);
            let gap = exp_f64(&mut rng, sup_rate);
            heap.push(Event { time: gap, site });
            streams.push(rng);
        }
        let fields = couplings.field(&sigma, params.m);
        Ok(Self {
            n: params.n,
            m: params.m,
            time: 0.0,
            sigma,
            fields,
            couplings,
            rate,
            sup_rate,
            streams,
            heap,
            proposals: 0,
            flips: 0,
            flips_per_replica: vec![0; params.m],
            resync_interval: if opts.resync_interval == 0 {
                DEFAULT_RESYNC
            } else {
                opts.resync_interval
            },
            since_resync: 0,
            max_field_drift: 0.0,
        })
    }

    /// Process every proposal with time <= t, then set the clock to t.
    pub fn advance_to(&mut self, t: f64) -> Result<(), SimError> {
        assert!(t >= self.time, "time must not run backwards");
        while let Some(ev) = self.heap.peek() {
            if ev.time > t {
                break;
            }
            let Event { time, site } = self.heap.pop().unwrap();
            self.proposals += 1;
            let spin = self.sigma[site];
            let c = self.rate.rate(spin, self.fields[site]);
            if c > self.sup_rate * (1.0 + RATE_BOUND_SLACK) {
                return Err(SimError::RateAboveBound {
                    observed: c,
                    declared: self.sup_rate,
                    time,
                });
            }
            let accept = uniform_f64(&mut self.streams[site]);
            if accept * self.sup_rate < c {
                let i = site / self.n;
                let j = site % self.n;
                self.sigma[site] = -spin;
                self.couplings
                    .field_flip_update(&mut self.fields, i, j, spin);
                self.flips += 1;
                self.flips_per_replica[i] += 1;
            }
            let gap = exp_f64(&mut self.streams[site], self.sup_rate);
            self.heap.push(Event {
                time: time + gap,
                site,
            });
            self.since_resync += 1;
            if self.since_resync >= self.resync_interval {
                self.resync_fields();
            }
        }
        self.time = t;
        Ok(())
    }

    fn resync_fields(&mut self) {
        let fresh = self.couplings.field(&self.sigma, self.m);
        let drift = self
            .fields
            .iter()
            .zip(&fresh)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.max_field_drift = self.max_field_drift.max(drift);
        self.fields = fresh;
        self.since_resync = 0;
    }

    pub fn measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::from_state(&self.sigma, &self.fields, self.n, self.m)
    }

    pub fn proposals(&self) -> u64 {
        self.proposals
    }

    pub fn flips(&self) -> u64 {
        self.flips
    }
}

/// Run the dynamics to the horizon, observing at `snapshot_times` (sorted,
/// within [0, horizon]). If a snapshot's smallest overlap eigenvalue falls
/// below `c_floor`, the run stops there: that snapshot is kept, later ones
/// are skipped, and `stopped_at` records the time.
pub fn run_dynamics(
    params: &ModelParams,
    couplings: &CouplingMatrix,
    rate: &dyn RateFunction,
    snapshot_times: &[f64],
    opts: SimOptions,
) -> Result<Trajectory, SimError> {
    if snapshot_times
        .windows(2)
        .any(|w| !(w[0] <= w[1]))
        || snapshot_times
            .iter()
            .any(|&t| !t.is_finite() || t < 0.0 || t > params.t_horizon)
    {
        return Err(SimError::BadSnapshotTimes);
    }
    let mut sim = Simulation::new(params, couplings, rate, opts)?;
    let mut snapshots = Vec::with_capacity(snapshot_times.len());
    let mut stopped_at = None;
    for &t in snapshot_times {
        sim.advance_to(t)?;
        let measure = sim.measure();
        let lambda_min = overlap_lambda_min(&measure);
        snapshots.push(Snapshot {
            time: t,
            measure,
            lambda_min,
        });
        if lambda_min < params.c_floor {
            stopped_at = Some(t);
            break;
        }
    }
    if stopped_at.is_none() {
        sim.advance_to(params.t_horizon)?;
    }
    // One final reconciliation so the reported drift covers the whole run.
    sim.resync_fields();
    Ok(Trajectory {
        snapshots,
        stopped_at,
        proposals: sim.proposals,
        flips: sim.flips,
        flips_per_replica: sim.flips_per_replica.clone(),
        max_field_drift: sim.max_field_drift,
        final_time: stopped_at.unwrap_or(params.t_horizon),
        final_sigma: sim.sigma.clone(),
        final_fields: sim.fields.clone(),
    })
}

/// Sample couplings from the seed and run; the common entry point.
pub fn simulate(
    params: &ModelParams,
    rate: &dyn RateFunction,
    snapshot_times: &[f64],
) -> Result<(Trajectory, CouplingMatrix), SimError> {
    validate_params(params)?;
    let couplings = sample_couplings(params.n, params.s, params.seed)?;
    let traj = run_dynamics(params, &couplings, rate, snapshot_times, SimOptions::default())?;
    Ok((traj, couplings))
}
