//! The self-consistent flow that the dynamics approaches for large systems:
//! a particle discretization for any replica count, and a two-component
//! finite-volume density solver for the single-replica case.
//!
//! Both evolve a law on `(sigma, x)` whose coefficients are moments of the
//! law itself: drift `A_x x + A_sig sigma` and diagonal diffusion
//! `2 sqrt(L_jj)` from the moment matrices, plus spin flips at rate
//! `c(sigma^j, x^j)` per replica coordinate.
//!
//! Particle randomness is addressed per particle: flips from one stream,
//! Gaussian increments from another, so trajectories are reproducible and
//! refinement studies can share noise across step sizes.

use crate::model::{Atom, EmpiricalMeasure};
use crate::moments::{compute_moments_flat, diffusion, drift_matrices, MomentError};
use crate::rate::RateFunction;
use crate::rng::{exp_f64, stream, uniform_f64, NormalSource};
use crate::transport::ground_cost;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("step {dt} above stability guard {max}")]
    StepTooLarge { dt: f64, max: f64 },
    #[error("{got} particles below the minimum {min}")]
    TooFewParticles { got: usize, min: usize },
    #[error("snapshot times must be finite, sorted, nonnegative")]
    BadTimes,
    #[error("grid needs x_min < x_max, at least 4 cells, finite bounds")]
    BadGrid,
    #[error("density mass drifted by {0} in one step")]
    MassDrift(f64),
    #[error("density went negative ({value}) in cell {cell}")]
    NegativeDensity { value: f64, cell: usize },
    #[error("step cap {0} must be positive and finite")]
    BadCap(f64),
    #[error("operation requires single-replica atoms")]
    NotSingleReplica,
    #[error(transparent)]
    Moment(#[from] MomentError),
}

/// Fraction of the sup-rate timescale allowed per Euler step.
const STEP_GUARD: f64 = 0.01;
pub const MIN_PARTICLES: usize = 100;

/// Particle discretization of the flow. Layout `p * m + i` for particle `p`,
/// replica coordinate `i`.
pub struct ParticleEnsemble {
    pub m: usize,
    pub count: usize,
    pub sigma: Vec<i8>,
    pub x: Vec<f64>,
    flip_rngs: Vec<ChaCha12Rng>,
    noise: Vec<NormalSource<ChaCha12Rng>>,
}

impl ParticleEnsemble {
    /// Draw `count` particles from the atoms of `initial` (with replacement
    /// unless counts match exactly, in which case atoms are copied once).
    pub fn from_measure(initial: &EmpiricalMeasure, count: usize, seed: u64) -> Self {
        let m = initial.m;
        let mut sigma = Vec::with_capacity(count * m);
        let mut x = Vec::with_capacity(count * m);
        let mut pick_rng = stream(seed, "flow-init", 0);
        for p in 0..count {
            let idx = if count == initial.len() {
                p
            } else {
                (uniform_f64(&mut pick_rng) * initial.len() as f64) as usize
                    % initial.len()
            };
            sigma.extend_from_slice(&initial.atoms[idx].sigma);
            x.extend_from_slice(&initial.atoms[idx].x);
        }
        let flip_rngs = (0..count)
            .map(|p| stream(seed, "flow-flip", p as u64))
            .collect();
        let noise = (0..count)
            .map(|p| NormalSource::new(stream(seed, "flow-noise", p as u64)))
            .collect();
        Self {
            m,
            count,
            sigma,
            x,
            flip_rngs,
            noise,
        }
    }

    pub fn measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::new(
            self.m,
            (0..self.count)
                .map(|p| {
                    Atom::new(
                        self.sigma[p * self.m..(p + 1) * self.m].to_vec(),
                        self.x[p * self.m..(p + 1) * self.m].to_vec(),
                    )
                })
                .collect(),
        )
    }

    /// One Euler step: flips are Bernoulli `1 - exp(-dt c)` and the field
    /// update uses the pre-step state throughout.
    pub fn step(
        &mut self,
        rate: &dyn RateFunction,
        s: f64,
        c_floor: f64,
        dt: f64,
    ) -> Result<(), FlowError> {
        let m = self.m;
        let ms = compute_moments_flat(&self.sigma, &self.x, self.count, m, rate, c_floor)?;
        let (a_x, a_sig) = drift_matrices(&ms, s);
        let d = diffusion(&ms)?;
        let sqrt_dt = dt.sqrt();
        let mut new_sigma = vec![0i8; m];
        let mut new_x = vec![0.0; m];
        for p in 0..self.count {
            let base = p * m;
            for i in 0..m {
                let spin = self.sigma[base + i];
                let c = rate.rate(spin, self.x[base + i]);
                let flip_prob = -(-dt * c).exp_m1();
                let u = uniform_f64(&mut self.flip_rngs[p]);
                new_sigma[i] = if u < flip_prob { -spin } else { spin };
            }
            for i in 0..m {
                let mut drift = 0.0;
                for k in 0..m {
                    drift += a_x[i * m + k] * self.x[base + k]
                        + a_sig[i * m + k] * f64::from(self.sigma[base + k]);
                }
                new_x[i] = self.x[base + i] + dt * drift + sqrt_dt * d[i] * self.noise[p].draw();
            }
            self.sigma[base..base + m].copy_from_slice(&new_sigma[..m]);
            self.x[base..base + m].copy_from_slice(&new_x[..m]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FlowSnapshot {
    pub time: f64,
    pub measure: EmpiricalMeasure,
}

#[derive(Debug, Clone)]
pub struct FlowRun {
    pub snapshots: Vec<FlowSnapshot>,
    pub final_measure: EmpiricalMeasure,
    pub steps: u64,
}

fn validate_times(times: &[f64]) -> Result<(), FlowError> {
    if times.is_empty()
        || times.windows(2).any(|w| !(w[0] <= w[1]))
        || times.iter().any(|&t| !t.is_finite() || t < 0.0)
    {
        return Err(FlowError::BadTimes);
    }
    Ok(())
}

/// Run the particle flow, observing at `times` (the last entry is the
/// horizon). Step sizes divide each interval evenly and never exceed `dt`.
#[allow(clippy::too_many_arguments)]
pub fn flow_particle(
    initial: &EmpiricalMeasure,
    particles: usize,
    rate: &dyn RateFunction,
    s: f64,
    c_floor: f64,
    dt: f64,
    times: &[f64],
    seed: u64,
) -> Result<FlowRun, FlowError> {
    validate_times(times)?;
    if particles < MIN_PARTICLES {
        return Err(FlowError::TooFewParticles {
            got: particles,
            min: MIN_PARTICLES,
        });
    }
    let sup = rate.sup_rate();
    let guard = if sup > 0.0 { STEP_GUARD / sup } else { f64::MAX };
    if dt > guard {
        return Err(FlowError::StepTooLarge { dt, max: guard });
    }
    let mut ens = ParticleEnsemble::from_measure(initial, particles, seed);
    let mut snapshots = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut steps = 0u64;
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let n = (span / dt).ceil().max(1.0) as u64;
            let h = span / n as f64;
            for _ in 0..n {
                ens.step(rate, s, c_floor, h)?;
            }
            steps += n;
        }
        t = target;
        snapshots.push(FlowSnapshot {
            time: target,
            measure: ens.measure(),
        });
    }
    Ok(FlowRun {
        final_measure: ens.measure(),
        snapshots,
        steps,
    })
}

/// Mean terminal particle distance between a run at `dt_coarse` and one at
/// half that step, driven by the same Gaussian increments (fine pairs summed
/// for the coarse path) and the same flip proposals (per-coordinate thinning
/// at the sup rate, which is step-size independent). Shrinks with the step
/// size at the Euler strong order.
#[allow(clippy::too_many_arguments)]
pub fn coupled_refinement_gap(
    initial: &EmpiricalMeasure,
    particles: usize,
    rate: &dyn RateFunction,
    s: f64,
    c_floor: f64,
    dt_coarse: f64,
    t_horizon: f64,
    seed: u64,
) -> Result<f64, FlowError> {
    if particles < MIN_PARTICLES {
        return Err(FlowError::TooFewParticles {
            got: particles,
            min: MIN_PARTICLES,
        });
    }
    let sup = rate.sup_rate();
    let guard = if sup > 0.0 { STEP_GUARD / sup } else { f64::MAX };
    if dt_coarse > guard {
        return Err(FlowError::StepTooLarge {
            dt: dt_coarse,
            max: guard,
        });
    }
    if !(t_horizon > 0.0) || !t_horizon.is_finite() {
        return Err(FlowError::BadTimes);
    }
    let m = initial.m;
    let windows = (t_horizon / dt_coarse).ceil().max(1.0) as u64;
    let h_coarse = t_horizon / windows as f64;
    let h_fine = 0.5 * h_coarse;

    // Two self-contained systems sharing only their randomness.
    let mut coarse = ParticleEnsemble::from_measure(initial, particles, seed);
    let mut fine = ParticleEnsemble::from_measure(initial, particles, seed);
    let coords = particles * m;
    let mut prop_rngs: Vec<ChaCha12Rng> = (0..coords)
        .map(|c| stream(seed, "flow-prop", c as u64))
        .collect();
    let mut noise: Vec<NormalSource<ChaCha12Rng>> = (0..coords)
        .map(|c| NormalSource::new(stream(seed, "flow-refine-noise", c as u64)))
        .collect();
    let mut next_prop: Vec<f64> = prop_rngs
        .iter_mut()
        .map(|r| exp_f64(r, sup))
        .collect();

    // Proposals of one window, ordered by time.
    struct Proposal {
        time: f64,
        coord: usize,
        u: f64,
    }
    let apply_flips = |ens: &mut ParticleEnsemble,
                       props: &[Proposal],
                       rate: &dyn RateFunction,
                       sup: f64| {
        for pr in props {
            let spin = ens.sigma[pr.coord];
            let c = rate.rate(spin, ens.x[pr.coord]);
            if pr.u * sup < c {
                ens.sigma[pr.coord] = -spin;
            }
        }
    };
    let euler_x = |ens: &mut ParticleEnsemble,
                   h: f64,
                   xi: &[f64],
                   rate: &dyn RateFunction|
     -> Result<(), FlowError> {
        let ms = compute_moments_flat(&ens.sigma, &ens.x, ens.count, ens.m, rate, c_floor)?;
        let (a_x, a_sig) = drift_matrices(&ms, s);
        let d = diffusion(&ms)?;
        let sq = h.sqrt();
        let mm = ens.m;
        for p in 0..ens.count {
            let base = p * mm;
            let mut upd = vec![0.0; mm];
            for i in 0..mm {
                let mut drift = 0.0;
                for k in 0..mm {
                    drift += a_x[i * mm + k] * ens.x[base + k]
                        + a_sig[i * mm + k] * f64::from(ens.sigma[base + k]);
                }
                upd[i] = h * drift + sq * d[i] * xi[base + i];
            }
            for i in 0..mm {
                ens.x[base + i] += upd[i];
            }
        }
        Ok(())
    };

    let mut t = 0.0;
    for _ in 0..windows {
        let t_end = t + h_coarse;
        let t_mid = t + h_fine;
        // Collect this window's proposals per coordinate.
        let mut props = Vec::new();
        for coord in 0..coords {
            while next_prop[coord] < t_end {
                let u = uniform_f64(&mut prop_rngs[coord]);
                props.push(Proposal {
                    time: next_prop[coord],
                    coord,
                    u,
                });
                let gap = exp_f64(&mut prop_rngs[coord], sup);
                next_prop[coord] += gap;
            }
        }
        props.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then_with(|| a.coord.cmp(&b.coord))
        });
        let split = props.partition_point(|p| p.time < t_mid);
        // Shared Gaussians: two fine draws per coordinate; their normalized
        // sum drives the coarse step.
        let mut xi_a = vec![0.0; coords];
        let mut xi_b = vec![0.0; coords];
        for coord in 0..coords {
            xi_a[coord] = noise[coord].draw();
            xi_b[coord] = noise[coord].draw();
        }
        let xi_sum: Vec<f64> = xi_a
            .iter()
            .zip(&xi_b)
            .map(|(a, b)| (a + b) / std::f64::consts::SQRT_2)
            .collect();

        apply_flips(&mut fine, &props[..split], rate, sup);
        euler_x(&mut fine, h_fine, &xi_a, rate)?;
        apply_flips(&mut fine, &props[split..], rate, sup);
        euler_x(&mut fine, h_fine, &xi_b, rate)?;

        apply_flips(&mut coarse, &props, rate, sup);
        euler_x(&mut coarse, h_coarse, &xi_sum, rate)?;
        t = t_end;
    }
    let ca = coarse.measure();
    let fa = fine.measure();
    let total: f64 = ca
        .atoms
        .iter()
        .zip(&fa.atoms)
        .map(|(a, b)| ground_cost(a, b))
        .sum();
    Ok(total / particles as f64)
}

/// Two-component density on a uniform cell grid: `plus[i]`, `minus[i]` are
/// densities of the spin-up and spin-down components at cell centers.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub x_min: f64,
    pub x_max: f64,
    pub cells: usize,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl GridDensity {
    pub fn zeros(x_min: f64, x_max: f64, cells: usize) -> Result<Self, FlowError> {
        if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() || cells < 4 {
            return Err(FlowError::BadGrid);
        }
        Ok(Self {
            x_min,
            x_max,
            cells,
            plus: vec![0.0; cells],
            minus: vec![0.0; cells],
        })
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn mass(&self) -> f64 {
        (self.plus.iter().sum::<f64>() + self.minus.iter().sum::<f64>()) * self.dx()
    }

    pub fn mass_plus(&self) -> f64 {
        self.plus.iter().sum::<f64>() * self.dx()
    }

    pub fn mean_x(&self) -> f64 {
        let dx = self.dx();
        (0..self.cells)
            .map(|i| self.center(i) * (self.plus[i] + self.minus[i]) * dx)
            .sum()
    }

    pub fn var_x(&self) -> f64 {
        let mean = self.mean_x();
        let dx = self.dx();
        (0..self.cells)
            .map(|i| {
                let c = self.center(i) - mean;
                c * c * (self.plus[i] + self.minus[i]) * dx
            })
            .sum()
    }

    /// Spin-weighted mean `E[sigma x]`.
    pub fn mean_sigma_x(&self) -> f64 {
        let dx = self.dx();
        (0..self.cells)
            .map(|i| self.center(i) * (self.plus[i] - self.minus[i]) * dx)
            .sum()
    }
}

/// Single-replica flow moments of a grid law: `l = E[c]`,
/// `kappa = E[x sigma c]`, `upsilon = E[sigma x]`.
fn grid_moments(grid: &GridDensity, rate: &dyn RateFunction) -> (f64, f64, f64) {
    let dx = grid.dx();
    let mut l = 0.0;
    let mut kappa = 0.0;
    let mut upsilon = 0.0;
    for i in 0..grid.cells {
        let x = grid.center(i);
        let cp = rate.rate(1, x);
        let cm = rate.rate(-1, x);
        l += (cp * grid.plus[i] + cm * grid.minus[i]) * dx;
        kappa += x * (cp * grid.plus[i] - cm * grid.minus[i]) * dx;
        upsilon += x * (grid.plus[i] - grid.minus[i]) * dx;
    }
    (l, kappa, upsilon)
}

#[derive(Debug, Clone)]
pub struct PdeRun {
    pub snapshots: Vec<(f64, GridDensity)>,
    pub final_grid: GridDensity,
    pub substeps: u64,
    pub max_mass_drift: f64,
    pub total_mass_drift: f64,
    pub clipped: u64,
}

const NEGATIVE_TOL: f64 = -1e-12;
const MASS_DRIFT_ABORT: f64 = 1e-6;

/// Evolve the two-component density: conservative upwind advection under the
/// moment-driven drift, central diffusion `2 l`, pointwise spin exchange,
/// zero-flux boundaries. Steps subdivide to meet diffusion, advection, and
/// exchange stability bounds; mass is conserved by construction and checked.
/// `dt_cap` forces substeps no larger than the given value (refinement
/// studies); the stability bounds still apply on top of it.
pub fn flow_pde_m1(
    initial: &GridDensity,
    rate: &dyn RateFunction,
    s: f64,
    times: &[f64],
    dt_cap: Option<f64>,
) -> Result<PdeRun, FlowError> {
    validate_times(times)?;
    if initial.cells < 4 {
        return Err(FlowError::BadGrid);
    }
    if let Some(cap) = dt_cap {
        if !(cap > 0.0) || !cap.is_finite() {
            return Err(FlowError::BadCap(cap));
        }
    }
    let mut grid = initial.clone();
    let dx = grid.dx();
    let cells = grid.cells;
    let sup = rate.sup_rate();
    let mut snapshots = Vec::with_capacity(times.len());
    let mut substeps = 0u64;
    let mut max_mass_drift = 0.0f64;
    let mut total_mass_drift = 0.0f64;
    let mut clipped = 0u64;
    let mut t = 0.0;
    let mut dplus = vec![0.0; cells];
    let mut dminus = vec![0.0; cells];
    for &target in times {
        while t < target - 1e-12 {
            let (l, kappa, upsilon) = grid_moments(&grid, rate);
            let drift_at = |sig: f64, x: f64| -> f64 {
                -2.0 * l * x - 2.0 * s * kappa * sig + 2.0 * s * l * upsilon * sig
            };
            let vmax = [grid.x_min, grid.x_max]
                .iter()
                .flat_map(|&x| [drift_at(1.0, x).abs(), drift_at(-1.0, x).abs()])
                .fold(0.0f64, f64::max);
            let mut dt = target - t;
            if l > 0.0 {
                dt = dt.min(dx * dx / (8.0 * l));
            }
            if vmax > 0.0 {
                dt = dt.min(dx / (2.0 * vmax));
            }
            if sup > 0.0 {
                dt = dt.min(0.25 / sup);
            }
            if let Some(cap) = dt_cap {
                dt = dt.min(cap);
            }
            // One substep of at most the stable size; coefficients refresh
            // on every pass through the outer loop.
            let h = dt.min(target - t);
            step_components(
                &mut grid, &mut dplus, &mut dminus, rate, drift_at, l, h, dx,
            );
            t += h;
            substeps += 1;
            // Positivity and conservation bookkeeping.
            for (idx, v) in grid
                .plus
                .iter_mut()
                .chain(grid.minus.iter_mut())
                .enumerate()
            {
                if *v < 0.0 {
                    if *v < NEGATIVE_TOL {
                        return Err(FlowError::NegativeDensity {
                            value: *v,
                            cell: idx % cells,
                        });
                    }
                    *v = 0.0;
                    clipped += 1;
                }
            }
            let mass = grid.mass();
            let drift = (mass - 1.0).abs();
            max_mass_drift = max_mass_drift.max(drift);
            total_mass_drift += drift;
            if drift > MASS_DRIFT_ABORT {
                return Err(FlowError::MassDrift(drift));
            }
            let inv = 1.0 / mass;
            grid.plus.iter_mut().for_each(|v| *v *= inv);
            grid.minus.iter_mut().for_each(|v| *v *= inv);
        }
        t = target;
        snapshots.push((target, grid.clone()));
    }
    Ok(PdeRun {
        final_grid: grid,
        snapshots,
        substeps,
        max_mass_drift,
        total_mass_drift,
        clipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_components(
    grid: &mut GridDensity,
    dplus: &mut [f64],
    dminus: &mut [f64],
    rate: &dyn RateFunction,
    drift_at: impl Fn(f64, f64) -> f64,
    l: f64,
    h: f64,
    dx: f64,
) {
    let cells = grid.cells;
    dplus.iter_mut().for_each(|v| *v = 0.0);
    dminus.iter_mut().for_each(|v| *v = 0.0);
    for (sig, dens, delta) in [
        (1.0, &grid.plus, &mut *dplus),
        (-1.0, &grid.minus, &mut *dminus),
    ] {
        // Interior faces; zero flux at both boundaries.
        for f in 1..cells {
            let x_face = grid.x_min + f as f64 * dx;
            let v = drift_at(sig, x_face);
            let adv = if v > 0.0 { v * dens[f - 1] } else { v * dens[f] };
            let diff = -2.0 * l * (dens[f] - dens[f - 1]) / dx;
            let flux = adv + diff;
            delta[f - 1] -= flux / dx;
            delta[f] += flux / dx;
        }
    }
    for i in 0..cells {
        let x = grid.center(i);
        let cp = rate.rate(1, x);
        let cm = rate.rate(-1, x);
        let exchange = cm * grid.minus[i] - cp * grid.plus[i];
        dplus[i] += exchange;
        dminus[i] -= exchange;
    }
    for i in 0..cells {
        grid.plus[i] += h * dplus[i];
        grid.minus[i] += h * dminus[i];
    }
}

/// Kernel-density projection of a single-replica measure onto a grid: one
/// Gaussian bump per atom with a pooled-deviation bandwidth floored at the
/// cell width; each spin component keeps its atom-count mass share.
pub fn measure_to_grid(
    measure: &EmpiricalMeasure,
    x_min: f64,
    x_max: f64,
    cells: usize,
) -> Result<GridDensity, FlowError> {
    if measure.m != 1 {
        return Err(FlowError::NotSingleReplica);
    }
    if measure.atoms.is_empty() {
        return Err(FlowError::BadGrid);
    }
    let mut grid = GridDensity::zeros(x_min, x_max, cells)?;
    let dx = grid.dx();
    let n = measure.len() as f64;
    let mean: f64 = measure.atoms.iter().map(|a| a.x[0]).sum::<f64>() / n;
    let var: f64 = measure
        .atoms
        .iter()
        .map(|a| (a.x[0] - mean).powi(2))
        .sum::<f64>()
        / n;
    let bandwidth = (1.06 * var.sqrt() * n.powf(-0.2)).max(dx);
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    for atom in &measure.atoms {
        let target = if atom.sigma[0] > 0 {
            &mut grid.plus
        } else {
            &mut grid.minus
        };
        for i in 0..cells {
            let z = (x_min + (i as f64 + 0.5) * dx - atom.x[0]) / bandwidth;
            target[i] += norm * (-0.5 * z * z).exp();
        }
    }
    // Normalize to unit total mass with the exact spin split of the atoms.
    let plus_share = measure.atoms.iter().filter(|a| a.sigma[0] > 0).count() as f64 / n;
    for (dens, share) in [(&mut grid.plus, plus_share), (&mut grid.minus, 1.0 - plus_share)] {
        let raw: f64 = dens.iter().sum::<f64>() * dx;
        if raw > 0.0 {
            let scale = share / raw;
            dens.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(grid)
}

/// Inverse-distribution sampling of a grid law back to atoms: spin by the
/// component mass split, position by linear interpolation inside the chosen
/// cell.
pub fn grid_to_measure(grid: &GridDensity, count: usize, seed: u64) -> EmpiricalMeasure {
    let dx = grid.dx();
    let total = grid.mass();
    let plus_mass = grid.mass_plus() / total;
    let mut cum_plus = Vec::with_capacity(grid.cells + 1);
    let mut cum_minus = Vec::with_capacity(grid.cells + 1);
    for (dens, cum) in [(&grid.plus, &mut cum_plus), (&grid.minus, &mut cum_minus)] {
        let mut acc = 0.0;
        cum.push(0.0);
        for &v in dens.iter() {
            acc += v * dx;
            cum.push(acc);
        }
    }
    let mut rng = stream(seed, "gridsample", 0);
    let mut atoms = Vec::with_capacity(count);
    for _ in 0..count {
        let u = uniform_f64(&mut rng);
        let (sign, cum, share) = if u < plus_mass {
            (1i8, &cum_plus, u / plus_mass)
        } else {
            (-1i8, &cum_minus, (u - plus_mass) / (1.0 - plus_mass))
        };
        let sign_total = *cum.last().unwrap();
        let v = share * sign_total;
        let cell = cum.partition_point(|&c| c <= v).clamp(1, grid.cells) - 1;
        let cell_mass = cum[cell + 1] - cum[cell];
        let frac = if cell_mass > 0.0 {
            ((v - cum[cell]) / cell_mass).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let x = grid.x_min + (cell as f64 + frac) * dx;
        atoms.push(Atom::new(vec![sign], vec![x]));
    }
    EmpiricalMeasure::new(1, atoms)
}

/// Deterministic transport cost between two grid laws under an explicit
/// coupling: the spin-class masses of the second law are first equalized to
/// the first's by flipping the excess in place (cost 2 per unit, no
/// position move), then positions are matched quantile-by-quantile within
/// each class. An upper bound on the transport distance; exact within
/// classes, and exact overall when the class masses agree.
pub fn coupled_quantile_distance(a: &GridDensity, b: &GridDensity, n_quad: usize) -> f64 {
    assert!(n_quad > 0, "quadrature needs at least one point");
    let minus_fraction = |minus: &[f64], plus: &[f64]| {
        let mm: f64 = minus.iter().sum();
        let mp: f64 = plus.iter().sum();
        mm / (mm + mp)
    };
    let fa = minus_fraction(&a.minus, &a.plus);
    let fb = minus_fraction(&b.minus, &b.plus);
    // Rebalance `b`: scale its heavy class down to `a`'s share and add the
    // removed profile to the other class at unchanged positions, so only the
    // flip cost 2·|delta| is paid for the class-mass gap.
    let delta = fb - fa;
    let mut b_minus = b.minus.clone();
    let mut b_plus = b.plus.clone();
    if delta > 0.0 {
        let keep = fa / fb;
        for (mv, pv) in b_minus.iter_mut().zip(b_plus.iter_mut()) {
            let moved = *mv * (1.0 - keep);
            *mv -= moved;
            *pv += moved;
        }
    } else if delta < 0.0 {
        let keep = (1.0 - fa) / (1.0 - fb);
        for (mv, pv) in b_minus.iter_mut().zip(b_plus.iter_mut()) {
            let moved = *pv * (1.0 - keep);
            *pv -= moved;
            *mv += moved;
        }
    }
    struct Side<'g> {
        grid: &'g GridDensity,
        cum_minus: Vec<f64>,
        cum_plus: Vec<f64>,
    }
    let build = |grid: &GridDensity, minus: &[f64], plus: &[f64]| {
        let dx = grid.dx();
        let total: f64 = (minus.iter().sum::<f64>() + plus.iter().sum::<f64>()) * dx;
        let mut cum_minus = vec![0.0];
        let mut cum_plus = vec![0.0];
        for (dens, cum) in [(minus, &mut cum_minus), (plus, &mut cum_plus)] {
            let mut acc = 0.0;
            for &v in dens.iter() {
                acc += v * dx / total;
                cum.push(acc);
            }
        }
        (cum_minus, cum_plus)
    };
    let (cma, cpa) = build(a, &a.minus, &a.plus);
    let (cmb, cpb) = build(b, &b_minus, &b_plus);
    let side_a = Side {
        grid: a,
        cum_minus: cma,
        cum_plus: cpa,
    };
    let side_b = Side {
        grid: b,
        cum_minus: cmb,
        cum_plus: cpb,
    };
    // Both sides now split at the same class boundary.
    let boundary = *side_a.cum_minus.last().unwrap();
    let locate = |side: &Side, u: f64| -> f64 {
        // Minus block first, plus block after; v is mass inside the block.
        let (cum, v) = if u < boundary {
            (&side.cum_minus, u)
        } else {
            (&side.cum_plus, u - boundary)
        };
        let cells = side.grid.cells;
        let cell = cum.partition_point(|&c| c <= v).clamp(1, cells) - 1;
        let mass = cum[cell + 1] - cum[cell];
        let frac = if mass > 0.0 {
            ((v - cum[cell]) / mass).clamp(0.0, 1.0)
        } else {
            0.5
        };
        side.grid.x_min + (cell as f64 + frac) * side.grid.dx()
    };
    let mut acc = 0.0;
    for k in 0..n_quad {
        let u = (k as f64 + 0.5) / n_quad as f64;
        let xa = locate(&side_a, u);
        let xb = locate(&side_b, u);
        acc += (xa - xb).abs();
    }
    2.0 * delta.abs() + acc / n_quad as f64
}
