//! Experiment orchestration: dispatch one configured mode, fan replicate
//! seeds across a worker pool, and write diff-able CSV tables plus a JSON
//! manifest. Every numeric output byte is a pure function of the config and
//! the seed list; only the manifest's timing field varies between runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Mode};
use crate::couplings::sample_couplings;
use crate::fixed_point::bifurcation_scan;
use crate::flow::{flow_particle, flow_pde_m1, measure_to_grid};
use crate::gaussian::{
    conditional_covariance, conditional_mean_direct, conditional_mean_reduced, norm_bounds_check,
    StepWindow,
};
use crate::model::EmpiricalMeasure;
use crate::rate::GlauberRate;
use crate::rng::{stream, uniform_f64};
use crate::sim::{run_dynamics, SimOptions, Simulation};
use crate::transport::wasserstein_exact_seeded;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{failed} of {total} formula checks failed")]
    CheckFailed { failed: usize, total: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("all {0} replicate seeds failed")]
    AllSeedsFailed(usize),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 failed numerical check, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::CheckFailed { .. } => 3,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Added to every replicate seed (disjoint reruns from one config).
    pub seed_offset: u64,
    /// Overrides the config's output directory.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; `None` leaves the pool at its default width.
    pub threads: Option<usize>,
}

/// What a run left on disk, plus human-readable result lines.
#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub reason: String,
}

/// One replicate of the empirical-process / flow comparison.
#[derive(Debug, Clone)]
pub struct SeedCompare {
    pub seed: u64,
    pub rows: Vec<CompareRow>,
    pub sup_distance: f64,
    pub stopped_at: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CompareRow {
    pub time: f64,
    pub distance: f64,
    pub lambda_min: f64,
    pub tau_triggered: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Aggregate {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Aggregate {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub per_seed: Vec<SeedCompare>,
    pub failures: Vec<SeedFailure>,
    /// Median/IQR of the per-seed sup distances; `None` if every seed failed.
    pub aggregate: Option<Aggregate>,
}

/// Interpolated quantile (linear between order statistics) of a nonempty
/// sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
}

fn aggregate(values: &mut [f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(Aggregate {
        median: quantile(values, 0.5),
        q1: quantile(values, 0.25),
        q3: quantile(values, 0.75),
    })
}

/// Mean spin, mean field coordinate, and mean squared field coordinate of a
/// measure (averaged over atoms and replicas) — the shared snapshot schema.
fn measure_summary(measure: &EmpiricalMeasure) -> (f64, f64, f64) {
    let inv = 1.0 / measure.m as f64;
    let mean_spin = measure.mean(|a| a.sigma.iter().map(|&s| f64::from(s)).sum::<f64>() * inv);
    let mean_x = measure.mean(|a| a.x.iter().sum::<f64>() * inv);
    let x2 = measure.mean(|a| a.x.iter().map(|v| v * v).sum::<f64>() * inv);
    (mean_spin, mean_x, x2)
}

/// Deterministic subsample seed for the transport evaluation at one
/// (replicate, snapshot) pair.
fn pair_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64)
}

/// Empirical check of the flow approximation: per seed, simulate with
/// snapshots, start the particle flow from the simulation's initial measure,
/// and take the exact transport distance at each snapshot. Failed seeds are
/// reported and skipped; the rest aggregate into median and quartiles of the
/// sup distance.
pub fn run_compare(cfg: &ExperimentConfig, seeds: &[u64]) -> CompareOutcome {
    let schedule = cfg.snapshot_schedule();
    let particles = cfg.particle_count();
    let results: Vec<Result<SeedCompare, SeedFailure>> = seeds
        .par_iter()
        .map(|&seed| {
            compare_one_seed(cfg, seed, &schedule, particles).map_err(|reason| SeedFailure {
                seed,
                reason,
            })
        })
        .collect();
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => per_seed.push(s),
            Err(f) => failures.push(f),
        }
    }
    let mut sups: Vec<f64> = per_seed.iter().map(|s| s.sup_distance).collect();
    let aggregate = aggregate(&mut sups);
    CompareOutcome {
        per_seed,
        failures,
        aggregate,
    }
}

fn compare_one_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    schedule: &[f64],
    particles: usize,
) -> Result<SeedCompare, String> {
    let params = cfg.model.params_for_seed(seed);
    let rate = GlauberRate::new(params.beta, params.h);
    let couplings = sample_couplings(params.n, params.s, seed)
        .map_err(|e| format!("coupling sample: {e}"))?;
    // The flow starts from the simulation's own time-zero measure, so build
    // the initial state once before running the dynamics with the same
    // deterministic streams.
    let initial = Simulation::new(&params, &couplings, &rate, SimOptions::default())
        .map_err(|e| format!("initial state: {e}"))?
        .measure();
    let traj = run_dynamics(&params, &couplings, &rate, schedule, SimOptions::default())
        .map_err(|e| format!("dynamics: {e}"))?;
    let flow = flow_particle(
        &initial,
        particles,
        &rate,
        params.s,
        params.c_floor,
        cfg.numerics.dt,
        schedule,
        seed,
    )
    .map_err(|e| format!("particle flow: {e}"))?;
    let mut rows = Vec::with_capacity(traj.snapshots.len());
    let mut sup_distance = 0.0f64;
    for (idx, snap) in traj.snapshots.iter().enumerate() {
        let flow_measure = &flow.snapshots[idx].measure;
        let distance = wasserstein_exact_seeded(&snap.measure, flow_measure, pair_seed(seed, idx));
        sup_distance = sup_distance.max(distance);
        rows.push(CompareRow {
            time: snap.time,
            distance,
            lambda_min: snap.lambda_min,
            tau_triggered: traj.stopped_at.is_some_and(|tau| snap.time >= tau),
        });
    }
    Ok(SeedCompare {
        seed,
        rows,
        sup_distance,
        stopped_at: traj.stopped_at,
    })
}

/// Shared snapshot table schema for simulate / flow-particle / flow-pde.
const SNAPSHOT_HEADER: &str = "seed,time,lambda_min,mean_spin,mean_x,x_second_moment\n";

struct SnapshotRows {
    seed: u64,
    body: String,
    stopped_at: Option<f64>,
}

fn simulate_one_seed(cfg: &ExperimentConfig, seed: u64, schedule: &[f64]) -> Result<SnapshotRows, String> {
    let params = cfg.model.params_for_seed(seed);
    let rate = GlauberRate::new(params.beta, params.h);
    let couplings = sample_couplings(params.n, params.s, seed)
        .map_err(|e| format!("coupling sample: {e}"))?;
    let traj = run_dynamics(&params, &couplings, &rate, schedule, SimOptions::default())
        .map_err(|e| format!("dynamics: {e}"))?;
    let mut body = String::new();
    for snap in &traj.snapshots {
        let (mean_spin, mean_x, x2) = measure_summary(&snap.measure);
        let _ = writeln!(
            body,
            "{seed},{},{},{},{},{}",
            snap.time, snap.lambda_min, mean_spin, mean_x, x2
        );
    }
    Ok(SnapshotRows {
        seed,
        body,
        stopped_at: traj.stopped_at,
    })
}

fn flow_particle_one_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    schedule: &[f64],
    particles: usize,
) -> Result<SnapshotRows, String> {
    let params = cfg.model.params_for_seed(seed);
    let rate = GlauberRate::new(params.beta, params.h);
    let couplings = sample_couplings(params.n, params.s, seed)
        .map_err(|e| format!("coupling sample: {e}"))?;
    let initial = Simulation::new(&params, &couplings, &rate, SimOptions::default())
        .map_err(|e| format!("initial state: {e}"))?
        .measure();
    let flow = flow_particle(
        &initial,
        particles,
        &rate,
        params.s,
        params.c_floor,
        cfg.numerics.dt,
        schedule,
        seed,
    )
    .map_err(|e| format!("particle flow: {e}"))?;
    let mut body = String::new();
    for snap in &flow.snapshots {
        let (mean_spin, mean_x, x2) = measure_summary(&snap.measure);
        let lambda = crate::moments::overlap_lambda_min(&snap.measure);
        let _ = writeln!(
            body,
            "{seed},{},{},{},{},{}",
            snap.time, lambda, mean_spin, mean_x, x2
        );
    }
    Ok(SnapshotRows {
        seed,
        body,
        stopped_at: None,
    })
}

fn flow_pde_one_seed(cfg: &ExperimentConfig, seed: u64, schedule: &[f64]) -> Result<SnapshotRows, String> {
    let params = cfg.model.params_for_seed(seed);
    let rate = GlauberRate::new(params.beta, params.h);
    let couplings = sample_couplings(params.n, params.s, seed)
        .map_err(|e| format!("coupling sample: {e}"))?;
    let initial = Simulation::new(&params, &couplings, &rate, SimOptions::default())
        .map_err(|e| format!("initial state: {e}"))?
        .measure();
    let grid = measure_to_grid(
        &initial,
        cfg.numerics.x_min,
        cfg.numerics.x_max,
        cfg.numerics.cells,
    )
    .map_err(|e| format!("grid projection: {e}"))?;
    let run = flow_pde_m1(&grid, &rate, params.s, schedule, None)
        .map_err(|e| format!("density solve: {e}"))?;
    let mut body = String::new();
    for (time, g) in &run.snapshots {
        // Single replica: the overlap matrix is the scalar 1.
        let mean_spin = 2.0 * g.mass_plus() - 1.0;
        let mean_x = g.mean_x();
        let x2 = g.var_x() + mean_x * mean_x;
        let _ = writeln!(body, "{seed},{time},1,{mean_spin},{mean_x},{x2}");
    }
    Ok(SnapshotRows {
        seed,
        body,
        stopped_at: None,
    })
}

/// One randomized audit instance of the conditional-field formulas.
#[derive(Debug, Clone)]
pub struct GaussianCheckRow {
    pub instance: usize,
    pub n: usize,
    pub m: usize,
    pub s: f64,
    pub mean_gap: f64,
    pub cov_eigen_min: f64,
    pub bounds_hold: bool,
    pub pass: bool,
}

/// Randomized audit: on small instances with realizable fields, the direct
/// block-solve of the conditional mean must match the reduced formula, the
/// conditional covariance must be PSD, and the operator-norm bounds must
/// hold. Returns one row per instance.
pub fn gaussian_check(cfg: &ExperimentConfig, base_seed: u64) -> Result<Vec<GaussianCheckRow>, String> {
    let gc = &cfg.gaussian_check;
    let mut rows = Vec::with_capacity(gc.instances);
    for k in 0..gc.instances {
        let mut rng = stream(base_seed, "gauss-check", k as u64);
        let n = 4 + (uniform_f64(&mut rng) * (gc.max_n.saturating_sub(3)) as f64) as usize;
        let n = n.min(gc.max_n);
        let m = 1 + (uniform_f64(&mut rng) * gc.max_m as f64) as usize;
        let m = m.min(gc.max_m);
        let s = [0.0, 0.5, 1.0][k % 3];
        let instance_seed = base_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(k as u64);
        let couplings =
            sample_couplings(n, s, instance_seed).map_err(|e| format!("instance {k}: {e}"))?;
        // Resample the start state until the replica overlap matrix is
        // safely invertible; small random instances collide often.
        let sites = n * m;
        let mut sigma_start = vec![0i8; sites];
        loop {
            for v in sigma_start.iter_mut() {
                *v = if uniform_f64(&mut rng) < 0.5 { 1 } else { -1 };
            }
            let fields_probe = couplings.field(&sigma_start, m);
            let measure = EmpiricalMeasure::from_state(&sigma_start, &fields_probe, n, m);
            if crate::moments::overlap_lambda_min(&measure) >= 0.05 {
                break;
            }
        }
        let mut sigma_end = sigma_start.clone();
        for v in sigma_end.iter_mut() {
            if uniform_f64(&mut rng) < 0.3 {
                *v = -*v;
            }
        }
        let fields_start = couplings.field(&sigma_start, m);
        let window = StepWindow {
            n,
            m,
            sigma_start: &sigma_start,
            sigma_end: &sigma_end,
            fields_start: &fields_start,
            s,
        };
        let direct = conditional_mean_direct(&window).map_err(|e| format!("instance {k}: {e}"))?;
        let reduced = conditional_mean_reduced(&window).map_err(|e| format!("instance {k}: {e}"))?;
        let mean_gap = direct
            .mean
            .iter()
            .zip(&reduced)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let cov = conditional_covariance(&window).map_err(|e| format!("instance {k}: {e}"))?;
        let bounds = norm_bounds_check(&window).map_err(|e| format!("instance {k}: {e}"))?;
        let pass = mean_gap <= gc.tolerance && cov.eigen_min >= -1e-8 && bounds.all_hold;
        rows.push(GaussianCheckRow {
            instance: k,
            n,
            m,
            s,
            mean_gap,
            cov_eigen_min: cov.eigen_min,
            bounds_hold: bounds.all_hold,
            pass,
        });
    }
    Ok(rows)
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf, HarnessError> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    Some(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[derive(Serialize)]
struct Manifest<'a> {
    mode: &'a str,
    seeds: &'a [u64],
    outputs: Vec<String>,
    failures: &'a [SeedFailure],
    git_revision: Option<String>,
    wall_clock_seconds: f64,
    details: serde_json::Value,
    config: &'a ExperimentConfig,
}

/// Dispatch the configured mode: compute, then write CSV tables and the JSON
/// manifest into the output directory. CSV bodies are byte-identical across
/// reruns of the same config and seeds.
pub fn run_mode(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    let out_dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.output.directory.clone());
    std::fs::create_dir_all(&out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let seeds = cfg.seeds_with_offset(opts.seed_offset);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Runtime(format!("worker pool: {e}")))?;

    let mut files = Vec::new();
    let mut lines = Vec::new();
    let mut failures: Vec<SeedFailure> = Vec::new();
    let details;
    let mut check_failed = 0usize;
    let mut check_total = 0usize;

    match cfg.mode {
        Mode::Simulate | Mode::FlowParticle | Mode::FlowPde => {
            let schedule = cfg.snapshot_schedule();
            let particles = cfg.particle_count();
            let results: Vec<Result<SnapshotRows, SeedFailure>> = pool.install(|| {
                seeds
                    .par_iter()
                    .map(|&seed| {
                        let out = match cfg.mode {
                            Mode::Simulate => simulate_one_seed(cfg, seed, &schedule),
                            Mode::FlowParticle => {
                                flow_particle_one_seed(cfg, seed, &schedule, particles)
                            }
                            _ => flow_pde_one_seed(cfg, seed, &schedule),
                        };
                        out.map_err(|reason| SeedFailure { seed, reason })
                    })
                    .collect()
            });
            let mut body = String::from(SNAPSHOT_HEADER);
            let mut stopped = Vec::new();
            let mut ok = 0usize;
            for r in results {
                match r {
                    Ok(rows) => {
                        ok += 1;
                        body.push_str(&rows.body);
                        if let Some(tau) = rows.stopped_at {
                            stopped.push(serde_json::json!({"seed": rows.seed, "tau": tau}));
                        }
                    }
                    Err(f) => failures.push(f),
                }
            }
            if ok == 0 {
                for f in &failures {
                    eprintln!("seed {}: {}", f.seed, f.reason);
                }
                return Err(HarnessError::AllSeedsFailed(seeds.len()));
            }
            files.push(write_file(&out_dir, "snapshots.csv", &body)?);
            details = serde_json::json!({ "stopped": stopped });
            lines.push(format!(
                "{}: {} of {} seeds completed, {} stopped early",
                cfg.mode,
                ok,
                seeds.len(),
                stopped.len()
            ));
        }
        Mode::Compare => {
            let outcome = pool.install(|| run_compare(cfg, &seeds));
            failures = outcome.failures;
            let mut body = String::from("seed,time,d_wasserstein,lambda_min,tau_triggered\n");
            for s in &outcome.per_seed {
                for row in &s.rows {
                    let _ = writeln!(
                        body,
                        "{},{},{},{},{}",
                        s.seed,
                        row.time,
                        row.distance,
                        row.lambda_min,
                        u8::from(row.tau_triggered)
                    );
                }
            }
            files.push(write_file(&out_dir, "compare.csv", &body)?);
            let mut summary = String::from("seed,sup_d_wasserstein,tau_triggered,stopped_at\n");
            for s in &outcome.per_seed {
                let _ = writeln!(
                    summary,
                    "{},{},{},{}",
                    s.seed,
                    s.sup_distance,
                    u8::from(s.stopped_at.is_some()),
                    s.stopped_at.map(|t| t.to_string()).unwrap_or_default()
                );
            }
            files.push(write_file(&out_dir, "summary.csv", &summary)?);
            let agg = outcome
                .aggregate
                .ok_or(HarnessError::AllSeedsFailed(seeds.len()))?;
            let mut agg_body = String::from("statistic,value\n");
            let _ = writeln!(agg_body, "median_sup_distance,{}", agg.median);
            let _ = writeln!(agg_body, "q1_sup_distance,{}", agg.q1);
            let _ = writeln!(agg_body, "q3_sup_distance,{}", agg.q3);
            let _ = writeln!(agg_body, "iqr_sup_distance,{}", agg.iqr());
            files.push(write_file(&out_dir, "aggregate.csv", &agg_body)?);
            let triggered = outcome
                .per_seed
                .iter()
                .filter(|s| s.stopped_at.is_some())
                .count();
            details = serde_json::json!({
                "median_sup_distance": agg.median,
                "q1_sup_distance": agg.q1,
                "q3_sup_distance": agg.q3,
                "tau_triggered_seeds": triggered,
            });
            lines.push(format!(
                "compare: median sup distance {:.6} (IQR {:.6}) over {} seeds, {} stopped early",
                agg.median,
                agg.iqr(),
                outcome.per_seed.len(),
                triggered
            ));
        }
        Mode::Bifurcation => {
            let b = &cfg.bifurcation;
            let count = ((b.beta_max - b.beta_min) / b.beta_step + 1e-9).floor() as usize + 1;
            let betas: Vec<f64> = (0..count).map(|i| b.beta_min + i as f64 * b.beta_step).collect();
            let scan = bifurcation_scan(&betas, cfg.model.h, b.threshold)
                .map_err(|e| HarnessError::Runtime(format!("overlap scan: {e}")))?;
            let mut body = String::from("beta,h,root_index,q,log_residual\n");
            for point in &scan.points {
                for (idx, &q) in point.roots.iter().enumerate() {
                    let residual = crate::fixed_point::overlap_log_residual(q, point.beta, cfg.model.h);
                    let _ = writeln!(body, "{},{},{idx},{q},{residual}", point.beta, cfg.model.h);
                }
            }
            files.push(write_file(&out_dir, "bifurcation.csv", &body)?);
            details = serde_json::json!({ "onset_beta": scan.onset });
            match scan.onset {
                Some(onset) => lines.push(format!(
                    "bifurcation: nonzero branch first exceeds {} at beta = {onset}",
                    b.threshold
                )),
                None => lines.push("bifurcation: no nonzero branch in the scanned range".into()),
            }
        }
        Mode::GaussianCheck => {
            let base_seed = seeds[0];
            let rows = pool
                .install(|| gaussian_check(cfg, base_seed))
                .map_err(HarnessError::Runtime)?;
            let mut body =
                String::from("instance,n,m,s,mean_gap,cov_eigen_min,bounds_hold,pass\n");
            for r in &rows {
                let _ = writeln!(
                    body,
                    "{},{},{},{},{},{},{},{}",
                    r.instance,
                    r.n,
                    r.m,
                    r.s,
                    r.mean_gap,
                    r.cov_eigen_min,
                    u8::from(r.bounds_hold),
                    u8::from(r.pass)
                );
            }
            files.push(write_file(&out_dir, "gaussian_check.csv", &body)?);
            check_total = rows.len();
            check_failed = rows.iter().filter(|r| !r.pass).count();
            let worst = rows.iter().map(|r| r.mean_gap).fold(0.0f64, f64::max);
            details = serde_json::json!({
                "instances": check_total,
                "failed": check_failed,
                "worst_mean_gap": worst,
            });
            lines.push(format!(
                "gaussian-check: {} of {check_total} instances passed, worst mean gap {worst:.3e}",
                check_total - check_failed
            ));
        }
    }

    for f in &failures {
        eprintln!("seed {}: {}", f.seed, f.reason);
    }
    let manifest = Manifest {
        mode: cfg.mode.as_str(),
        seeds: &seeds,
        outputs: files
            .iter()
            .map(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect(),
        failures: &failures,
        git_revision: git_revision(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        details,
        config: cfg,
    };
    let manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| HarnessError::Runtime(format!("manifest encode: {e}")))?;
    let manifest_path = write_file(&out_dir, "manifest.json", &manifest_text)?;

    if check_failed > 0 {
        return Err(HarnessError::CheckFailed {
            failed: check_failed,
            total: check_total,
        });
    }
    Ok(RunReport {
        out_dir,
        files,
        manifest: manifest_path,
        lines,
    })
}
