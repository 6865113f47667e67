//! Transport distance between empirical measures.
//!
//! Ground cost between atoms: Euclidean distance of the field columns plus
//! the Euclidean distance of the spin columns, which is `2 sqrt(d)` for `d`
//! differing spin coordinates. On equal-size atom sets the distance is solved
//! exactly as an assignment problem (shortest augmenting paths with dual
//! potentials); unequal sizes are reconciled by subsampling the larger
//! measure with a fixed seed. A bank of Lipschitz test functions gives a
//! duality-based lower-bound estimate used as a cross-check.

use crate::model::{Atom, EmpiricalMeasure};
use crate::rng::{stream, uniform_f64};

/// Cost of moving one atom onto another.
pub fn ground_cost(a: &Atom, b: &Atom) -> f64 {
    debug_assert_eq!(a.m(), b.m());
    let mut x2 = 0.0;
    let mut differing = 0usize;
    for i in 0..a.m() {
        let dx = a.x[i] - b.x[i];
        x2 += dx * dx;
        if a.sigma[i] != b.sigma[i] {
            differing += 1;
        }
    }
    x2.sqrt() + 2.0 * (differing as f64).sqrt()
}

/// Dense pairwise cost matrix between two equal-size atom sets.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub n: usize,
    /// Row-major: `vals[i * n + j]` = cost of sending atom `i` of the first
    /// measure to atom `j` of the second.
    pub vals: Vec<f64>,
}

impl CostMatrix {
    pub fn between(a: &[Atom], b: &[Atom]) -> Self {
        assert_eq!(a.len(), b.len(), "cost matrix needs equal sizes");
        let n = a.len();
        let mut vals = vec![0.0; n * n];
        for (i, ai) in a.iter().enumerate() {
            for (j, bj) in b.iter().enumerate() {
                vals[i * n + j] = ground_cost(ai, bj);
            }
        }
        Self { n, vals }
    }
}

/// Minimum-cost perfect matching by shortest augmenting paths with dual
/// potentials (Jonker-Volgenant). Returns the column assigned to each row and
/// the total cost. Exact for finite costs; `O(n^3)`.
pub fn solve_assignment(cost: &CostMatrix) -> (Vec<usize>, f64) {
    let n = cost.n;
    let c = &cost.vals;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut row_at_col = vec![usize::MAX; n];
    let mut col_at_row = vec![usize::MAX; n];

    for cur_row in 0..n {
        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut shortest = vec![f64::INFINITY; n];
        let mut parent_row = vec![usize::MAX; n];
        let mut scanned_rows = vec![false; n];
        let mut scanned_cols = vec![false; n];

        let sink = loop {
            scanned_rows[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = usize::MAX;
            for (it, &j) in remaining.iter().enumerate() {
                let reduced = min_val + c[i * n + j] - u[i] - v[j];
                if reduced < shortest[j] {
                    parent_row[j] = i;
                    shortest[j] = reduced;
                }
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row_at_col[j] == usize::MAX)
                {
                    lowest = shortest[j];
                    index = it;
                }
            }
            assert!(
                lowest.is_finite(),
                "assignment infeasible: non-finite costs"
            );
            min_val = lowest;
            let j = remaining.swap_remove(index);
            scanned_cols[j] = true;
            if row_at_col[j] == usize::MAX {
                break j;
            }
            i = row_at_col[j];
        };

        u[cur_row] += min_val;
        for r in 0..n {
            if scanned_rows[r] && r != cur_row {
                u[r] += min_val - shortest[col_at_row[r]];
            }
        }
        for j in 0..n {
            if scanned_cols[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let r = parent_row[j];
            row_at_col[j] = r;
            std::mem::swap(&mut col_at_row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }

    let total = (0..n).map(|i| c[i * n + col_at_row[i]]).sum();
    (col_at_row, total)
}

/// Subsample `atoms` down to `target` entries without replacement,
/// deterministically from the stream address `(seed, "resample", tag)`.
fn subsample(atoms: &[Atom], target: usize, seed: u64, tag: u64) -> Vec<Atom> {
    debug_assert!(target <= atoms.len());
    let len = atoms.len();
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = stream(seed, "resample", tag);
    for k in 0..target {
        let pick = k + (uniform_f64(&mut rng) * (len - k) as f64) as usize;
        idx.swap(k, pick.min(len - 1));
    }
    idx[..target].iter().map(|&i| atoms[i].clone()).collect()
}

/// Exact transport distance between two empirical measures with the fixed
/// internal resampling seed. See [`wasserstein_exact_seeded`].
pub fn wasserstein_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    wasserstein_exact_seeded(mu, nu, 0)
}

/// Exact transport distance. Equal atom counts are matched exactly by the
/// assignment solver; if the counts differ, the larger measure is first
/// subsampled to the smaller count (without replacement, deterministic in
/// `seed`), which adds a resampling error of order `n^{-1/2}`.
pub fn wasserstein_exact_seeded(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    seed: u64,
) -> f64 {
    assert_eq!(mu.m, nu.m, "measures must share the replica count");
    assert!(!mu.is_empty() && !nu.is_empty());
    let n = mu.len().min(nu.len());
    let a_store;
    let a: &[Atom] = if mu.len() > n {
        a_store = subsample(&mu.atoms, n, seed, 0);
        &a_store
    } else {
        &mu.atoms
    };
    let b_store;
    let b: &[Atom] = if nu.len() > n {
        b_store = subsample(&nu.atoms, n, seed, 1);
        &b_store
    } else {
        &nu.atoms
    };
    let cost = CostMatrix::between(a, b);
    let (_, total) = solve_assignment(&cost);
    total / n as f64
}

/// A test function for the duality lower bound. All variants are
/// 1-Lipschitz for the ground cost by construction.
#[derive(Debug, Clone)]
pub enum TestFunction {
    /// `clamp(radius - ||x - center||, 0, height)`, spin-blind.
    /// Requires `height <= radius` (slope 1).
    Bump {
        center: Vec<f64>,
        radius: f64,
        height: f64,
    },
    /// Same profile gated on an exact spin pattern. Additionally requires
    /// `height <= 2`: atoms with different spin columns are at ground-cost
    /// distance at least 2, which pays for the indicator jump.
    SpinBump {
        pattern: Vec<i8>,
        center: Vec<f64>,
        radius: f64,
        height: f64,
    },
    /// `direction . x` for a unit vector; unbounded but 1-Lipschitz.
    Linear { direction: Vec<f64> },
}

impl TestFunction {
    pub fn eval(&self, atom: &Atom) -> f64 {
        match self {
            TestFunction::Bump {
                center,
                radius,
                height,
            } => bump_profile(&atom.x, center, *radius, *height),
            TestFunction::SpinBump {
                pattern,
                center,
                radius,
                height,
            } => {
                if atom.sigma == *pattern {
                    bump_profile(&atom.x, center, *radius, *height)
                } else {
                    0.0
                }
            }
            TestFunction::Linear { direction } => atom
                .x
                .iter()
                .zip(direction)
                .map(|(x, d)| x * d)
                .sum(),
        }
    }
}

fn bump_profile(x: &[f64], center: &[f64], radius: f64, height: f64) -> f64 {
    let dist = x
        .iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    (radius - dist).clamp(0.0, height)
}

/// A bank of test functions for [`kantorovich_estimate`].
#[derive(Debug, Clone)]
pub struct TestFunctionBank {
    pub functions: Vec<TestFunction>,
}

impl TestFunctionBank {
    /// Radial bumps (plateaued cones) at centers on a regular grid over
    /// `[-extent, extent]^m` with the given spacing, one spin-blind copy and
    /// one copy per spin pattern, for each radius in `radii`. Heights are
    /// `min(radius, 2)` so every function stays dual-feasible.
    pub fn radial(m: usize, extent: f64, spacing: f64, radii: &[f64]) -> Self {
        assert!((1..=3).contains(&m), "bank sized for m <= 3");
        let steps = (2.0 * extent / spacing).round() as usize + 1;
        let mut centers: Vec<Vec<f64>> = vec![vec![]];
        for _ in 0..m {
            let mut next = Vec::new();
            for c in &centers {
                for k in 0..steps {
                    let mut cc = c.clone();
                    cc.push(-extent + k as f64 * spacing);
                    next.push(cc);
                }
            }
            centers = next;
        }
        let patterns = spin_patterns(m);
        let mut functions = Vec::new();
        for center in &centers {
            for &radius in radii {
                let height = radius.min(2.0);
                functions.push(TestFunction::Bump {
                    center: center.clone(),
                    radius,
                    height,
                });
                for p in &patterns {
                    functions.push(TestFunction::SpinBump {
                        pattern: p.clone(),
                        center: center.clone(),
                        radius,
                        height,
                    });
                }
            }
        }
        Self { functions }
    }

    /// Radial bank plus linear probes along signed coordinate axes and the
    /// normalized all-ones diagonals.
    pub fn default_bank(m: usize) -> Self {
        let spacing = if m <= 2 { 1.0 } else { 2.0 };
        let mut bank = Self::radial(m, 4.0, spacing, &[1.0, 2.0, 3.0]);
        for i in 0..m {
            for sign in [1.0, -1.0] {
                let mut direction = vec![0.0; m];
                direction[i] = sign;
                bank.functions.push(TestFunction::Linear { direction });
            }
        }
        if m > 1 {
            let norm = (m as f64).sqrt();
            for sign in [1.0, -1.0] {
                bank.functions.push(TestFunction::Linear {
                    direction: vec![sign / norm; m],
                });
            }
        }
        bank
    }
}

fn spin_patterns(m: usize) -> Vec<Vec<i8>> {
    (0..1usize << m)
        .map(|mask| {
            (0..m)
                .map(|i| if mask & (1 << i) != 0 { 1i8 } else { -1i8 })
                .collect()
        })
        .collect()
}

/// Duality lower-bound estimate: `sup_f |E_mu f - E_nu f|` over the bank.
/// Never exceeds the exact distance (up to roundoff) because every bank
/// member is 1-Lipschitz for the ground cost.
pub fn kantorovich_estimate(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    bank: &TestFunctionBank,
) -> f64 {
    let mut best = 0.0f64;
    for f in &bank.functions {
        let a = mu.mean(|atom| f.eval(atom));
        let b = nu.mean(|atom| f.eval(atom));
        best = best.max((a - b).abs());
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Atom;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn atom(sigma: Vec<i8>, x: Vec<f64>) -> Atom {
        Atom::new(sigma, x)
    }

    fn random_measure(m: usize, n: usize, seed: u64, shift: f64) -> EmpiricalMeasure {
        let mut rng = stream(seed, "transport-test", 0);
        let atoms = (0..n)
            .map(|_| {
                let sigma = (0..m)
                    .map(|_| if uniform_f64(&mut rng) < 0.5 { 1 } else { -1 })
                    .collect();
                let x = (0..m)
                    .map(|_| uniform_f64(&mut rng) * 4.0 - 2.0 + shift)
                    .collect();
                Atom::new(sigma, x)
            })
            .collect();
        EmpiricalMeasure::new(m, atoms)
    }

    /// Exhaustive minimum over permutations; oracle for the solver.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = cost.n;
            if acc >= *best {
                return;
            }
            if row == n {
                *best = acc;
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.vals[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.n], 0.0, &mut best);
        best
    }

    #[test]
    fn ground_cost_components() {
        let a = atom(vec![1, 1], vec![0.0, 0.0]);
        let b = atom(vec![1, -1], vec![3.0, 4.0]);
        // x part 5, one differing spin contributes 2.
        assert_abs_diff_eq!(ground_cost(&a, &b), 7.0, epsilon = 1e-15);
        let c = atom(vec![-1, -1], vec![0.0, 0.0]);
        assert_abs_diff_eq!(
            ground_cost(&a, &c),
            2.0 * 2.0f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = stream(31, "transport-test", 1);
        for trial in 0..60 {
            let n = 2 + (trial % 5);
            let vals: Vec<f64> = (0..n * n)
                .map(|_| uniform_f64(&mut rng) * 10.0)
                .collect();
            let cost = CostMatrix { n, vals };
            let (assign, total) = solve_assignment(&cost);
            let mut seen = vec![false; n];
            for &j in &assign {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let exact = brute_force(&cost);
            assert!(
                (total - exact).abs() < 1e-12,
                "n={n} solver {total} vs brute {exact}"
            );
        }
    }

    #[test]
    fn identical_measures_have_zero_distance() {
        let mu = random_measure(2, 40, 5, 0.0);
        assert_eq!(wasserstein_exact(&mu, &mu), 0.0);
    }

    #[test]
    fn single_atom_pair_distance_is_coordinate_gap() {
        let mu = EmpiricalMeasure::new(1, vec![atom(vec![1], vec![0.25])]);
        let nu = EmpiricalMeasure::new(1, vec![atom(vec![1], vec![1.0])]);
        assert_abs_diff_eq!(wasserstein_exact(&mu, &nu), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn one_dimensional_sorted_matching() {
        // Same spins everywhere: the distance is the mean gap of sorted x.
        let xs = [0.1, -1.0, 2.0, 0.7, -0.3];
        let ys = [1.4, -0.6, 0.0, 0.9, 2.2];
        let mu = EmpiricalMeasure::new(
            1,
            xs.iter().map(|&x| atom(vec![1], vec![x])).collect(),
        );
        let nu = EmpiricalMeasure::new(
            1,
            ys.iter().map(|&y| atom(vec![1], vec![y])).collect(),
        );
        let mut sx = xs.to_vec();
        let mut sy = ys.to_vec();
        sx.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sy.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: f64 = sx
            .iter()
            .zip(&sy)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / xs.len() as f64;
        assert_abs_diff_eq!(wasserstein_exact(&mu, &nu), expected, epsilon = 1e-12);
    }

    #[test]
    fn resampling_is_deterministic_and_reasonable() {
        let mu = random_measure(1, 200, 6, 0.0);
        let nu = random_measure(1, 50, 7, 0.0);
        let d1 = wasserstein_exact(&mu, &nu);
        let d2 = wasserstein_exact(&mu, &nu);
        assert_eq!(d1, d2);
        // Same underlying law, so distance is small but nonzero.
        assert!(d1 > 0.0 && d1 < 1.0, "d = {d1}");
    }

    #[test]
    fn dual_estimate_never_exceeds_exact() {
        let bank = TestFunctionBank::default_bank(2);
        for seed in 0..10 {
            let mu = random_measure(2, 30, 100 + seed, 0.0);
            let nu = random_measure(2, 30, 200 + seed, 0.3);
            let exact = wasserstein_exact(&mu, &nu);
            let lower = kantorovich_estimate(&mu, &nu, &bank);
            assert!(
                lower <= exact + 1e-12,
                "seed {seed}: lower {lower} exact {exact}"
            );
        }
    }

    #[test]
    fn bank_feasibility_on_random_pairs() {
        let bank = TestFunctionBank::default_bank(2);
        let mut rng = stream(77, "transport-test", 2);
        for _ in 0..2000 {
            let mk = |rng: &mut _| {
                let sigma: Vec<i8> = (0..2)
                    .map(|_| if uniform_f64(rng) < 0.5 { 1 } else { -1 })
                    .collect();
                let x: Vec<f64> = (0..2).map(|_| uniform_f64(rng) * 12.0 - 6.0).collect();
                Atom::new(sigma, x)
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let cost = ground_cost(&a, &b);
            for f in &bank.functions {
                let gap = (f.eval(&a) - f.eval(&b)).abs();
                assert!(
                    gap <= cost + 1e-12,
                    "dual violation: gap {gap} cost {cost} fn {f:?}"
                );
            }
        }
    }

    #[test]
    fn translated_gaussians_linear_probe_recovers_shift() {
        let mut rng = stream(41, "transport-test", 3);
        let n = 4000;
        let delta = 0.5;
        let mk = |shift: f64, rng: &mut _| {
            EmpiricalMeasure::new(
                1,
                (0..n)
                    .map(|_| {
                        let (z, _) = crate::rng::normal_pair(rng);
                        Atom::new(vec![1], vec![z + shift])
                    })
                    .collect(),
            )
        };
        let mu = mk(0.0, &mut rng);
        let nu = mk(delta, &mut rng);
        let bank = TestFunctionBank::default_bank(1);
        let est = kantorovich_estimate(&mu, &nu, &bank);
        assert!((est - delta).abs() < 0.1, "estimate {est}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cost_is_a_metric_on_atoms(
            xa in proptest::collection::vec(-5.0f64..5.0, 2),
            xb in proptest::collection::vec(-5.0f64..5.0, 2),
            xc in proptest::collection::vec(-5.0f64..5.0, 2),
            sa in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 2),
            sb in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 2),
            sc in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 2),
        ) {
            let a = Atom::new(sa, xa);
            let b = Atom::new(sb, xb);
            let c = Atom::new(sc, xc);
            prop_assert!((ground_cost(&a, &b) - ground_cost(&b, &a)).abs() < 1e-12);
            prop_assert_eq!(ground_cost(&a, &a), 0.0);
            prop_assert!(
                ground_cost(&a, &c) <= ground_cost(&a, &b) + ground_cost(&b, &c) + 1e-12
            );
        }

        #[test]
        fn distance_is_symmetric(seed in 0u64..50) {
            let mu = random_measure(2, 12, 1000 + seed, 0.0);
            let nu = random_measure(2, 12, 2000 + seed, 0.5);
            let ab = wasserstein_exact(&mu, &nu);
            let ba = wasserstein_exact(&nu, &mu);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
