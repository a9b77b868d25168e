//! Slow, independent reference implementations used to check the fast
//! paths, plus the self-test suites built on them.
//!
//! Nothing here shares code with the implementations under test beyond the
//! data types: the DFT evaluates twiddles directly, the K-S oracle scans
//! every ECDF breakpoint, Krum is scored by enumerating neighbour subsets
//! and gamma comes from a dense grid.

use std::f64::consts::PI;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adversary::{min_max_craft, perturbation_vector, Perturbation};
use crate::aggregators::{krum_select, trimmed_mean_of, KrumParam};
use crate::detector::{ks_pvalue, ks_statistic};
use crate::fedsim::mlp::{grad_check, MlpDims, MlpModel};
use crate::fedsim::Dataset;
use crate::spectral::{fft, BinnedSample};
use crate::tensors::{ClientUpdate, ModelWeights, TensorShape};

/// `X_k = sum_m x_m exp(-2 pi i m k / N)` with each twiddle computed from
/// its own angle.
pub fn direct_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(m, &v)| Complex64::from_polar(v, -2.0 * PI * (m * k) as f64 / n as f64))
                .sum()
        })
        .collect()
}

/// `sup_x |F_a(x) - F_b(x)|` by evaluating both ECDFs at every sample value.
pub fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
        .fold(0.0, f64::max)
}

/// Krum by brute force: each point's score is the minimum, over all
/// `(K - f - 2)`-subsets of the other points, of the summed squared
/// distances. Returns the first minimizer.
pub fn krum_exhaustive(points: &[Vec<f64>], f: usize) -> usize {
    let k = points.len();
    let m = k - f - 2;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut best = (f64::INFINITY, 0);
    for i in 0..k {
        let others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        let mut score = f64::INFINITY;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != m {
                continue;
            }
            let s: f64 = others
                .iter()
                .enumerate()
                .filter(|(b, _)| mask >> b & 1 == 1)
                .map(|(_, &j)| sq(&points[i], &points[j]))
                .sum();
            score = score.min(s);
        }
        if score < best.0 {
            best = (score, i);
        }
    }
    best.1
}

/// Mean of the sorted slice with `n` values dropped from each end.
pub fn trimmed_mean_slice(values: &[f64], n: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let kept = &v[n..v.len() - n];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn max_dist(theta: &[f64], members: &[Vec<f64>]) -> f64 {
    members
        .iter()
        .map(|w| {
            w.iter()
                .zip(theta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Largest feasible gamma for the min-max constraint by grid search.
///
/// The feasible set is an interval containing 0 and, by the triangle
/// inequality, bounded by `2 D / ||p||`. A `points`-point grid over that
/// range brackets the boundary and a second grid of the same size inside the
/// bracketing cell refines it.
pub fn gamma_grid_search(members: &[Vec<f64>], direction: &[f64], points: usize) -> f64 {
    let k = members.len();
    let dim = direction.len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| members.iter().map(|w| w[j]).sum::<f64>() / k as f64)
        .collect();
    let mut bound: f64 = 0.0;
    for a in members {
        for b in members {
            bound = bound.max(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    let pnorm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bound == 0.0 || pnorm == 0.0 {
        return 0.0;
    }
    let feasible = |g: f64| {
        let theta: Vec<f64> = mean.iter().zip(direction).map(|(m, p)| m + g * p).collect();
        max_dist(&theta, members) <= bound
    };
    let mut lo = 0.0;
    let mut hi = 2.0 * bound / pnorm * (1.0 + 1e-9);
    for _ in 0..2 {
        let step = (hi - lo) / points as f64;
        let mut last = lo;
        for j in 1..=points {
            let g = lo + j as f64 * step;
            if !feasible(g) {
                break;
            }
            last = g;
        }
        hi = (last + step).min(hi);
        lo = last;
    }
    lo
}

/// Direct-sum evaluation of a binned Gaussian KDE at its grid nodes.
pub fn binned_kde_direct(binned: &BinnedSample) -> Vec<f64> {
    let h = binned.bandwidth;
    let norm = 1.0 / (binned.count as f64 * h * (2.0 * PI).sqrt());
    binned
        .grid
        .iter()
        .map(|&x| {
            binned
                .grid
                .iter()
                .zip(&binned.weights)
                .map(|(&g, &w)| w * (-0.5 * ((x - g) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Unbinned Gaussian KDE with bandwidth `h`, evaluated at `at`.
pub fn raw_kde(sample: &[f64], h: f64, at: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (sample.len() as f64 * h * (2.0 * PI).sqrt());
    at.iter()
        .map(|&x| {
            sample
                .iter()
                .map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Outcome of one self-test suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn report(name: &'static str, passed: bool, detail: String) -> SuiteReport {
    SuiteReport { name, passed, detail }
}

pub fn suite_fft(max_len: usize, trials: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for n in 1..=max_len {
        for _ in 0..trials {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = fft(&x);
            let slow = direct_dft(&x);
            for (a, b) in fast.as_slice().iter().zip(&slow) {
                worst = worst.max((a - b).norm());
            }
        }
    }
    report(
        "fft-vs-dft",
        worst < 1e-9,
        format!("lengths 1..={max_len}, max bin error {worst:.3e}"),
    )
}

pub fn suite_ks() -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let mut pairs = 0;
    for n in 1..=8 {
        for m in 1..=8 {
            for _ in 0..40 {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
                let b: Vec<f64> = (0..m).map(|_| rng.random_range(0..5) as f64).collect();
                pairs += 1;
                if ks_statistic(&a, &b).unwrap() != ks_brute(&a, &b) {
                    mismatches += 1;
                }
            }
        }
    }
    // ks_pvalue(d, n, n) with huge n reduces to the series at lambda = sqrt(n/2) d
    let n = 1 << 40;
    let lambda = 1.358;
    let p = ks_pvalue(lambda / (n as f64 / 2.0).sqrt(), n, n);
    let ok = mismatches == 0 && (p - 0.050).abs() <= 0.002;
    report(
        "ks-brute-force",
        ok,
        format!("{pairs} pairs, {mismatches} mismatches, Q(1.358) = {p:.5}"),
    )
}

fn vector_update(id: usize, v: &[f64]) -> ClientUpdate {
    let w = ModelWeights::new(vec![(
        TensorShape::vector(v.len()).expect("non-empty"),
        v.to_vec(),
    )])
    .expect("finite");
    ClientUpdate::new(id, w, 1).expect("positive size")
}

pub fn suite_krum(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let k = rng.random_range(3..=7);
        let f = rng.random_range(0..=k - 3);
        let dim = rng.random_range(1..=4);
        let points: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let ups: Vec<ClientUpdate> = points
            .iter()
            .enumerate()
            .map(|(i, p)| vector_update(i, p))
            .collect();
        let fast = krum_select(&ups, KrumParam { f }).expect("valid f").index;
        if fast != krum_exhaustive(&points, f) {
            mismatches += 1;
        }
    }
    report(
        "krum-exhaustive",
        mismatches == 0,
        format!("{instances} instances, {mismatches} mismatches"),
    )
}

pub fn suite_trimmed_mean(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(1..=25);
        let n = rng.random_range(0..=(k - 1) / 2);
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-100.0..100.0)).collect();
        let got = trimmed_mean_of(&v, n);
        let want = trimmed_mean_slice(&v, n);
        worst = worst.max((got - want).abs() / (1.0 + want.abs()));
    }
    report(
        "trimmed-mean-slice",
        worst <= 1e-12,
        format!("{instances} vectors, max rel error {worst:.3e}"),
    )
}

/// Outcome of comparing `min_max_craft` with [`gamma_grid_search`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GammaCheck {
    pub worst_relative: f64,
    pub worst_residual: f64,
    pub degenerate_ok: bool,
}

pub fn check_gamma(instances: usize, grid: usize, seed: u64) -> GammaCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GammaCheck {
        degenerate_ok: true,
        ..Default::default()
    };
    let kinds = [
        Perturbation::InverseUnitVector,
        Perturbation::InverseStd,
        Perturbation::InverseSign,
    ];
    for t in 0..instances {
        let dim = 1 + t % 2;
        let m = rng.random_range(2..=6);
        let members: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        3.0 * z + 1.0
                    })
                    .collect::<Vec<f64>>()
            })
            .collect();
        let weights: Vec<ModelWeights> = members
            .iter()
            .map(|v| {
                ModelWeights::new(vec![(TensorShape::vector(dim).expect("dim > 0"), v.clone())])
                    .expect("finite")
            })
            .collect();
        let kind = kinds[t % 3];
        let res = min_max_craft(&weights, kind).expect("non-zero mean");
        let direction = perturbation_vector(&weights, kind)
            .expect("non-zero mean")
            .to_flat();
        let want = gamma_grid_search(&members, &direction, grid);
        let rel = (res.gamma - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        out.worst_relative = out
            .worst_relative
            .max(if want == 0.0 && res.gamma == 0.0 { 0.0 } else { rel });
        let mut rhs: f64 = 0.0;
        for a in &members {
            for b in &members {
                rhs = rhs.max(
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt(),
                );
            }
        }
        let lhs = max_dist(&res.crafted.to_flat(), &members);
        out.worst_residual = out.worst_residual.max((lhs - rhs) / (1.0 + rhs));

        // degenerate collusion: one attacker, or identical attackers
        let single = min_max_craft(&weights[..1], kind).expect("non-zero");
        let twins = min_max_craft(&[weights[0].clone(), weights[0].clone()], kind).expect("non-zero");
        out.degenerate_ok &= single.gamma == 0.0 && single.crafted == weights[0];
        out.degenerate_ok &= twins.gamma == 0.0 && twins.crafted == weights[0];
    }
    out
}

pub fn suite_gamma(instances: usize, grid: usize, seed: u64) -> SuiteReport {
    let c = check_gamma(instances, grid, seed);
    let ok = c.worst_relative <= 1e-4 && c.worst_residual <= 1e-6 && c.degenerate_ok;
    report(
        "minmax-gamma-grid",
        ok,
        format!(
            "{instances} instances, max rel gap {:.3e}, max residual {:.3e}, degenerate cases {}",
            c.worst_relative,
            c.worst_residual,
            if c.degenerate_ok { "ok" } else { "wrong" }
        ),
    )
}

/// Worst backprop-vs-finite-difference error on 4-5-3 nets, one per seed.
pub fn worst_grad_check(seeds: u64) -> f64 {
    let dims = MlpDims {
        input: 4,
        hidden: 5,
        classes: 3,
    };
    (0..seeds)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = MlpModel::glorot(dims, &mut rng);
            let mut batch = Dataset::new(4);
            for _ in 0..8 {
                let x: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
                batch.push(&x, rng.random_range(0..3));
            }
            grad_check(&model, &batch)
        })
        .fold(0.0, f64::max)
}

pub fn suite_grad_check(seeds: u64) -> SuiteReport {
    let worst = worst_grad_check(seeds);
    report(
        "grad-check",
        worst < 1e-5,
        format!("{seeds} seeds, max rel error {worst:.3e}"),
    )
}

pub fn suite_kde(seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..60);
        let sample: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let binned = crate::spectral::bin_sample(&sample, 256).expect("spread sample");
        let fast = crate::spectral::kde_density(&sample, 256).expect("spread sample");
        let slow = binned_kde_direct(&binned);
        let peak = slow.iter().cloned().fold(0.0, f64::max);
        for (a, b) in fast.density.iter().zip(&slow) {
            worst = worst.max((a - b).abs() / peak);
        }
    }
    report(
        "kde-direct-sum",
        worst < 1e-9,
        format!("50 samples, max error / peak {worst:.3e}"),
    )
}

/// Every self-test suite, in report order.
pub fn run_selftest() -> Vec<SuiteReport> {
    let started = Instant::now();
    let reports = vec![
        suite_fft(300, 20, 1),
        suite_ks(),
        suite_krum(1000, 2),
        suite_trimmed_mean(1000, 3),
        suite_gamma(200, 100_000, 4),
        suite_grad_check(100),
        suite_kde(5),
    ];
    let elapsed = started.elapsed();
    if elapsed.as_secs() >= 60 {
        log::warn!("self-test took {elapsed:?}, over the 60 s budget");
    }
    reports
}
