//! Two-sample Kolmogorov-Smirnov machinery and the malicious-presence test
//! that switches the server between FedAvg and FFT aggregation.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::fed_avg;
use crate::error::{Error, Result};
use crate::fft_aggregator::{fft_aggregate, FftStrategy};
use crate::par;
use crate::seeding::derive_seed;
use crate::tensors::{gather, validate_uniform, ClientUpdate, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Fraction of repetitions whose p-value falls below `reject_level`.
    DeviationFrequency,
    /// Mean p-value over the repetitions.
    MeanPValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub repetitions: usize,
    pub subset_size: usize,
    pub reject_level: f64,
    pub threshold: f64,
    pub score_mode: ScoreMode,
    /// Share of coordinates evaluated per round, drawn uniformly.
    pub coordinate_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            repetitions: 10,
            subset_size: 5,
            reject_level: 0.05,
            threshold: 0.02,
            score_mode: ScoreMode::DeviationFrequency,
            coordinate_fraction: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.repetitions == 0 {
            return bad("detector repetitions must be positive".into());
        }
        if self.subset_size == 0 {
            return bad("detector subset size must be positive".into());
        }
        if !(self.reject_level > 0.0 && self.reject_level < 1.0) {
            return bad(format!("reject level {} not in (0, 1)", self.reject_level));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} not in [0, 1]", self.threshold));
        }
        if !(self.coordinate_fraction > 0.0 && self.coordinate_fraction <= 1.0) {
            return bad(format!(
                "coordinate fraction {} not in (0, 1]",
                self.coordinate_fraction
            ));
        }
        Ok(())
    }
}

/// Two-sided statistic `sup_x |F_a(x) - F_b(x)|`, exact, by merging the
/// sorted samples.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    Ok(ks_statistic_sorted(&xs, &ys))
}

pub(crate) fn ks_statistic_sorted(xs: &[f64], ys: &[f64]) -> f64 {
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        // step past every copy of the next breakpoint in both samples
        let x = xs[i].min(ys[j]);
        while i < n && xs[i] <= x {
            i += 1;
        }
        while j < m && ys[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
pub fn ks_pvalue(d: f64, n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    let ne = n * m / (n + m);
    let root = ne.sqrt();
    kolmogorov_q((root + 0.12 + 0.11 / root) * d)
}

/// `Q(lambda) = 2 sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lambda^2)`.
///
/// The alternating series converges slowly for small lambda, so below 1.18
/// the equivalent theta-function form
/// `1 - sqrt(2 pi) / lambda * sum_{j>=1} exp(-(2j-1)^2 pi^2 / (8 lambda^2))`
/// is summed instead. Terms are added until they drop below 1e-12.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut sum = 0.0;
        for j in 1..=100 {
            let k = (2 * j - 1) as f64;
            let term = (-k * k * pi2 / (8.0 * lambda * lambda)).exp();
            sum += term;
            if term < 1e-12 {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for j in 1..=100 {
            let jf = j as f64;
            let term = (-2.0 * jf * jf * lambda * lambda).exp();
            sum += sign * term;
            sign = -sign;
            if term < 1e-12 {
                break;
            }
        }
        2.0 * sum
    };
    q.clamp(0.0, 1.0)
}

pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let statistic = ks_statistic(a, b)?;
    Ok(KsResult {
        statistic,
        p_value: ks_pvalue(statistic, a.len(), b.len()),
    })
}

/// Per-coordinate scores of the subset-vs-rest K-S test.
#[derive(Debug, Clone, PartialEq)]
pub struct MalTestScores {
    /// Flat indices (layer-major) of the evaluated coordinates, ascending.
    pub coordinates: Vec<usize>,
    pub scores: Vec<f64>,
}

impl MalTestScores {
    pub fn mean(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// For each evaluated coordinate, repeatedly splits the client values into a
/// random subset of size S and its complement and scores the K-S p-values.
///
/// One seed is drawn from `rng`; each coordinate then owns a substream keyed
/// by its flat index, so the scores do not depend on worker scheduling.
pub fn mal_test<R: Rng + ?Sized>(
    updates: &[ClientUpdate],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> Result<MalTestScores> {
    validate_uniform(updates)?;
    cfg.validate()?;
    let k = updates.len();
    if cfg.subset_size >= k {
        return Err(Error::SubsetTooLarge {
            subset: cfg.subset_size,
            clients: k,
        });
    }
    let base = rng.random::<u64>();
    let layout = updates[0].weights.layout();
    let total = layout.total();
    let coordinates: Vec<usize> = if cfg.coordinate_fraction >= 1.0 {
        (0..total).collect()
    } else {
        let count = ((total as f64 * cfg.coordinate_fraction).ceil() as usize).clamp(1, total);
        let mut chosen = sample_indices(rng, total, count).into_vec();
        chosen.sort_unstable();
        chosen
    };
    let scores = par::map_indexed(coordinates.len(), |c| {
        let p = coordinates[c];
        let (l, i) = layout.locate(p);
        let values = gather(updates, l, i);
        let mut sub_rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[l as u64, i as u64]));
        coordinate_score(&values, cfg, &mut sub_rng)
    });
    Ok(MalTestScores { coordinates, scores })
}

fn coordinate_score(values: &[f64], cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> f64 {
    let k = values.len();
    let s = cfg.subset_size;
    let mut in_subset = vec![false; k];
    let mut subset = Vec::with_capacity(s);
    let mut rest = Vec::with_capacity(k - s);
    let mut acc = 0.0;
    for _ in 0..cfg.repetitions {
        in_subset.iter_mut().for_each(|f| *f = false);
        for idx in sample_indices(rng, k, s).iter() {
            in_subset[idx] = true;
        }
        subset.clear();
        rest.clear();
        for (idx, &v) in values.iter().enumerate() {
            if in_subset[idx] {
                subset.push(v);
            } else {
                rest.push(v);
            }
        }
        subset.sort_by(f64::total_cmp);
        rest.sort_by(f64::total_cmp);
        let d = ks_statistic_sorted(&subset, &rest);
        let p = ks_pvalue(d, subset.len(), rest.len());
        acc += match cfg.score_mode {
            ScoreMode::DeviationFrequency => {
                if p < cfg.reject_level {
                    1.0
                } else {
                    0.0
                }
            }
            ScoreMode::MeanPValue => p,
        };
    }
    acc / cfg.repetitions as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    FedAvg,
    Fft,
}

impl Decision {
    pub fn label(&self) -> &'static str {
        match self {
            Decision::FedAvg => "FedAvg",
            Decision::Fft => "FFT",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicOutcome {
    pub weights: ModelWeights,
    pub decision: Decision,
    pub score: f64,
}

/// FedAvg when the mean detector score is at most the threshold, FFT
/// aggregation otherwise.
pub fn dynamic_aggregate<R: Rng + ?Sized>(
    updates: &[ClientUpdate],
    cfg: &DetectorConfig,
    strategy: &FftStrategy,
    rng: &mut R,
) -> Result<DynamicOutcome> {
    let score = mal_test(updates, cfg, rng)?.mean();
    let (weights, decision) = if score <= cfg.threshold {
        (fed_avg(updates)?, Decision::FedAvg)
    } else {
        (fft_aggregate(updates, strategy)?, Decision::Fft)
    };
    Ok(DynamicOutcome {
        weights,
        decision,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::TensorShape;
    use rand_distr::{Distribution, Normal};

    fn update(id: usize, values: Vec<f64>) -> ClientUpdate {
        let w = ModelWeights::new(vec![(TensorShape::vector(values.len()).unwrap(), values)]).unwrap();
        ClientUpdate::new(id, w, 1).unwrap()
    }

    fn gaussian_updates(seed: u64, clients: usize, coords: usize) -> Vec<ClientUpdate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..clients)
            .map(|k| update(k, (0..coords).map(|_| n.sample(&mut rng)).collect()))
            .collect()
    }

    #[test]
    fn statistic_examples() {
        let a = [0.3, 1.0, -2.0];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[10.0, 11.0]).unwrap(), 1.0);
        assert_eq!(
            ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap(),
            0.25
        );
        assert_eq!(ks_statistic(&[], &[1.0]), Err(Error::EmptySample));
        assert_eq!(ks_statistic(&[1.0], &[]), Err(Error::EmptySample));
    }

    #[test]
    fn pvalue_examples() {
        assert_eq!(ks_pvalue(0.0, 10, 10), 1.0);
        assert!(ks_pvalue(1.0, 50, 50) < 1e-10);
        assert!((kolmogorov_q(1.358) - 0.050).abs() < 0.002);
        let r = ks_test(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert_eq!(
            r,
            KsResult {
                statistic: 0.0,
                p_value: 1.0
            }
        );
    }

    #[test]
    fn q_branches_agree_at_switch() {
        // both series represent the same function
        let lam: f64 = 1.18;
        let mut alt = 0.0;
        for j in 1..200 {
            let jf = j as f64;
            alt += if j % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * jf * jf * lam * lam).exp();
        }
        assert!((kolmogorov_q(lam - 1e-12) - 2.0 * alt).abs() < 1e-10);
        assert!((kolmogorov_q(lam) - 2.0 * alt).abs() < 1e-10);
    }

    #[test]
    fn pvalue_monotone_in_d() {
        for (n, m) in [(5, 15), (10, 10), (3, 40)] {
            let mut prev = f64::INFINITY;
            for step in 0..=2000 {
                let p = ks_pvalue(step as f64 / 2000.0, n, m);
                assert!(p <= prev, "n={n} m={m} d={}", step as f64 / 2000.0);
                prev = p;
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = DetectorConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            DetectorConfig { repetitions: 0, ..ok },
            DetectorConfig {
                reject_level: 1.0,
                ..ok
            },
            DetectorConfig { threshold: 1.5, ..ok },
            DetectorConfig {
                coordinate_fraction: 0.0,
                ..ok
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let ups = gaussian_updates(1, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            mal_test(&ups, &ok, &mut rng),
            Err(Error::SubsetTooLarge {
                subset: 5,
                clients: 5
            })
        );
    }

    #[test]
    fn identical_clients_score_zero() {
        let ups: Vec<_> = (0..20).map(|k| update(k, vec![0.25; 30])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = mal_test(&ups, &DetectorConfig::default(), &mut rng).unwrap();
        assert!(s.scores.iter().all(|&x| x == 0.0));
        let out = dynamic_aggregate(
            &ups,
            &DetectorConfig::default(),
            &FftStrategy::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.decision, Decision::FedAvg);
        assert_eq!(out.score, 0.0);
        assert_eq!(out.weights, ups[0].weights);
    }

    #[test]
    fn benign_rejection_rate_near_level() {
        let ups = gaussian_updates(10, 20, 100);
        let cfg = DetectorConfig::default();
        let s = mal_test(&ups, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.mean() <= cfg.reject_level + 0.05, "{}", s.mean());
    }

    #[test]
    #[ignore = "unattainable: the subset-averaged K-S rejection rate is rank-invariant, see subset_average_ignores_attackers"]
    fn constant_attackers_raise_score() {
        let mut ups = gaussian_updates(10, 20, 100);
        for u in ups.iter_mut().take(6) {
            *u = update(u.client_id, vec![50.0; 100]);
        }
        let s = mal_test(
            &ups,
            &DetectorConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(s.mean() >= 0.5, "{}", s.mean());
    }

    /// Rejection fraction over every size-S subset, for one coordinate.
    fn exhaustive_rate(values: &[f64], s: usize, level: f64) -> f64 {
        let k = values.len();
        let (mut hits, mut total) = (0usize, 0usize);
        for mask in 0u32..(1 << k) {
            if mask.count_ones() as usize != s {
                continue;
            }
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (i, &v) in values.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    a.push(v)
                } else {
                    b.push(v)
                }
            }
            let d = ks_statistic(&a, &b).unwrap();
            hits += (ks_pvalue(d, a.len(), b.len()) < level) as usize;
            total += 1;
        }
        hits as f64 / total as f64
    }

    #[test]
    fn subset_average_ignores_attackers() {
        // K-S only sees ranks, so averaging over all subsets gives the same
        // rate for any tie-free sample, with or without a block of outliers
        let benign = gaussian_updates(4, 20, 1)
            .iter()
            .map(|u| u.weights.layer(0).data()[0])
            .collect::<Vec<_>>();
        let mut attacked = benign.clone();
        attacked[..6].iter_mut().for_each(|v| *v = 50.0);
        let null = exhaustive_rate(&benign, 5, 0.05);
        assert!((null - 0.0519).abs() < 1e-3, "{null}");
        assert_eq!(exhaustive_rate(&attacked, 5, 0.05), null);

        let mut ups = gaussian_updates(10, 20, 100);
        for u in ups.iter_mut().take(6) {
            *u = update(u.client_id, vec![50.0; 100]);
        }
        let s = mal_test(
            &ups,
            &DetectorConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!((s.mean() - null).abs() < 0.02, "{}", s.mean());
    }

    #[test]
    fn threshold_one_always_fedavg() {
        let mut ups = gaussian_updates(3, 20, 50);
        for u in ups.iter_mut().take(6) {
            *u = update(u.client_id, vec![50.0; 50]);
        }
        let cfg = DetectorConfig {
            threshold: 1.0,
            ..Default::default()
        };
        let out = dynamic_aggregate(
            &ups,
            &cfg,
            &FftStrategy::default(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(out.decision, Decision::FedAvg);
    }

    #[test]
    fn determinism_and_scale_invariance() {
        let ups = gaussian_updates(21, 20, 40);
        let cfg = DetectorConfig::default();
        let a = mal_test(&ups, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = mal_test(&ups, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let scaled: Vec<_> = ups
            .iter()
            .map(|u| ClientUpdate::new(u.client_id, u.weights.scale(37.5), 1).unwrap())
            .collect();
        let c = mal_test(&scaled, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn coordinate_subsampling() {
        let ups = gaussian_updates(2, 10, 40);
        let cfg = DetectorConfig {
            coordinate_fraction: 0.25,
            ..Default::default()
        };
        let s = mal_test(&ups, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(s.coordinates.len(), 10);
        assert!(s.coordinates.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mean_pvalue_mode_is_high_for_benign() {
        let ups = gaussian_updates(8, 20, 50);
        let cfg = DetectorConfig {
            score_mode: ScoreMode::MeanPValue,
            ..Default::default()
        };
        let s = mal_test(&ups, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(s.mean() > 0.3);
    }
}
