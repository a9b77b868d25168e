//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use fedfft::adversary::{apply_attack, random_weights, AttackKind, AttackSpec};
use fedfft::aggregators::{krum, trimmed_mean_of, KrumParam};
use fedfft::detector::{dynamic_aggregate, kolmogorov_q, ks_statistic, Decision, DetectorConfig};
use fedfft::fedsim::{
    run_experiment, simulation_detector, AggregatorSpec, RoundRecord, SyntheticTask, TrainConfig,
};
use fedfft::fft_aggregator::FftStrategy;
use fedfft::oracles::{
    check_gamma, direct_dft, krum_exhaustive, ks_brute, trimmed_mean_slice, worst_grad_check,
};
use fedfft::runner::{run_repeats, ExperimentConfig};
use fedfft::spectral::fft;
use fedfft::tensors::{ClientUpdate, ModelWeights, TensorShape};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn vector(v: Vec<f64>) -> ModelWeights {
    ModelWeights::new(vec![(TensorShape::vector(v.len()).unwrap(), v)]).unwrap()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for n in 1..=300 {
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for (a, b) in fft(&x).as_slice().iter().zip(direct_dft(&x)) {
                worst = worst.max((a - b).norm());
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-9 && elapsed < Duration::from_secs(10),
        format!("max bin error {worst:.2e} over lengths 1..=300 x 20, {elapsed:.2?}"),
    )
}

/// Every multiset of size 1..=8 over {0,1,2,3,4}, as sorted vectors.
fn multisets() -> Vec<Vec<f64>> {
    fn extend(prefix: &mut Vec<f64>, start: u8, out: &mut Vec<Vec<f64>>) {
        if !prefix.is_empty() {
            out.push(prefix.clone());
        }
        if prefix.len() == 8 {
            return;
        }
        for v in start..5 {
            prefix.push(v as f64);
            extend(prefix, v, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), 0, &mut out);
    out
}

fn criterion_2() -> Outcome {
    let sets = multisets();
    let mut mismatches = 0usize;
    for a in &sets {
        for b in &sets {
            if ks_statistic(a, b).unwrap() != ks_brute(a, b) {
                mismatches += 1;
            }
        }
    }
    // the alternating series summed to machine precision
    let lambda: f64 = 1.358;
    let series: f64 = (1..200)
        .map(|j| {
            let j = j as f64;
            2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp()
        })
        .sum();
    let q = kolmogorov_q(lambda);
    let ok = mismatches == 0 && (q - 0.050).abs() <= 0.002 && (q - series).abs() < 1e-9;
    outcome(
        ok,
        format!(
            "{} sample pairs, {mismatches} mismatches; Q(1.358) = {q:.5} (series {series:.5})",
            sets.len() * sets.len()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut krum_bad = 0;
    for _ in 0..1000 {
        let k = rng.random_range(3..=7);
        let f = rng.random_range(0..=k - 3);
        let dim = rng.random_range(1..=5);
        let pts: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let ups: Vec<ClientUpdate> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| ClientUpdate::new(i, vector(p.clone()), 1).unwrap())
            .collect();
        let fast = krum(&ups, KrumParam { f }).unwrap();
        if fast != ups[krum_exhaustive(&pts, f)].weights {
            krum_bad += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=30);
        let n = rng.random_range(0..=(k - 1) / 2);
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-1e3..1e3)).collect();
        let want = trimmed_mean_slice(&v, n);
        worst = worst.max((trimmed_mean_of(&v, n) - want).abs() / (1.0 + want.abs()));
    }
    outcome(
        krum_bad == 0 && worst <= 1e-12,
        format!("krum mismatches {krum_bad}/1000, trimmed mean max rel error {worst:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let c = check_gamma(200, 100_000, 4);
    outcome(
        c.worst_relative <= 1e-4 && c.worst_residual <= 1e-6 && c.degenerate_ok,
        format!(
            "max rel gap to grid {:.2e}, max scaled residual {:.2e}, degenerate gamma=0 {}",
            c.worst_relative,
            c.worst_residual,
            if c.degenerate_ok { "exact" } else { "WRONG" }
        ),
    )
}

fn criterion_5() -> Outcome {
    let worst = worst_grad_check(100);
    outcome(
        worst < 1e-5,
        format!("max relative error {worst:.2e} over 100 seeds"),
    )
}

fn experiment(aggregator: AggregatorSpec, kind: AttackKind, fraction: f64) -> ExperimentConfig {
    ExperimentConfig {
        task: SyntheticTask::default(),
        train: TrainConfig {
            aggregator,
            attack: AttackSpec {
                kind,
                fraction,
                ..Default::default()
            },
            ..Default::default()
        },
        repeats: 5,
        output_dir: "unused".into(),
    }
}

fn mean_final(runs: &[Vec<RoundRecord>]) -> f64 {
    runs.iter()
        .map(|r| r.last().unwrap().global_accuracy)
        .sum::<f64>()
        / runs.len() as f64
}

fn kde() -> AggregatorSpec {
    AggregatorSpec::Fft {
        strategy: FftStrategy::default(),
    }
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let acc =
        |agg, frac| mean_final(&run_repeats(&experiment(agg, AttackKind::RandomWeights, frac)).unwrap());
    let (avg0, avg40) = (acc(AggregatorSpec::FedAvg, 0.0), acc(AggregatorSpec::FedAvg, 0.4));
    let (fft0, fft40) = (acc(kde(), 0.0), acc(kde(), 0.4));
    let elapsed = started.elapsed();
    let ok = avg0 - avg40 >= 0.20 && fft0 - fft40 <= 0.05 && elapsed < Duration::from_secs(180);
    outcome(
        ok,
        format!(
            "FedAvg {avg0:.4} -> {avg40:.4} (drop {:.4}), FFT {fft0:.4} -> {fft40:.4} (drop {:.4}), {elapsed:.1?}",
            avg0 - avg40,
            fft0 - fft40
        ),
    )
}

fn criterion_7() -> Outcome {
    let chance = 1.0 / SyntheticTask::default().classes as f64;
    let f = (0.3 * SyntheticTask::default().clients as f64).round() as usize;
    let avg = mean_final(&run_repeats(&experiment(AggregatorSpec::FedAvg, AttackKind::MinMax, 0.3)).unwrap());
    let krum_runs = run_repeats(&experiment(
        AggregatorSpec::Krum { f: Some(f) },
        AttackKind::MinMax,
        0.3,
    ))
    .unwrap();
    let rounds: Vec<&RoundRecord> = krum_runs.iter().flatten().collect();
    let bad = rounds
        .iter()
        .filter(|r| r.krum_choice.is_some_and(|c| c.1))
        .count();
    let krum_rate = bad as f64 / rounds.len() as f64;
    let fft_clean = mean_final(&run_repeats(&experiment(kde(), AttackKind::None, 0.0)).unwrap());
    let fft_attacked = mean_final(&run_repeats(&experiment(kde(), AttackKind::MinMax, 0.3)).unwrap());
    let parts = [
        avg <= chance + 0.15,
        krum_rate >= 0.90,
        (fft_clean - fft_attacked).abs() <= 0.08,
    ];
    outcome(
        parts.iter().all(|&p| p),
        format!(
            "FedAvg {avg:.4} (need <= {:.2}: {}), Krum f={f} picks attacker in {:.1}% of rounds (need >= 90%: {}), FFT {fft_clean:.4} clean vs {fft_attacked:.4} attacked ({})",
            chance + 0.15,
            mark(parts[0]),
            100.0 * krum_rate,
            mark(parts[1]),
            mark(parts[2])
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "missed"
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cases = 0;
    let mut wrong = 0;
    for k in 3..=10usize {
        for f in 0..=k - 3 {
            for m in (k - f - 1)..=k {
                for _ in 0..5 {
                    let bad = vector((0..4).map(|_| rng.random_range(-2.0..2.0)).collect());
                    let ups: Vec<ClientUpdate> = (0..k)
                        .map(|i| {
                            let w = if i < m {
                                bad.clone()
                            } else {
                                vector((0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
                            };
                            ClientUpdate::new(i, w, 1).unwrap()
                        })
                        .collect();
                    cases += 1;
                    if krum(&ups, KrumParam { f }).unwrap() != bad {
                        wrong += 1;
                    }
                }
            }
        }
    }
    outcome(
        wrong == 0,
        format!("{cases} (K, f, M) cases, {wrong} not returning the colluders' weights"),
    )
}

/// Benign clients share a trained-looking model plus small noise; attackers
/// submit fresh Glorot draws.
fn detector_round(seed: u64, attackers: usize) -> Vec<ClientUpdate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = vector(vec![0.0; 100]);
    let base = random_weights(&template, &mut rng);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let honest: Vec<ClientUpdate> = (0..20)
        .map(|k| {
            let flat: Vec<f64> = base.iter_flat().map(|v| v + noise.sample(&mut rng)).collect();
            ClientUpdate::new(k, vector(flat), 1).unwrap()
        })
        .collect();
    let ids: BTreeSet<usize> = (0..attackers).collect();
    let spec = AttackSpec {
        kind: AttackKind::RandomWeights,
        fraction: attackers as f64 / 20.0,
        ..Default::default()
    };
    apply_attack(&honest, &spec, &ids, &mut rng).unwrap()
}

fn criterion_9() -> Outcome {
    let cfg = DetectorConfig::default();
    let strategy = FftStrategy::default();
    let mut benign_fedavg = 0;
    let mut attacked_fft = 0;
    let (mut benign_score, mut attacked_score) = (0.0, 0.0);
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let out = dynamic_aggregate(&detector_round(trial, 0), &cfg, &strategy, &mut rng).unwrap();
        benign_fedavg += (out.decision == Decision::FedAvg) as usize;
        benign_score += out.score / 100.0;
        let out = dynamic_aggregate(&detector_round(trial, 6), &cfg, &strategy, &mut rng).unwrap();
        attacked_fft += (out.decision == Decision::Fft) as usize;
        attacked_score += out.score / 100.0;
    }
    outcome(
        benign_fedavg >= 95 && attacked_fft >= 95,
        format!(
            "benign: FedAvg in {benign_fedavg}/100 (mean score {benign_score:.4}), 30% attackers: FFT in {attacked_fft}/100 (mean score {attacked_score:.4}), threshold {}",
            cfg.threshold
        ),
    )
}

fn criterion_10() -> Outcome {
    let cfg = TrainConfig {
        rounds: 20,
        aggregator: AggregatorSpec::Dynamic {
            detector: simulation_detector(),
            strategy: FftStrategy::default(),
        },
        attack: AttackSpec {
            kind: AttackKind::RandomWeights,
            fraction: 0.3,
            start_round: 11,
            ..Default::default()
        },
        seed: 10,
        ..Default::default()
    };
    let recs = run_experiment(&cfg, &SyntheticTask::default()).unwrap();
    let before = recs[..10]
        .iter()
        .filter(|r| r.decision == Some(Decision::FedAvg))
        .count();
    let after = recs[10..]
        .iter()
        .filter(|r| r.decision == Some(Decision::Fft))
        .count();
    let scores: Vec<String> = recs
        .iter()
        .map(|r| format!("{:.3}", r.detector_score.unwrap()))
        .collect();
    outcome(
        before >= 9 && after >= 9,
        format!(
            "FedAvg in {before}/10 clean rounds, FFT in {after}/10 attacked rounds; scores [{}]",
            scores.join(" ")
        ),
    )
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "task": {"clients": 12, "per_client": 80, "seed": 5},
  "train": {"rounds": 4, "seed": 9,
            "aggregator": {"kind": "dynamic"},
            "attack": {"kind": "random_weights", "fraction": 0.25}},
  "repeats": 2
}"#,
    )
    .unwrap();
    let run = |threads: &str, tag: &str| -> Option<Vec<u8>> {
        let out = dir.path().join(tag);
        let status = Command::new(env!("CARGO_BIN_EXE_fedfft"))
            .args(["run", config.to_str()?, "--out", out.to_str()?])
            .env("FEDFFT_THREADS", threads)
            .status()
            .ok()?;
        if !status.success() {
            return None;
        }
        std::fs::read(Path::new(&out).join("rounds.csv")).ok()
    };
    let outputs: Vec<Option<Vec<u8>>> = ["1", "1", "4", "4", "16", "16"]
        .iter()
        .enumerate()
        .map(|(i, t)| run(t, &format!("run{i}")))
        .collect();
    let all_ran = outputs.iter().all(Option::is_some);
    let identical = all_ran && outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        identical,
        format!(
            "6 invocations (FEDFFT_THREADS 1,1,4,4,16,16): {}",
            if !all_ran {
                "a run failed"
            } else if identical {
                "byte-identical CSV"
            } else {
                "CSV differs"
            }
        ),
    )
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 11] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    let mut failed = Vec::new();
    for (n, check) in criteria {
        let o = check();
        println!(
            "criterion {n:>2} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.passed {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: {} of 11 criteria fail: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
