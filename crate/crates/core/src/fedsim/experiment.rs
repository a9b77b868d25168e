//! Server round loop: broadcast, local training, attack, aggregation,
//! evaluation.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{gen_task, SyntheticTask, TaskData};
use super::mlp::{local_update, MlpDims, MlpModel};
use crate::adversary::{apply_attack, choose_attackers, AttackSpec};
use crate::aggregators::{
    coordinate_median, fed_avg, krum_select, trimmed_mean, trimmed_mean_weighted, KrumParam, TrimParam,
};
use crate::detector::{dynamic_aggregate, Decision, DetectorConfig};
use crate::error::{Error, Result};
use crate::fft_aggregator::{fft_aggregate, FftStrategy};
use crate::par;
use crate::seeding::{purpose, substream};
use crate::tensors::{ClientUpdate, ModelWeights};

/// Detector settings used by the simulator when a config leaves them out:
/// the library defaults, evaluated on a quarter of the coordinates.
pub fn simulation_detector() -> DetectorConfig {
    DetectorConfig {
        coordinate_fraction: 0.25,
        ..DetectorConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    #[serde(rename = "fedavg")]
    FedAvg,
    Median,
    /// `n: None` trims as many values per side as there are attackers.
    TrimmedMean {
        #[serde(default)]
        n: Option<usize>,
        #[serde(default)]
        weighted: bool,
    },
    /// `f: None` declares the true attacker count.
    Krum {
        #[serde(default)]
        f: Option<usize>,
    },
    Fft {
        #[serde(default)]
        strategy: FftStrategy,
    },
    Dynamic {
        #[serde(default = "simulation_detector")]
        detector: DetectorConfig,
        #[serde(default)]
        strategy: FftStrategy,
    },
}

impl AggregatorSpec {
    pub fn label(&self) -> &'static str {
        match self {
            AggregatorSpec::FedAvg => "FedAvg",
            AggregatorSpec::Median => "Median",
            AggregatorSpec::TrimmedMean { .. } => "TrimmedMean",
            AggregatorSpec::Krum { .. } => "Krum",
            AggregatorSpec::Fft { .. } => "FFT",
            AggregatorSpec::Dynamic { .. } => "Dynamic",
        }
    }

    /// Parses the short names accepted on the command line.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "fedavg" => AggregatorSpec::FedAvg,
            "median" => AggregatorSpec::Median,
            "trimmed_mean" | "trimmedmean" => AggregatorSpec::TrimmedMean {
                n: None,
                weighted: false,
            },
            "krum" => AggregatorSpec::Krum { f: None },
            "fft" => AggregatorSpec::Fft {
                strategy: FftStrategy::default(),
            },
            "fft_literal" => AggregatorSpec::Fft {
                strategy: FftStrategy::literal(),
            },
            "dynamic" => AggregatorSpec::Dynamic {
                detector: simulation_detector(),
                strategy: FftStrategy::default(),
            },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub aggregator: AggregatorSpec,
    pub attack: AttackSpec,
    pub seed: u64,
    /// Fill `wall_ms`; off by default so metric files stay reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            epochs: 2,
            batch_size: 32,
            learning_rate: 0.05,
            hidden: 16,
            aggregator: AggregatorSpec::FedAvg,
            attack: AttackSpec::default(),
            seed: 0,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.rounds == 0 || self.epochs == 0 {
            return bad("rounds and epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch_size and hidden must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be a non-negative real",
                self.learning_rate
            ));
        }
        self.attack.validate()?;
        if let AggregatorSpec::Dynamic { detector, .. } = &self.aggregator {
            detector.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    /// Only set by the dynamic aggregator.
    pub decision: Option<Decision>,
    pub detector_score: Option<f64>,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub wall_ms: u64,
    /// Attackers that misbehaved this round.
    pub active_attackers: usize,
    /// Client chosen by Krum, and whether it was an attacker.
    pub krum_choice: Option<(usize, bool)>,
}

impl RoundRecord {
    pub fn decision_label(&self) -> &'static str {
        self.decision.map_or("n/a", |d| d.label())
    }
}

/// A run in progress. [`run_experiment`] drives it to completion; tests
/// and tools can step it and inspect the global model between rounds.
pub struct Experiment {
    cfg: TrainConfig,
    data: TaskData,
    global: MlpModel,
    attackers: BTreeSet<usize>,
    round: usize,
}

impl Experiment {
    pub fn new(cfg: &TrainConfig, task: &SyntheticTask) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        let data = gen_task(task, &mut substream(task.seed, &[purpose::TASK]))?;
        let dims = MlpDims {
            input: task.dim,
            hidden: cfg.hidden,
            classes: task.classes,
        };
        let global = MlpModel::glorot(dims, &mut substream(cfg.seed, &[purpose::INIT]));
        let count = cfg.attack.attacker_count(task.clients);
        let attackers = choose_attackers(
            task.clients,
            count,
            &mut substream(cfg.seed, &[purpose::ATTACKER_SET]),
        );
        let exp = Self {
            cfg: cfg.clone(),
            data,
            global,
            attackers,
            round: 0,
        };
        // surface parameter errors before any training happens
        match exp.cfg.aggregator {
            AggregatorSpec::TrimmedMean { n, .. } => exp.trim_param(n).check(task.clients)?,
            AggregatorSpec::Krum { f } => {
                exp.krum_param(f).neighbours(task.clients)?;
            }
            AggregatorSpec::Dynamic { detector, .. } if detector.subset_size >= task.clients => {
                return Err(Error::SubsetTooLarge {
                    subset: detector.subset_size,
                    clients: task.clients,
                })
            }
            _ => {}
        }
        Ok(exp)
    }

    pub fn global(&self) -> &MlpModel {
        &self.global
    }

    pub fn attackers(&self) -> &BTreeSet<usize> {
        &self.attackers
    }

    pub fn data(&self) -> &TaskData {
        &self.data
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    fn trim_param(&self, n: Option<usize>) -> TrimParam {
        TrimParam {
            n: n.unwrap_or(self.attackers.len()),
        }
    }

    fn krum_param(&self, f: Option<usize>) -> KrumParam {
        KrumParam {
            f: f.unwrap_or(self.attackers.len()),
        }
    }

    fn client_updates(&self) -> Result<Vec<ClientUpdate>> {
        let round = self.round as u64;
        par::try_map_indexed(self.data.clients.len(), |k| {
            let mut rng = substream(self.cfg.seed, &[purpose::CLIENT, round, k as u64]);
            local_update(
                &self.global,
                &self.data.clients[k].train,
                self.cfg.epochs,
                self.cfg.batch_size,
                self.cfg.learning_rate,
                k,
                &mut rng,
            )
        })
    }

    /// Runs one round and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        self.round += 1;
        let round = self.round as u64;
        let honest = self.client_updates()?;

        let active = self.cfg.attack.active_in(self.round) && !self.attackers.is_empty();
        let updates = if active {
            let mut rng = substream(self.cfg.seed, &[purpose::ATTACK, round]);
            apply_attack(&honest, &self.cfg.attack, &self.attackers, &mut rng)?
        } else {
            honest
        };

        let mut decision = None;
        let mut detector_score = None;
        let mut krum_choice = None;
        let weights: ModelWeights = match &self.cfg.aggregator {
            AggregatorSpec::FedAvg => fed_avg(&updates)?,
            AggregatorSpec::Median => coordinate_median(&updates)?,
            AggregatorSpec::TrimmedMean { n, weighted } => {
                let p = self.trim_param(*n);
                if *weighted {
                    trimmed_mean_weighted(&updates, p)?
                } else {
                    trimmed_mean(&updates, p)?
                }
            }
            AggregatorSpec::Krum { f } => {
                let sel = krum_select(&updates, self.krum_param(*f))?;
                let chosen = &updates[sel.index];
                krum_choice = Some((
                    chosen.client_id,
                    active && self.attackers.contains(&chosen.client_id),
                ));
                chosen.weights.clone()
            }
            AggregatorSpec::Fft { strategy } => fft_aggregate(&updates, strategy)?,
            AggregatorSpec::Dynamic { detector, strategy } => {
                let mut rng = substream(self.cfg.seed, &[purpose::AGGREGATE, round]);
                let out = dynamic_aggregate(&updates, detector, strategy, &mut rng)?;
                decision = Some(out.decision);
                detector_score = Some(out.score);
                out.weights
            }
        };
        self.global = MlpModel::from_weights(self.global.dims, weights)?;

        let (global_loss, global_accuracy) = self.global.evaluate(&self.data.global_test);
        let wall_ms = if self.cfg.record_timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(RoundRecord {
            round: self.round,
            decision,
            detector_score,
            global_accuracy,
            global_loss,
            wall_ms,
            active_attackers: if active { self.attackers.len() } else { 0 },
            krum_choice,
        })
    }
}

pub fn run_experiment(cfg: &TrainConfig, task: &SyntheticTask) -> Result<Vec<RoundRecord>> {
    let mut exp = Experiment::new(cfg, task)?;
    (0..cfg.rounds).map(|_| exp.step()).collect()
}
