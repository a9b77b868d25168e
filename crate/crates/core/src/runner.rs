//! Subcommand implementations behind the `fedfft` binary: experiment runs,
//! parameter sweeps, offline aggregation of weight dumps and the K-S and
//! self-test utilities.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AttackKind;
use crate::aggregators::{coordinate_median, fed_avg, krum, trimmed_mean, KrumParam, TrimParam};
use crate::detector::{dynamic_aggregate, ks_test, DetectorConfig};
use crate::error::Error;
use crate::fedsim::{run_experiment, AggregatorSpec, RoundRecord, SyntheticTask, TrainConfig};
use crate::fft_aggregator::{fft_aggregate, FftStrategy};
use crate::oracles::run_selftest;
use crate::par;
use crate::seeding::substream;
use crate::tensors::{ClientUpdate, ModelWeights};

pub const CSV_HEADER: [&str; 10] = [
    "round",
    "repeat",
    "aggregator",
    "attack",
    "fraction",
    "decision",
    "detector_score",
    "accuracy",
    "loss",
    "wall_ms",
];

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    SelfTest(String),
}

impl RunnerError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::Input(_) => 2,
            RunnerError::Runtime(_) => 3,
            RunnerError::Shape(_) => 4,
            RunnerError::SelfTest(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> RunnerError {
    RunnerError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: SyntheticTask,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_repeats() -> usize {
    5
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RunnerError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text =
            fs::read_to_string(path).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.repeats == 0 {
            return Err(RunnerError::Config("repeats must be at least 1".into()));
        }
        let wrap = |e: Error| RunnerError::Config(e.to_string());
        self.task.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracySummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub std: f64,
    pub per_repeat: Vec<f64>,
}

impl AccuracySummary {
    fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            per_repeat: values,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub final_accuracy: AccuracySummary,
    pub final_loss: AccuracySummary,
}

/// Records of every repeat, in repeat order. Repeat `r` uses training seed
/// `train.seed + r` on the same task.
pub fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<Vec<RoundRecord>>, RunnerError> {
    par::try_map_indexed(cfg.repeats, |r| {
        let train = TrainConfig {
            seed: cfg.train.seed.wrapping_add(r as u64),
            ..cfg.train.clone()
        };
        run_experiment(&train, &cfg.task)
    })
    .map_err(runtime)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_rounds_csv<W: std::io::Write>(
    out: W,
    cfg: &ExperimentConfig,
    runs: &[Vec<RoundRecord>],
) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(runtime)?;
    let aggregator = cfg.train.aggregator.label();
    let attack = cfg.train.attack.kind.label();
    let fraction = if cfg.train.attack.kind == AttackKind::None {
        0.0
    } else {
        cfg.train.attack.fraction
    };
    for (repeat, records) in runs.iter().enumerate() {
        for r in records {
            w.write_record([
                r.round.to_string(),
                repeat.to_string(),
                aggregator.to_string(),
                attack.to_string(),
                fmt_f64(fraction),
                r.decision_label().to_string(),
                r.detector_score.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.global_accuracy),
                fmt_f64(r.global_loss),
                r.wall_ms.to_string(),
            ])
            .map_err(runtime)?;
        }
    }
    w.flush().map_err(runtime)
}

pub fn summarize(cfg: &ExperimentConfig, runs: &[Vec<RoundRecord>]) -> RunSummary {
    let last =
        |f: fn(&RoundRecord) -> f64| -> Vec<f64> { runs.iter().map(|r| r.last().map_or(0.0, f)).collect() };
    RunSummary {
        config: cfg.clone(),
        final_accuracy: AccuracySummary::from_values(last(|r| r.global_accuracy)),
        final_loss: AccuracySummary::from_values(last(|r| r.global_loss)),
    }
}

/// Runs the experiment and writes `rounds.csv` and `summary.json` into
/// `output_dir`.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunSummary, RunnerError> {
    let runs = run_repeats(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(runtime)?;
    let csv_file = fs::File::create(cfg.output_dir.join("rounds.csv")).map_err(runtime)?;
    write_rounds_csv(std::io::BufWriter::new(csv_file), cfg, &runs)?;
    let summary = summarize(cfg, &runs);
    let json = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    fs::write(cfg.output_dir.join("summary.json"), json + "\n").map_err(runtime)?;
    Ok(summary)
}

pub fn cmd_run(config_path: &Path, output_dir: Option<&Path>) -> Result<RunSummary, RunnerError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    let summary = execute(&cfg)?;
    log::info!(
        "final accuracy {:.4} +/- {:.4} over {} repeats",
        summary.final_accuracy.mean,
        summary.final_accuracy.std,
        cfg.repeats
    );
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct SweepSpec {
    pub fractions: Option<Vec<f64>>,
    pub thresholds: Option<Vec<f64>>,
    pub aggregators: Option<Vec<AggregatorSpec>>,
}

/// Grid results: one row per grid value, one column per series.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepMatrix {
    pub row_name: String,
    pub rows: Vec<f64>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl SweepMatrix {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), RunnerError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![self.row_name.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(runtime)?;
        for (value, cells) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![fmt_f64(*value)];
            rec.extend(cells.iter().map(|c| fmt_f64(*c)));
            w.write_record(&rec).map_err(runtime)?;
        }
        w.flush().map_err(runtime)
    }
}

fn label_slug(v: f64) -> String {
    fmt_f64(v).replace('.', "p")
}

/// Fraction sweeps put aggregators in the columns. Threshold sweeps use the
/// base config's dynamic aggregator and put attacker fractions in the
/// columns (the base fraction when none are given).
pub fn sweep(base: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepMatrix, RunnerError> {
    struct Point {
        row: usize,
        col: usize,
        cfg: ExperimentConfig,
    }
    let mut points = Vec::new();
    let matrix_shape;
    if let Some(thresholds) = &spec.thresholds {
        let AggregatorSpec::Dynamic { detector, strategy } = base.train.aggregator else {
            return Err(RunnerError::Config(
                "a threshold sweep needs a dynamic aggregator".into(),
            ));
        };
        let fractions = spec
            .fractions
            .clone()
            .unwrap_or_else(|| vec![base.train.attack.fraction]);
        for (row, &t) in thresholds.iter().enumerate() {
            for (col, &f) in fractions.iter().enumerate() {
                let mut cfg = base.clone();
                cfg.train.aggregator = AggregatorSpec::Dynamic {
                    detector: DetectorConfig {
                        threshold: t,
                        ..detector
                    },
                    strategy,
                };
                cfg.train.attack.fraction = f;
                cfg.output_dir =
                    base.output_dir
                        .join(format!("threshold_{}_fraction_{}", label_slug(t), label_slug(f)));
                points.push(Point { row, col, cfg });
            }
        }
        matrix_shape = (
            "threshold".to_string(),
            thresholds.clone(),
            fractions
                .iter()
                .map(|f| format!("fraction={}", fmt_f64(*f)))
                .collect::<Vec<_>>(),
        );
    } else {
        let fractions = spec
            .fractions
            .clone()
            .unwrap_or_else(|| vec![base.train.attack.fraction]);
        let aggregators = spec
            .aggregators
            .clone()
            .unwrap_or_else(|| vec![base.train.aggregator]);
        for (row, &f) in fractions.iter().enumerate() {
            for (col, agg) in aggregators.iter().enumerate() {
                let mut cfg = base.clone();
                cfg.train.attack.fraction = f;
                cfg.train.aggregator = *agg;
                cfg.output_dir = base.output_dir.join(format!(
                    "fraction_{}_{}",
                    label_slug(f),
                    agg.label().to_ascii_lowercase()
                ));
                points.push(Point { row, col, cfg });
            }
        }
        matrix_shape = (
            "fraction".to_string(),
            fractions,
            aggregators
                .iter()
                .map(|a| a.label().to_string())
                .collect::<Vec<_>>(),
        );
    }
    for p in &points {
        p.cfg.validate()?;
    }
    let (row_name, rows, columns) = matrix_shape;
    let mut cells = vec![vec![f64::NAN; columns.len()]; rows.len()];
    for p in &points {
        cells[p.row][p.col] = execute(&p.cfg)?.final_accuracy.mean;
    }
    Ok(SweepMatrix {
        row_name,
        rows,
        columns,
        cells,
    })
}

pub fn cmd_sweep(
    config_path: &Path,
    spec: &SweepSpec,
    output_dir: Option<&Path>,
) -> Result<SweepMatrix, RunnerError> {
    let mut base = ExperimentConfig::load(config_path)?;
    if let Some(dir) = output_dir {
        base.output_dir = dir.to_path_buf();
    }
    let matrix = sweep(&base, spec)?;
    fs::create_dir_all(&base.output_dir).map_err(runtime)?;
    let name = if spec.thresholds.is_some() {
        "sweep_thresholds.csv"
    } else {
        "sweep_fractions.csv"
    };
    let file = fs::File::create(base.output_dir.join(name)).map_err(runtime)?;
    matrix.write_csv(std::io::BufWriter::new(file))?;
    Ok(matrix)
}

/// Offline aggregation methods for weight dumps.
#[derive(Debug, Clone, PartialEq)]
pub enum AggregateMethod {
    FedAvg,
    Median,
    TrimmedMean {
        n: usize,
    },
    Krum {
        f: usize,
    },
    Fft(FftStrategy),
    Dynamic {
        detector: DetectorConfig,
        strategy: FftStrategy,
        seed: u64,
    },
}

pub fn load_dump(path: &Path) -> Result<ModelWeights, RunnerError> {
    let text =
        fs::read_to_string(path).map_err(|e| RunnerError::Input(format!("{}: {e}", path.display())))?;
    ModelWeights::from_dump_json(&text).map_err(|e| RunnerError::Input(format!("{}: {e}", path.display())))
}

/// Aggregates dumps with equal weights. Shape disagreements map to
/// [`RunnerError::Shape`].
pub fn aggregate_dumps(
    dumps: Vec<ModelWeights>,
    method: &AggregateMethod,
) -> Result<ModelWeights, RunnerError> {
    if dumps.is_empty() {
        return Err(RunnerError::Input("no input dumps".into()));
    }
    // with a single dump every method's answer is that dump; Krum and the
    // detector would otherwise reject K = 1
    if dumps.len() == 1 {
        return Ok(dumps.into_iter().next().expect("one dump"));
    }
    let updates: Vec<ClientUpdate> = dumps
        .into_iter()
        .enumerate()
        .map(|(k, w)| ClientUpdate::new(k, w, 1))
        .collect::<Result<_, _>>()
        .map_err(runtime)?;
    let result = match method {
        AggregateMethod::FedAvg => fed_avg(&updates),
        AggregateMethod::Median => coordinate_median(&updates),
        AggregateMethod::TrimmedMean { n } => trimmed_mean(&updates, TrimParam { n: *n }),
        AggregateMethod::Krum { f } => krum(&updates, KrumParam { f: *f }),
        AggregateMethod::Fft(strategy) => fft_aggregate(&updates, strategy),
        AggregateMethod::Dynamic {
            detector,
            strategy,
            seed,
        } => dynamic_aggregate(&updates, detector, strategy, &mut substream(*seed, &[])).map(|o| o.weights),
    };
    result.map_err(|e| match e {
        Error::ShapeMismatch { .. } => RunnerError::Shape(e.to_string()),
        other => runtime(other),
    })
}

pub fn cmd_aggregate(inputs: &[PathBuf], method: &AggregateMethod, out: &Path) -> Result<(), RunnerError> {
    let dumps = inputs
        .iter()
        .map(|p| load_dump(p))
        .collect::<Result<Vec<_>, _>>()?;
    let merged = aggregate_dumps(dumps, method)?;
    fs::write(out, merged.to_dump_json()).map_err(runtime)
}

pub fn read_numbers(path: &Path) -> Result<Vec<f64>, RunnerError> {
    let text =
        fs::read_to_string(path).map_err(|e| RunnerError::Input(format!("{}: {e}", path.display())))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                RunnerError::Input(format!(
                    "{}: value {} is not a finite number: {l:?}",
                    path.display(),
                    i + 1
                ))
            })
        })
        .collect()
}

/// Returns the two output lines, statistic then p-value.
pub fn cmd_ks_test(a: &Path, b: &Path) -> Result<String, RunnerError> {
    let xs = read_numbers(a)?;
    let ys = read_numbers(b)?;
    let r = ks_test(&xs, &ys).map_err(|e| RunnerError::Input(e.to_string()))?;
    Ok(format!("statistic {:.6}\np_value {:.6}", r.statistic, r.p_value))
}

/// Runs every oracle suite and returns the report lines.
pub fn cmd_selftest() -> Result<Vec<String>, (Vec<String>, RunnerError)> {
    let reports = run_selftest();
    let lines: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "{} {}: {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            )
        })
        .collect();
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        Ok(lines)
    } else {
        Err((
            lines,
            RunnerError::SelfTest(format!("{failed} of {} suites failed", reports.len())),
        ))
    }
}
