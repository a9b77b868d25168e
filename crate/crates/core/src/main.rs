use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedfft::detector::DetectorConfig;
use fedfft::fedsim::AggregatorSpec;
use fedfft::fft_aggregator::FftStrategy;
use fedfft::runner::{self, AggregateMethod, RunnerError, SweepSpec};

#[derive(Parser)]
#[command(name = "fedfft", version, about = "Robust federated aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write rounds.csv and summary.json.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config over a grid of attacker fractions or detector thresholds.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Aggregator short names, e.g. fedavg,fft,median,trimmed_mean,krum,dynamic.
        #[arg(long, value_delimiter = ',')]
        aggregators: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate weight dumps offline.
    Aggregate {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Values trimmed per side (trimmed_mean).
        #[arg(long, default_value_t = 0)]
        trim: usize,
        /// Declared attacker count (krum).
        #[arg(long, default_value_t = 0)]
        f: usize,
        /// KDE grid size (fft, dynamic).
        #[arg(long, default_value_t = fedfft::spectral::DEFAULT_GRID_SIZE)]
        grid: usize,
        /// Coordinate selection rule (fft, dynamic).
        #[arg(long, value_enum, default_value_t = StrategyArg::Kde)]
        fft_strategy: StrategyArg,
        /// Detector threshold (dynamic).
        #[arg(long, default_value_t = 0.02)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Two-sample K-S test on two files of newline-separated numbers.
    KsTest { a: PathBuf, b: PathBuf },
    /// Run the oracle suites.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Fedavg,
    Median,
    TrimmedMean,
    Krum,
    Fft,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Literal,
    Kde,
}

fn init_threads() {
    let threads = match std::env::var("FEDFFT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                log::warn!("ignoring FEDFFT_THREADS={v:?}: not a non-negative integer");
                0
            }
        },
        Err(_) => 0,
    };
    fedfft::par::init_global(threads);
}

fn fail(e: RunnerError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads();
    match cli.command {
        Command::Run { config, out } => match runner::cmd_run(&config, out.as_deref()) {
            Ok(_) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::Sweep {
            config,
            fractions,
            thresholds,
            aggregators,
            out,
        } => {
            let aggregators = match aggregators {
                None => None,
                Some(names) => {
                    let mut specs = Vec::new();
                    for n in names {
                        match AggregatorSpec::from_name(&n) {
                            Some(s) => specs.push(s),
                            None => return fail(RunnerError::Config(format!("unknown aggregator {n:?}"))),
                        }
                    }
                    Some(specs)
                }
            };
            let spec = SweepSpec {
                fractions,
                thresholds,
                aggregators,
            };
            match runner::cmd_sweep(&config, &spec, out.as_deref()) {
                Ok(m) => {
                    let mut buf = Vec::new();
                    if m.write_csv(&mut buf).is_ok() {
                        print!("{}", String::from_utf8_lossy(&buf));
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Aggregate {
            inputs,
            method,
            out,
            trim,
            f,
            grid,
            fft_strategy,
            threshold,
            seed,
        } => {
            let strategy = match fft_strategy {
                StrategyArg::Literal => FftStrategy::literal(),
                StrategyArg::Kde => FftStrategy::KdeMode { grid_size: grid },
            };
            let method = match method {
                Method::Fedavg => AggregateMethod::FedAvg,
                Method::Median => AggregateMethod::Median,
                Method::TrimmedMean => AggregateMethod::TrimmedMean { n: trim },
                Method::Krum => AggregateMethod::Krum { f },
                Method::Fft => AggregateMethod::Fft(strategy),
                Method::Dynamic => AggregateMethod::Dynamic {
                    detector: DetectorConfig {
                        threshold,
                        ..DetectorConfig::default()
                    },
                    strategy,
                    seed,
                },
            };
            match runner::cmd_aggregate(&inputs, &method, &out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::KsTest { a, b } => match runner::cmd_ks_test(&a, &b) {
            Ok(text) => {
                println!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Selftest => match runner::cmd_selftest() {
            Ok(lines) => {
                lines.iter().for_each(|l| println!("{l}"));
                ExitCode::SUCCESS
            }
            Err((lines, e)) => {
                lines.iter().for_each(|l| println!("{l}"));
                fail(e)
            }
        },
    }
}
