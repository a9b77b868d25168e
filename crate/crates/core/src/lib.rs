//! Byzantine-robust federated aggregation: coordinate-wise and distance-based
//! robust aggregators, FFT density-mode aggregation, a Kolmogorov-Smirnov
//! malicious-presence detector that switches between FedAvg and FFT, model
//! poisoning attacks and a small federated training simulator.

pub mod adversary;
pub mod aggregators;
pub mod detector;
pub mod error;
pub mod fedsim;
pub mod fft_aggregator;
pub mod oracles;
pub mod par;
pub mod runner;
pub mod seeding;
pub mod spectral;
pub mod tensors;

pub use error::{Error, Result};
