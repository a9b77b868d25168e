//! Desk-scale federated training simulator.

pub mod data;
pub mod experiment;
pub mod mlp;

pub use data::{gen_task, ClientData, Dataset, SyntheticTask, TaskData};
pub use experiment::{
    run_experiment, simulation_detector, AggregatorSpec, Experiment, RoundRecord, TrainConfig,
};
pub use mlp::{grad_check, local_update, MlpDims, MlpModel};
