//! Forking attacks on toy enclaves, background noise, and the sweep runner.

mod attacks;
mod contention;
mod enclave;
mod experiment;
mod noise;

pub use attacks::{
    instance_sequence, mc_orderings, run_bisgx_attack, run_bisgx_schedule, run_bisgx_single, run_bug_benign,
    run_bug_scenario, run_fim_benign, run_fim_scenario, run_forkvs_benign, run_forkvs_scenario, AttackOutcome, McOp,
    Scenario, FORK_SCHEDULE,
};
pub use contention::{contention_trial, ContentionReport};
pub use enclave::{MonotonicCounter, Program, SealedBlob, SealedStore, ToyEnclave};
pub use experiment::{
    best_threshold, record_trace, run_experiment, CellKey, CellMetrics, ExperimentSpec, GeometrySpec, MetricsTable,
    RunManifest, Trace, TraceConfig, VerdictRow,
};
pub use noise::{noise_workload, NoiseActor, NoiseProfile, NoiseSpec, NoiseTarget, NOISE_ACTOR};
