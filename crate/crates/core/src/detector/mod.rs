//! The in-enclave detector: timing model, calibration, prime/probe and the
//! window classifiers.

mod calibration;
mod classify;
mod config;
mod estimate;
mod runtime;
mod timing;

pub use calibration::{detect_anomaly, AnomalyReason, Band, Calibration, ReadingClass, BAND_WIDTH};
pub use classify::{
    classify_naive_bayes, classify_threshold, Confusion, Features, NaiveBayes, Observation, ObservationWindow, Verdict,
};
pub use config::{ladder, ways_for_instances, DetectorConfig, LADDER};
pub use estimate::{estimate_clone_count, spawn_instances, CloneEstimate};
pub use runtime::{Classifier, Detector, PassResult, ProbeOrder, CALIBRATION_SAMPLES};
pub use timing::{ClockOracle, ClockPerturbation, Gaussian, LatencyModel};
