use serde::{Deserialize, Serialize};

use super::calibration::{detect_anomaly, AnomalyReason, Calibration};
use crate::error::{Error, Result};

/// One timed probe access.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Reading above the calibrated threshold.
    pub miss: bool,
    pub reading: f64,
    /// What the cache really did. Metrics only.
    pub truth: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub observations: Vec<Observation>,
}

impl ObservationWindow {
    pub fn new(observations: Vec<Observation>) -> Self {
        ObservationWindow { observations }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn misses(&self) -> usize {
        self.observations.iter().filter(|o| o.miss).count()
    }

    pub fn max_run(&self) -> usize {
        let (mut best, mut cur) = (0, 0);
        for o in &self.observations {
            cur = if o.miss { cur + 1 } else { 0 };
            best = best.max(cur);
        }
        best
    }

    pub fn readings(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.reading).collect()
    }

    pub fn features(&self) -> Features {
        Features([self.misses() as f64, self.max_run() as f64])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    NoClone,
    CloneDetected,
    Anomaly(AnomalyReason),
}

impl Verdict {
    /// Anything but NoClone stops the enclave.
    pub fn is_alarm(self) -> bool {
        self != Verdict::NoClone
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::NoClone => f.write_str("no_clone"),
            Verdict::CloneDetected => f.write_str("clone_detected"),
            Verdict::Anomaly(r) => write!(f, "anomaly:{r}"),
        }
    }
}

pub fn classify_threshold(window: &ObservationWindow, t: usize, cal: &Calibration) -> Verdict {
    if let Some(r) = detect_anomaly(&window.readings(), cal) {
        return Verdict::Anomaly(r);
    }
    if window.misses() >= t {
        Verdict::CloneDetected
    } else {
        Verdict::NoClone
    }
}

/// Miss count and longest run of consecutive misses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Features(pub [f64; 2]);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct ClassStats {
    prior: f64,
    mean: [f64; 2],
    var: [f64; 2],
}

/// Gaussian naive Bayes over window features, clone vs clean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayes {
    clean: ClassStats,
    clone: ClassStats,
}

const VAR_SMOOTHING: f64 = 1e-9;

impl NaiveBayes {
    pub fn train(samples: &[(Features, bool)]) -> Result<NaiveBayes> {
        let total = samples.len() as f64;
        let stats = |label: bool| -> Option<ClassStats> {
            let xs: Vec<&Features> = samples.iter().filter(|s| s.1 == label).map(|s| &s.0).collect();
            if xs.is_empty() {
                return None;
            }
            let n = xs.len() as f64;
            let mut mean = [0.0; 2];
            let mut var = [0.0; 2];
            for k in 0..2 {
                mean[k] = xs.iter().map(|f| f.0[k]).sum::<f64>() / n;
                var[k] = xs.iter().map(|f| (f.0[k] - mean[k]).powi(2)).sum::<f64>() / n;
            }
            Some(ClassStats { prior: n / total, mean, var })
        };
        let (Some(mut clean), Some(mut clone)) = (stats(false), stats(true)) else {
            return Err(Error::Untrained);
        };
        // same smoothing rule as the usual Gaussian NB: a fraction of the
        // largest feature variance, floored so constant data still works
        let feature_var = (0..2)
            .map(|k| {
                let xs: Vec<f64> = samples.iter().map(|s| s.0 .0[k]).collect();
                let m = xs.iter().sum::<f64>() / total;
                xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / total
            })
            .fold(0.0, f64::max);
        let eps = (VAR_SMOOTHING * feature_var).max(VAR_SMOOTHING);
        for c in [&mut clean, &mut clone] {
            for v in &mut c.var {
                *v += eps;
            }
        }
        Ok(NaiveBayes { clean, clone })
    }

    fn log_joint(c: &ClassStats, f: &Features) -> f64 {
        let mut l = c.prior.ln();
        for k in 0..2 {
            let v = c.var[k];
            l += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (f.0[k] - c.mean[k]).powi(2) / (2.0 * v);
        }
        l
    }

    /// P(clone | features).
    pub fn posterior(&self, f: &Features) -> f64 {
        let a = Self::log_joint(&self.clone, f);
        let b = Self::log_joint(&self.clean, f);
        1.0 / (1.0 + (b - a).exp())
    }
}

pub fn classify_naive_bayes(window: &ObservationWindow, model: Option<&NaiveBayes>, cal: &Calibration) -> Result<Verdict> {
    let model = model.ok_or(Error::Untrained)?;
    if let Some(r) = detect_anomaly(&window.readings(), cal) {
        return Ok(Verdict::Anomaly(r));
    }
    Ok(if model.posterior(&window.features()) > 0.5 { Verdict::CloneDetected } else { Verdict::NoClone })
}

/// Counts over labelled verdicts. Positive = alarm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, verdict: Verdict, clone_present: bool) {
        match (verdict.is_alarm(), clone_present) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn ratio(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        Self::ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> f64 {
        Self::ratio(self.fn_, self.fn_ + self.tp)
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::detector::calibration::Band;

    fn cal() -> Calibration {
        Calibration {
            hit: Band { mean: 100.0, sd: 8.0 },
            miss: Band { mean: 450.0, sd: 25.0 },
            threshold: 275.0,
            at: 0.0,
        }
    }

    fn window(bits: &[bool]) -> ObservationWindow {
        ObservationWindow::new(
            bits.iter().map(|&m| Observation { miss: m, reading: if m { 450.0 } else { 100.0 }, truth: m }).collect(),
        )
    }

    #[test]
    fn threshold_rule() {
        let c = cal();
        assert_eq!(classify_threshold(&window(&[false; 64]), 1, &c), Verdict::NoClone);
        let mut bits = [false; 64];
        bits[10] = true;
        bits[40] = true;
        assert_eq!(classify_threshold(&window(&bits), 2, &c), Verdict::CloneDetected);
        assert_eq!(classify_threshold(&window(&bits), 3, &c), Verdict::NoClone);
    }

    #[test]
    fn out_of_band_overrides_count() {
        let mut w = window(&[true; 8]);
        w.observations[3].reading = 200.0;
        assert_eq!(classify_threshold(&w, 1, &cal()), Verdict::Anomaly(AnomalyReason::OutOfBandLatency));
    }

    #[test]
    fn features_and_runs() {
        let w = window(&[true, true, false, true, true, true, false]);
        assert_eq!(w.misses(), 5);
        assert_eq!(w.max_run(), 3);
    }

    #[test]
    fn untrained_model() {
        assert_eq!(classify_naive_bayes(&window(&[false]), None, &cal()), Err(Error::Untrained));
        let only_clean = vec![(Features([0.0, 0.0]), false)];
        assert_eq!(NaiveBayes::train(&only_clean), Err(Error::Untrained));
    }

    #[test]
    fn symmetric_classes_meet_at_half() {
        let mut s = Vec::new();
        for x in [0.0, 2.0, 4.0] {
            s.push((Features([x, x]), false));
            s.push((Features([x + 10.0, x + 10.0]), true));
        }
        let nb = NaiveBayes::train(&s).unwrap();
        assert!((nb.posterior(&Features([7.0, 7.0])) - 0.5).abs() < 1e-12);
        assert!(nb.posterior(&Features([12.0, 12.0])) > 0.99);
    }

    #[test]
    fn confusion_metrics() {
        let c = Confusion { tp: 8, fp: 1, tn: 9, fn_: 2 };
        assert!((c.fpr() - 0.1).abs() < 1e-12);
        assert!((c.fnr() - 0.2).abs() < 1e-12);
        let p = c.precision();
        let r = c.recall();
        assert!((c.f1() - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert_eq!(Confusion::default().f1(), 0.0);
    }

    proptest! {
        /// Clean windows never miss, clone windows always do: the learned
        /// model must agree with t=1 everywhere.
        #[test]
        fn separable_training_matches_threshold(
            clone_windows in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 32), 5..30),
            probes in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 32), 1..40),
        ) {
            let mut data: Vec<(Features, bool)> = (0..10).map(|_| (window(&[false; 32]).features(), false)).collect();
            for mut bits in clone_windows {
                bits[0] = true;
                data.push((window(&bits).features(), true));
            }
            let nb = NaiveBayes::train(&data).unwrap();
            let c = cal();
            for bits in probes {
                let w = window(&bits);
                prop_assert_eq!(classify_naive_bayes(&w, Some(&nb), &c).unwrap(), classify_threshold(&w, 1, &c));
            }
        }
    }
}
