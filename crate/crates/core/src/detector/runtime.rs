use serde::{Deserialize, Serialize};

use super::calibration::{detect_anomaly, AnomalyReason, Calibration};
use super::classify::{classify_naive_bayes, classify_threshold, NaiveBayes, Observation, ObservationWindow, Verdict};
use super::config::DetectorConfig;
use crate::cache_model::{ActorId, LINE_BITS};
use crate::error::{Error, Result};
use crate::eviction_builder::MonitoringSet;
use crate::os_model::World;

/// Flush+reload pairs taken per calibration.
pub const CALIBRATION_SAMPLES: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOrder {
    /// Round r touches member r of every set before moving on.
    #[default]
    SetInterleaved,
    /// All m members of one set, then the next set. Diagnostic only.
    ColumnMajor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum Classifier {
    #[default]
    Threshold,
    NaiveBayes(NaiveBayes),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassResult {
    pub observations: Vec<Observation>,
    /// Index of the first access read as a miss.
    pub first_miss: Option<usize>,
    pub misses: usize,
    pub truth_misses: usize,
    pub anomaly: Option<AnomalyReason>,
}

/// One enclave instance running the detector.
#[derive(Clone, Debug)]
pub struct Detector {
    pub actor: ActorId,
    pub config: DetectorConfig,
    pub order: ProbeOrder,
    pub classifier: Classifier,
    monitoring: MonitoringSet,
    ways: usize,
    m: usize,
    calibration: Option<Calibration>,
    reference: Option<Calibration>,
    pending: Vec<Observation>,
    pending_anomaly: Option<AnomalyReason>,
    passes: u64,
}

impl Detector {
    pub fn new(actor: ActorId, monitoring: MonitoringSet, config: DetectorConfig, ways: usize) -> Result<Self> {
        config.validate(ways)?;
        if monitoring.is_empty() {
            return Err(Error::Anomaly(AnomalyReason::CoverageFailure));
        }
        if monitoring.sets.iter().any(|s| s.members.len() < config.m) {
            return Err(Error::Anomaly(AnomalyReason::CoverageFailure));
        }
        let m = config.m;
        Ok(Detector {
            actor,
            config,
            order: ProbeOrder::default(),
            classifier: Classifier::default(),
            monitoring,
            ways,
            m,
            calibration: None,
            reference: None,
            pending: Vec::new(),
            pending_anomaly: None,
            passes: 0,
        })
    }

    pub fn monitoring(&self) -> &MonitoringSet {
        &self.monitoring
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    pub fn passes(&self) -> u64 {
        self.passes
    }

    /// Monitored lines per pass.
    pub fn pass_len(&self) -> usize {
        self.m * self.monitoring.len()
    }

    /// Change the number of monitored ways without the N check. Used when
    /// walking down the counting ladder.
    pub fn set_m(&mut self, m: usize) -> Result<()> {
        if m == 0 || m > self.ways || self.monitoring.sets.iter().any(|s| s.members.len() < m) {
            return Err(Error::Config(format!("m={m} not available with W={}", self.ways)));
        }
        self.m = m;
        Ok(())
    }

    /// Same page as the first monitored line, next channel over, so that
    /// calibrating never touches a monitored set.
    fn calibration_va(&self) -> u64 {
        self.monitoring.sets[0].members[0] ^ (1 << LINE_BITS)
    }

    fn sample_calibration(&self, world: &mut World) -> Result<std::result::Result<Calibration, AnomalyReason>> {
        let va = self.calibration_va();
        let mut hits = Vec::with_capacity(CALIBRATION_SAMPLES);
        let mut misses = Vec::with_capacity(CALIBRATION_SAMPLES);
        for _ in 0..CALIBRATION_SAMPLES {
            world.flush(self.actor, va)?;
            misses.push(world.timed_access(self.actor, va)?.reading());
            hits.push(world.timed_access(self.actor, va)?.reading());
        }
        world.flush(self.actor, va)?;
        Ok(Calibration::from_samples(&hits, &misses, world.now()))
    }

    /// Take the reference calibration. Later recalibrations must agree with it.
    pub fn calibrate(&mut self, world: &mut World) -> Result<Calibration> {
        let c = self.sample_calibration(world)?.map_err(Error::Anomaly)?;
        self.calibration = Some(c);
        self.reference = Some(c);
        Ok(c)
    }

    fn maybe_recalibrate(&mut self, world: &mut World) -> Result<()> {
        let (Some(period), Some(cur), Some(reference)) =
            (self.config.recalibration_period, self.calibration, self.reference)
        else {
            return Ok(());
        };
        if world.now() - cur.at < period {
            return Ok(());
        }
        match self.sample_calibration(world)? {
            Ok(c) if c.consistent_with(&reference) => self.calibration = Some(c),
            Ok(c) => {
                self.calibration = Some(Calibration { at: c.at, ..cur });
                self.pending_anomaly.get_or_insert(AnomalyReason::Calibration);
            }
            Err(r) => {
                self.calibration = Some(Calibration { at: world.now(), ..cur });
                self.pending_anomaly.get_or_insert(r);
            }
        }
        Ok(())
    }

    /// Drop every line of every eviction set, monitored or not.
    pub fn flush_all(&self, world: &mut World) -> Result<()> {
        for s in &self.monitoring.sets {
            for &va in &s.members {
                world.flush(self.actor, va)?;
            }
        }
        Ok(())
    }

    fn probe_vas(&self, order: ProbeOrder) -> Vec<u64> {
        let sets = &self.monitoring.sets;
        let mut out = Vec::with_capacity(self.pass_len());
        match order {
            ProbeOrder::SetInterleaved => {
                for r in 0..self.m {
                    out.extend(sets.iter().map(|s| s.members[r]));
                }
            }
            ProbeOrder::ColumnMajor => {
                for s in sets {
                    out.extend_from_slice(&s.members[..self.m]);
                }
            }
        }
        out
    }

    /// Load the first m members of every set, then check that at least one
    /// of them stayed.
    pub fn prime(&mut self, world: &mut World) -> Result<PassResult> {
        for va in self.probe_vas(ProbeOrder::SetInterleaved) {
            world.access_va(self.actor, va)?;
        }
        let check = self.timed_pass(world, self.order)?;
        if let Some(r) = check.anomaly {
            return Err(Error::Anomaly(r));
        }
        if check.misses == check.observations.len() {
            return Err(Error::Anomaly(AnomalyReason::PrimeFailed));
        }
        Ok(check)
    }

    fn timed_pass(&mut self, world: &mut World, order: ProbeOrder) -> Result<PassResult> {
        let cal = self.calibration.ok_or_else(|| Error::Config("detector is not calibrated".into()))?;
        let vas = self.probe_vas(order);
        let mut observations = Vec::with_capacity(vas.len());
        for va in vas {
            let s = world.timed_access(self.actor, va)?;
            let reading = s.reading();
            observations.push(Observation { miss: cal.is_miss(reading), reading, truth: s.miss });
        }
        let readings: Vec<f64> = observations.iter().map(|o| o.reading).collect();
        Ok(PassResult {
            first_miss: observations.iter().position(|o| o.miss),
            misses: observations.iter().filter(|o| o.miss).count(),
            truth_misses: observations.iter().filter(|o| o.truth).count(),
            anomaly: detect_anomaly(&readings, &cal),
            observations,
        })
    }

    /// One timed sweep over all monitored lines.
    pub fn probe_pass(&mut self, world: &mut World) -> Result<PassResult> {
        self.maybe_recalibrate(world)?;
        let r = self.timed_pass(world, self.order)?;
        self.passes += 1;
        Ok(r)
    }

    /// Index of the first non-resident monitored line in `order`, read off the
    /// cache without touching it. A probe pass would report the same index:
    /// hits before the first miss cannot evict our own lines.
    pub fn first_miss_oracle(&self, world: &World, order: ProbeOrder) -> Result<Option<usize>> {
        let mut out = None;
        for (i, va) in self.probe_vas(order).into_iter().enumerate() {
            let pa = world.translate(self.actor, va)?;
            if !world.cache.is_resident(&world.geo, pa) {
                out = Some(i);
                break;
            }
        }
        Ok(out)
    }

    /// Monitored lines this instance currently holds, per set.
    pub fn resident_per_set(&self, world: &World) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.monitoring.len());
        for s in &self.monitoring.sets {
            let mut n = 0;
            for &va in &s.members[..self.m] {
                if world.cache.is_resident(&world.geo, world.translate(self.actor, va)?) {
                    n += 1;
                }
            }
            out.push(n);
        }
        Ok(out)
    }

    fn classify(&self, window: &ObservationWindow) -> Result<Verdict> {
        let cal = self.calibration.as_ref().ok_or_else(|| Error::Config("detector is not calibrated".into()))?;
        match &self.classifier {
            Classifier::Threshold => Ok(classify_threshold(window, self.config.t, cal)),
            Classifier::NaiveBayes(nb) => classify_naive_bayes(window, Some(nb), cal),
        }
    }

    /// Feed one probe pass into the window buffer; returns each window that
    /// filled up, with its verdict. Windows run across pass boundaries.
    pub fn step(&mut self, world: &mut World) -> Result<Vec<(ObservationWindow, Verdict)>> {
        let pass = self.probe_pass(world)?;
        self.pending.extend(pass.observations);
        let w = self.config.w;
        let mut out = Vec::new();
        while self.pending.len() >= w {
            let rest = self.pending.split_off(w);
            let window = ObservationWindow::new(std::mem::replace(&mut self.pending, rest));
            let v = match self.pending_anomaly.take() {
                Some(r) => Verdict::Anomaly(r),
                None => self.classify(&window)?,
            };
            out.push((window, v));
        }
        Ok(out)
    }

    /// Probe until `windows` windows are classified.
    pub fn monitor(&mut self, world: &mut World, windows: usize) -> Result<Vec<Verdict>> {
        Ok(self.monitor_windows(world, windows)?.into_iter().map(|(_, v)| v).collect())
    }

    pub fn monitor_windows(&mut self, world: &mut World, windows: usize) -> Result<Vec<(ObservationWindow, Verdict)>> {
        let mut out = Vec::with_capacity(windows);
        while out.len() < windows {
            out.extend(self.step(world)?);
        }
        out.truncate(windows);
        Ok(out)
    }

    /// Calibrate and prime. Misses in the prime's own check pass already mean
    /// someone else holds ways in the channel.
    pub fn start(&mut self, world: &mut World) -> Result<Verdict> {
        match self.calibrate(world).and_then(|_| self.prime(world)) {
            Ok(check) if check.misses >= self.config.t => Ok(Verdict::CloneDetected),
            Ok(_) => Ok(Verdict::NoClone),
            Err(Error::Anomaly(a)) => Ok(Verdict::Anomaly(a)),
            Err(e) => Err(e),
        }
    }

    /// One probe pass judged on its own, as done right before a sensitive
    /// operation.
    pub fn check(&mut self, world: &mut World) -> Result<Verdict> {
        let pass = self.probe_pass(world)?;
        if let Some(r) = self.pending_anomaly.take() {
            return Ok(Verdict::Anomaly(r));
        }
        self.classify(&ObservationWindow::new(pass.observations))
    }
}
