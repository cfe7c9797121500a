use serde::{Deserialize, Serialize};

use crate::cache_model::{CacheGeometry, Replacement};
use crate::detector::{classify_threshold, spawn_instances, DetectorConfig, LatencyModel, ObservationWindow, Verdict};
use crate::error::Result;
use crate::eviction_builder::Channel;
use crate::os_model::World;

/// One seed of the N vs N+1 experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentionReport {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    /// Probe passes by the N instances before the extra one starts.
    pub clean_passes: usize,
    pub clean_misses: usize,
    pub clean_anomalies: usize,
    /// Old instances that lost a line to the newcomer's prime.
    pub victims: usize,
    /// Victims whose next pass was judged CloneDetected.
    pub victims_detected: usize,
    /// Largest first-miss index over the victims' next passes.
    pub worst_first_miss: Option<usize>,
    /// 16 sets per channel times slices.
    pub bound: usize,
}

impl ContentionReport {
    pub fn holds(&self) -> bool {
        self.clean_misses == 0
            && self.clean_anomalies == 0
            && self.victims > 0
            && self.victims_detected == self.victims
            && self.worst_first_miss.is_some_and(|f| f < self.bound)
    }
}

/// N instances at m probe `passes` passes between them (round robin), then
/// instance N+1 primes and each old instance probes once more.
pub fn contention_trial(
    geo: &CacheGeometry,
    policy: Replacement,
    n: usize,
    m: usize,
    passes: usize,
    seed: u64,
) -> Result<ContentionReport> {
    let mut world = World::new(geo.clone(), policy, LatencyModel::default(), seed);
    let cfg = DetectorConfig { m, n, ..Default::default() };
    let channel = Channel::new((seed % 64) as u8)?;
    let mut ds = spawn_instances(&mut world, n + 1, channel, &cfg)?;
    for d in ds.iter_mut().take(n) {
        d.prime(&mut world)?;
    }
    let mut r = ContentionReport {
        n,
        m,
        seed,
        clean_passes: 0,
        clean_misses: 0,
        clean_anomalies: 0,
        victims: 0,
        victims_detected: 0,
        worst_first_miss: None,
        bound: ds[0].monitoring().len(),
    };
    'outer: loop {
        for d in ds.iter_mut().take(n) {
            if r.clean_passes == passes {
                break 'outer;
            }
            let p = d.probe_pass(&mut world)?;
            r.clean_passes += 1;
            r.clean_misses += p.misses;
            r.clean_anomalies += p.anomaly.is_some() as usize;
        }
    }
    ds[n].prime(&mut world)?;
    let victims: Vec<bool> = ds
        .iter()
        .take(n)
        .map(|d| d.resident_per_set(&world).map(|v| v.iter().any(|&k| k < m)))
        .collect::<Result<_>>()?;
    for (k, d) in ds.iter_mut().take(n).enumerate() {
        let p = d.probe_pass(&mut world)?;
        if !victims[k] {
            continue;
        }
        r.victims += 1;
        let cal = *d.calibration().expect("calibrated");
        if classify_threshold(&ObservationWindow::new(p.observations), 1, &cal) == Verdict::CloneDetected {
            r.victims_detected += 1;
        }
        if let Some(f) = p.first_miss {
            r.worst_first_miss = Some(r.worst_first_miss.map_or(f, |w| w.max(f)));
        }
    }
    Ok(r)
}
