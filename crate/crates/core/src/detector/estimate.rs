use serde::{Deserialize, Serialize};

use super::config::{ladder, DetectorConfig};
use super::runtime::Detector;
use crate::error::{Error, Result};
use crate::eviction_builder::{default_region_pages, Channel, MonitoringSet};
use crate::os_model::{MappingPolicy, World};

/// How many *other* instances are running.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CloneEstimate {
    Exact { others: usize },
    Range { lo: usize, hi: usize },
    /// Still detecting at m=1.
    AtLeast { others: usize },
}

impl CloneEstimate {
    pub fn contains(&self, others: usize) -> bool {
        match *self {
            CloneEstimate::Exact { others: o } => o == others,
            CloneEstimate::Range { lo, hi } => (lo..=hi).contains(&others),
            CloneEstimate::AtLeast { others: o } => others >= o,
        }
    }
}

impl std::fmt::Display for CloneEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CloneEstimate::Exact { others } => write!(f, "{others}"),
            CloneEstimate::Range { lo, hi } => write!(f, "{lo}-{hi}"),
            CloneEstimate::AtLeast { others } => write!(f, ">={others}"),
        }
    }
}

/// Clean at `rungs[i]` after detecting at `rungs[i-1]`.
fn estimate_at(ways: usize, rungs: &[usize], i: usize) -> CloneEstimate {
    let lo = if i == 0 { 1 } else { ways / rungs[i - 1] + 1 };
    let hi = ways / rungs[i];
    if lo == hi {
        CloneEstimate::Exact { others: lo - 1 }
    } else {
        CloneEstimate::Range { lo: lo - 1, hi: hi - 1 }
    }
}

/// Every instance walks the ladder together: drop all lines, prime at the
/// next rung, probe `max_probe` rounds. An instance that stays clean stops
/// there and keeps its lines and its probing; the others step down.
pub fn estimate_clone_count(world: &mut World, instances: &mut [Detector], max_probe: usize) -> Result<Vec<CloneEstimate>> {
    if max_probe == 0 {
        return Err(Error::Config("max_probe must be at least 1".into()));
    }
    let ways = world.geo.ways;
    let rungs = ladder(ways);
    let mut result: Vec<Option<CloneEstimate>> = vec![None; instances.len()];
    for (i, &m) in rungs.iter().enumerate() {
        let active: Vec<usize> = (0..instances.len()).filter(|&k| result[k].is_none()).collect();
        if active.is_empty() {
            break;
        }
        for &k in &active {
            instances[k].flush_all(world)?;
        }
        let mut detected = vec![false; instances.len()];
        for &k in &active {
            instances[k].set_m(m)?;
            match instances[k].prime(world) {
                Ok(_) => {}
                Err(Error::Anomaly(_)) => detected[k] = true,
                Err(e) => return Err(e),
            }
        }
        for _ in 0..max_probe {
            for (k, d) in instances.iter_mut().enumerate() {
                let pass = d.probe_pass(world)?;
                if pass.misses > 0 || pass.anomaly.is_some() {
                    detected[k] = true;
                }
            }
        }
        for &k in &active {
            if !detected[k] {
                result[k] = Some(estimate_at(ways, &rungs, i));
            }
        }
    }
    let last = *rungs.last().unwrap_or(&1);
    Ok(result.into_iter().map(|r| r.unwrap_or(CloneEstimate::AtLeast { others: ways / last })).collect())
}

/// `n` clones of one binary, each on its own linearly mapped region,
/// calibrated but not primed. Monitoring sets come from the page tables.
pub fn spawn_instances(world: &mut World, n: usize, channel: Channel, config: &DetectorConfig) -> Result<Vec<Detector>> {
    let pages = default_region_pages(&world.geo);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let actor = world.spawn_enclave(&format!("clone{i}"), pages, |b| MappingPolicy::Linear { base: b })?;
        let ms = MonitoringSet::from_ground_truth(world.mapping(actor)?, &world.geo, channel)?;
        let mut d = Detector::new(actor, ms, config.clone(), world.geo.ways)?;
        d.calibrate(world)?;
        out.push(d);
    }
    world.target_channel = channel.value();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_model::{CacheGeometry, Replacement};
    use crate::detector::LatencyModel;

    #[test]
    fn rung_estimates_for_sixteen_ways() {
        let r = ladder(16);
        let want = [
            CloneEstimate::Exact { others: 0 },
            CloneEstimate::Exact { others: 1 },
            CloneEstimate::Exact { others: 2 },
            CloneEstimate::Exact { others: 3 },
            CloneEstimate::Exact { others: 4 },
            CloneEstimate::Range { lo: 5, hi: 7 },
            CloneEstimate::Range { lo: 8, hi: 15 },
        ];
        for (i, w) in want.iter().enumerate() {
            assert_eq!(&estimate_at(16, &r, i), w, "rung {i}");
        }
    }

    fn run(others: usize, seed: u64, policy: Replacement) -> Vec<CloneEstimate> {
        let geo = CacheGeometry::with_default_hash(2, 1024, 16).unwrap();
        let mut w = World::new(geo, policy, LatencyModel::default(), seed);
        let cfg = DetectorConfig { m: 12, ..Default::default() };
        let mut inst = spawn_instances(&mut w, others + 1, Channel::new(5).unwrap(), &cfg).unwrap();
        estimate_clone_count(&mut w, &mut inst, 4).unwrap()
    }

    #[test]
    fn exact_counts_up_to_four_others() {
        for others in 0..=4 {
            for e in run(others, 11 + others as u64, Replacement::default()) {
                assert_eq!(e, CloneEstimate::Exact { others }, "others={others}");
            }
        }
    }

    #[test]
    fn lru_gives_the_same_counts() {
        for others in [0, 1, 3] {
            for e in run(others, 3, Replacement::Lru) {
                assert_eq!(e, CloneEstimate::Exact { others });
            }
        }
    }

    #[test]
    fn six_instances_fall_in_range() {
        for e in run(5, 1, Replacement::default()) {
            assert!(e.contains(5), "{e}");
        }
    }

    #[test]
    fn zero_probe_rounds_rejected() {
        let geo = CacheGeometry::with_default_hash(2, 1024, 16).unwrap();
        let mut w = World::new(geo, Replacement::default(), LatencyModel::default(), 0);
        let mut inst = spawn_instances(&mut w, 1, Channel::new(0).unwrap(), &DetectorConfig::default()).unwrap();
        assert!(estimate_clone_count(&mut w, &mut inst, 0).is_err());
    }
}
