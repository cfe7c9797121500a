use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::groups::{
    build_spoiler_groups, page_va, regroup_to_cache_groups, CacheGroup, Channel, SpoilerGroups, CACHE_GROUPS,
};
use super::oracle::{EvictRule, EvictionOracle, SimEvictionOracle};
use crate::cache_model::{CacheGeometry, Replacement};
use crate::error::{Error, Result};
use crate::os_model::{PageMapping, PAGE_BITS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionSet {
    /// Cache group this set came from.
    pub group: u8,
    /// Discovery order inside the group; one slot per slice.
    pub slot: u8,
    pub members: Vec<u64>,
}

impl EvictionSet {
    /// Ground truth (set, slice) of the members. Never used by the detector.
    pub fn target(&self, mapping: &PageMapping, geo: &CacheGeometry) -> Option<(usize, usize)> {
        let mut t = None;
        for &va in &self.members {
            let pa = mapping.translate(va).ok()?.0;
            let k = (geo.set_of(pa), geo.slice_of(pa));
            match t {
                None => t = Some(k),
                Some(prev) if prev != k => return None,
                _ => {}
            }
        }
        t
    }
}

/// What one enclave watches: every (set, slice) reachable with bits 6-11
/// fixed to the channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoringSet {
    pub channel: Channel,
    pub sets: Vec<EvictionSet>,
}

impl MonitoringSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Built straight from the page table. Test fixtures and oracles only.
    pub fn from_ground_truth(mapping: &PageMapping, geo: &CacheGeometry, channel: Channel) -> Result<Self> {
        let mut buckets: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
        for vpn in 0..mapping.n_pages() {
            let va = page_va(vpn, channel);
            if let Ok(pa) = mapping.translate(va) {
                let k = (geo.set_of(pa.0), geo.slice_of(pa.0));
                let b = buckets.entry(k).or_default();
                if b.len() < geo.ways {
                    b.push(va);
                }
            }
        }
        let per_group = geo.slices;
        let mut by_set: BTreeMap<usize, Vec<(usize, Vec<u64>)>> = BTreeMap::new();
        for ((set, slice), members) in buckets {
            if members.len() < geo.ways {
                return Err(Error::MemoryManipulation(format!("({set}, {slice}) has fewer than W pages")));
            }
            by_set.entry(set).or_default().push((slice, members));
        }
        if by_set.len() != geo.sets_per_channel() || by_set.values().any(|v| v.len() != per_group) {
            return Err(Error::MemoryManipulation("region does not cover the channel".into()));
        }
        let mut sets = Vec::new();
        for (g, (_, slices)) in by_set.into_iter().enumerate() {
            for (slot, (_, members)) in slices.into_iter().enumerate() {
                sets.push(EvictionSet { group: g as u8, slot: slot as u8, members });
            }
        }
        Ok(MonitoringSet { channel, sets })
    }
}

/// Shrink a cache group to one W-address eviction set per slice by greedy
/// leave-one-out against the eviction oracle.
pub fn reduce(group: &CacheGroup, geo: &CacheGeometry, oracle: &mut impl EvictionOracle) -> Result<Vec<EvictionSet>> {
    let mut pool = group.members.clone();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let x = pool[0];
        let mut cand: Vec<u64> = pool[1..].to_vec();
        if !oracle.evicted(&[x], &cand, EvictRule::All) {
            if out.len() == geo.slices {
                // leftovers of an already covered slice that could not be
                // evicted; the group was too small for them, nothing to do
                pool.remove(0);
                continue;
            }
            return Err(Error::MemoryManipulation(format!(
                "cache group {}: address {x:#x} cannot be evicted by its group",
                group.id
            )));
        }
        let mut i = 0;
        while i < cand.len() {
            let e = cand.remove(i);
            if !oracle.evicted(&[x], &cand, EvictRule::All) {
                cand.insert(i, e);
                i += 1;
            }
        }
        if cand.len() != geo.ways {
            return Err(Error::MemoryManipulation(format!(
                "cache group {}: minimal eviction set has {} addresses, expected {}",
                group.id,
                cand.len(),
                geo.ways
            )));
        }
        pool.retain(|&a| a != x && !cand.contains(&a) && !oracle.evicted(&[a], &cand, EvictRule::All));
        out.push(EvictionSet { group: group.id, slot: out.len() as u8, members: cand });
    }
    if out.len() != geo.slices {
        return Err(Error::MemoryManipulation(format!(
            "cache group {} covers {} slices, expected {}",
            group.id,
            out.len(),
            geo.slices
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Pages that belong to no spoiler group.
    pub gaps: Vec<u64>,
    /// (group id, vpn distance) pairs that are not 256 pages apart.
    pub irregular_members: Vec<(u8, u64)>,
    /// Cache groups whose spoiler ids are not spaced by 16.
    pub irregular_cache_groups: Vec<u8>,
    pub unequal_sizes: bool,
}

impl CoverageReport {
    pub fn is_clean(&self) -> bool {
        self.gaps.is_empty()
            && self.irregular_members.is_empty()
            && self.irregular_cache_groups.is_empty()
            && !self.unequal_sizes
    }

    /// Err(MemoryManipulation) with a summary when anything is off.
    pub fn check(&self) -> Result<()> {
        if self.is_clean() {
            return Ok(());
        }
        Err(Error::MemoryManipulation(format!(
            "coverage: {} gaps, {} irregular spoiler spacings, {} irregular cache groups, unequal sizes: {}",
            self.gaps.len(),
            self.irregular_members.len(),
            self.irregular_cache_groups.len(),
            self.unequal_sizes
        )))
    }
}

/// Distances between group members and between merged group ids reveal
/// whether the OS handed out linear memory without holes.
pub fn verify_coverage(spoiler: &SpoilerGroups, cache_groups: &[CacheGroup]) -> CoverageReport {
    let mut seen = vec![false; spoiler.n_pages as usize];
    let mut irregular_members = Vec::new();
    for g in &spoiler.groups {
        for w in g.members.windows(2) {
            let d = (w[1] >> PAGE_BITS) - (w[0] >> PAGE_BITS);
            if d != 256 {
                irregular_members.push((g.id, d));
            }
        }
        for &m in &g.members {
            seen[(m >> PAGE_BITS) as usize] = true;
        }
    }
    let gaps: Vec<u64> = (0..spoiler.n_pages).filter(|&v| !seen[v as usize]).collect();

    let mut irregular_cache_groups = Vec::new();
    for cg in cache_groups {
        let ok = cg.spoiler_ids.windows(2).all(|w| w[1] as i32 - w[0] as i32 == CACHE_GROUPS as i32);
        if !ok {
            irregular_cache_groups.push(cg.id);
        }
    }
    let sizes: Vec<usize> = spoiler.groups.iter().map(|g| g.members.len()).collect();
    let unequal_sizes = sizes.iter().any(|&s| s != sizes[0])
        || cache_groups.iter().any(|c| c.members.len() != cache_groups[0].members.len());
    CoverageReport { gaps, irregular_members, irregular_cache_groups, unequal_sizes }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOutput {
    pub monitoring: MonitoringSet,
    pub spoiler: SpoilerGroups,
    pub cache_groups: Vec<CacheGroup>,
    pub coverage: CoverageReport,
    pub oracle_tests: u64,
}

/// The whole pipeline over an enclave region. Errors with
/// MemoryManipulation on any structural failure; coverage anomalies are
/// reported and also turned into an error when `strict`.
pub fn build_monitoring_set(
    mapping: &PageMapping,
    geo: &CacheGeometry,
    policy: Replacement,
    channel: Channel,
    strict: bool,
) -> Result<BuildOutput> {
    let spoiler = build_spoiler_groups(mapping.n_pages(), channel, mapping)?;
    let mut oracle = SimEvictionOracle::new(geo, policy, mapping, channel.offset());
    let cache_groups = regroup_to_cache_groups(&spoiler, &mut oracle)?;
    let coverage = verify_coverage(&spoiler, &cache_groups);
    if strict {
        coverage.check()?;
    }
    let mut sets = Vec::with_capacity(CACHE_GROUPS * geo.slices);
    for cg in &cache_groups {
        sets.extend(reduce(cg, geo, &mut oracle)?);
    }
    let oracle_tests = oracle.tests_run();
    Ok(BuildOutput { monitoring: MonitoringSet { channel, sets }, spoiler, cache_groups, coverage, oracle_tests })
}
