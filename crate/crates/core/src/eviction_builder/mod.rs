//! Building the per-channel monitoring set from inside an enclave, with only
//! aliasing and eviction observations available.

mod groups;
mod oracle;
mod sets;

pub use groups::{
    build_spoiler_groups, page_va, regroup_to_cache_groups, select_channel, CacheGroup, Channel, ChannelConfig,
    SpoilerGroup, SpoilerGroups, CACHE_GROUPS, CHANNELS, SPOILER_GROUPS,
};
pub use oracle::{AliasOracle, EvictRule, EvictionOracle, SimEvictionOracle};
pub use sets::{build_monitoring_set, reduce, verify_coverage, BuildOutput, CoverageReport, EvictionSet, MonitoringSet};

/// Default enclave region: twice the cache, in pages, but at least two pages
/// per slice in every spoiler group so regrouping can see all slices.
pub fn default_region_pages(geo: &crate::cache_model::CacheGeometry) -> u64 {
    let cache = (2 * geo.size_bytes()) >> crate::os_model::PAGE_BITS;
    cache.max((SPOILER_GROUPS * 2 * geo.slices) as u64)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, HashSet};

    use proptest::prelude::*;

    use super::*;
    use crate::cache_model::{CacheGeometry, CacheState, Replacement};
    use crate::error::Error;
    use crate::os_model::{MapEdit, MappingPolicy, PageMapping};

    fn small_geo() -> CacheGeometry {
        CacheGeometry::with_default_hash(2, 1024, 4).unwrap()
    }

    fn linear(n: u64) -> PageMapping {
        PageMapping::allocate(MappingPolicy::Linear { base: 256 }, n).unwrap()
    }

    #[test]
    fn channel_selection_is_stable_and_pinnable() {
        let a = select_channel("enclave-a", &ChannelConfig::default()).unwrap();
        assert_eq!(a, select_channel("enclave-a", &ChannelConfig::default()).unwrap());
        assert!(a.value() < 64);
        let p = select_channel("enclave-a", &ChannelConfig { pin: Some(33) }).unwrap();
        assert_eq!(p.value(), 33);
        assert!(select_channel("x", &ChannelConfig { pin: Some(64) }).is_err());
    }

    #[test]
    fn channel_from_sha256_last_byte() {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(b"kv-store");
        assert_eq!(select_channel("kv-store", &ChannelConfig::default()).unwrap().value(), d[31] & 0x3f);
    }

    #[test]
    fn linear_region_gives_256_equal_spoiler_groups() {
        let geo = CacheGeometry::reference_machine();
        let n = default_region_pages(&geo);
        assert_eq!(n, 6144);
        let m = linear(n);
        let sg = build_spoiler_groups(n, Channel::new(5).unwrap(), &m).unwrap();
        assert_eq!(sg.groups.len(), 256);
        assert!(sg.groups.iter().all(|g| g.members.len() == 24));
        assert!(sg.unmapped.is_empty());
        for g in &sg.groups {
            let ppn0 = m.ppn(g.members[0] >> 12).unwrap();
            assert!(g.members.iter().all(|&v| m.ppn(v >> 12).unwrap() & 0xff == ppn0 & 0xff));
        }
    }

    #[test]
    fn permuted_groups_match_brute_force_bits() {
        let m = PageMapping::allocate(MappingPolicy::Permuted { base: 512, seed: 4 }, 1024).unwrap();
        let ch = Channel::new(7).unwrap();
        let sg = build_spoiler_groups(1024, ch, &m).unwrap();
        assert_eq!(sg.groups.len(), 256);
        let low20 = |v: u64| m.translate(v).unwrap().0 & 0xf_ffff;
        let mut total = 0;
        for g in &sg.groups {
            let k = low20(g.members[0]);
            assert!(g.members.iter().all(|&v| low20(v) == k));
            // nothing outside the group shares the bits
            let n = (0..1024).filter(|&v| low20(page_va(v, ch)) == k).count();
            assert_eq!(n, g.members.len());
            total += n;
        }
        assert_eq!(total, 1024);
    }

    #[test]
    fn cache_groups_share_bits_6_to_15() {
        let geo = small_geo();
        let m = linear(768);
        let ch = Channel::new(30).unwrap();
        let sg = build_spoiler_groups(768, ch, &m).unwrap();
        let mut o = SimEvictionOracle::new(&geo, Replacement::default(), &m, ch.offset());
        let cgs = regroup_to_cache_groups(&sg, &mut o).unwrap();
        let mut seen = HashSet::new();
        for cg in &cgs {
            let bits = |v: u64| (m.translate(v).unwrap().0 >> 6) & 0x3ff;
            let b = bits(cg.members[0]);
            assert!(cg.members.iter().all(|&v| bits(v) == b));
            assert!(seen.insert(b));
        }
    }

    #[test]
    fn hidden_set_index_is_rejected() {
        let geo = small_geo();
        let mut m = linear(512);
        // every page of OS set 5 is moved to frames of OS set 6 far away
        let mut spare = (1u64 << 20) + 6;
        for vpn in 0..512 {
            if m.ppn(vpn).unwrap() & 0xf == 5 {
                m.remap(vpn, spare).unwrap();
                spare += 16;
            }
        }
        let r = build_monitoring_set(&m, &geo, Replacement::default(), Channel::new(0).unwrap(), false);
        assert!(matches!(r, Err(Error::MemoryManipulation(_))));
    }

    #[test]
    fn two_slices_four_ways_give_eight_per_set_index() {
        let geo = small_geo();
        let m = linear(512);
        let out = build_monitoring_set(&m, &geo, Replacement::default(), Channel::new(2).unwrap(), true).unwrap();
        for g in 0..16u8 {
            let n: usize = out.monitoring.sets.iter().filter(|s| s.group == g).map(|s| s.members.len()).sum();
            assert_eq!(n, 8);
        }
    }

    #[test]
    fn too_small_region_is_rejected() {
        let m = linear(200);
        let e = build_spoiler_groups(200, Channel::new(0).unwrap(), &m).unwrap_err();
        assert!(matches!(e, Error::MemoryManipulation(_)));
    }

    #[test]
    fn holes_become_gaps() {
        let mut m = linear(512);
        m.apply_edit(&MapEdit::Unmap { vpn: 700 % 512 }).unwrap();
        let sg = build_spoiler_groups(512, Channel::new(0).unwrap(), &m).unwrap();
        assert_eq!(sg.unmapped, vec![700 % 512]);
        let rep = verify_coverage(&sg, &[]);
        assert_eq!(rep.gaps, vec![700 % 512]);
        assert!(rep.check().is_err());
    }

    fn check_monitoring(out: &BuildOutput, m: &PageMapping, geo: &CacheGeometry, channel: Channel) {
        assert_eq!(out.cache_groups.len(), 16);
        assert!(out.cache_groups.iter().all(|c| c.spoiler_ids.len() == 16));
        assert_eq!(out.monitoring.len(), 16 * geo.slices);
        let want: BTreeSet<(usize, usize)> = (0..16)
            .flat_map(|os| {
                (0..geo.slices).map(move |s| (((os << 6) | channel.value() as usize) & (geo.sets_per_slice - 1), s))
            })
            .collect();
        let got: BTreeSet<(usize, usize)> =
            out.monitoring.sets.iter().map(|s| s.target(m, geo).expect("members share a set")).collect();
        assert_eq!(got, want);
        assert!(out.monitoring.sets.iter().all(|s| s.members.len() == geo.ways));
    }

    #[test]
    fn pipeline_on_small_geometry() {
        let geo = small_geo();
        let m = linear(512);
        let ch = Channel::new(17).unwrap();
        let out = build_monitoring_set(&m, &geo, Replacement::default(), ch, true).unwrap();
        assert!(out.coverage.is_clean());
        check_monitoring(&out, &m, &geo, ch);
        // spoiler ids inside a cache group are spaced by 16
        for cg in &out.cache_groups {
            assert!(cg.spoiler_ids.windows(2).all(|w| w[1] - w[0] == 16));
        }
    }

    #[test]
    fn pipeline_on_reference_machine() {
        let geo = CacheGeometry::reference_machine();
        let m = linear(default_region_pages(&geo));
        let ch = Channel::new(42).unwrap();
        let out = build_monitoring_set(&m, &geo, Replacement::default(), ch, true).unwrap();
        check_monitoring(&out, &m, &geo, ch);
        assert_eq!(out.monitoring.len(), 192);
    }

    #[test]
    fn lru_policy_also_builds() {
        let geo = small_geo();
        let m = linear(512);
        let ch = Channel::new(3).unwrap();
        let out = build_monitoring_set(&m, &geo, Replacement::Lru, ch, true).unwrap();
        check_monitoring(&out, &m, &geo, ch);
    }

    #[test]
    fn swap_trick_is_flagged() {
        let geo = small_geo();
        let n = 2048;
        let base = 1024 - 512;
        let policy = MappingPolicy::swap_trick(base, n).unwrap();
        let m = PageMapping::allocate(policy, n).unwrap();
        assert!(!m.is_linear());
        let sg = build_spoiler_groups(n, Channel::new(0).unwrap(), &m).unwrap();
        let rep = verify_coverage(&sg, &[]);
        assert!(!rep.is_clean());
        let r = build_monitoring_set(&m, &geo, Replacement::default(), Channel::new(0).unwrap(), true);
        assert!(matches!(r, Err(Error::MemoryManipulation(_))));
    }

    #[test]
    fn permuted_region_is_flagged() {
        let geo = small_geo();
        let m = PageMapping::allocate(MappingPolicy::Permuted { base: 256, seed: 9 }, 512).unwrap();
        let r = build_monitoring_set(&m, &geo, Replacement::default(), Channel::new(0).unwrap(), true);
        assert!(matches!(r, Err(Error::MemoryManipulation(_))));
    }

    #[test]
    fn ground_truth_set_matches_built_set() {
        let geo = small_geo();
        let m = linear(512);
        let ch = Channel::new(9).unwrap();
        let gt = MonitoringSet::from_ground_truth(&m, &geo, ch).unwrap();
        let out = build_monitoring_set(&m, &geo, Replacement::default(), ch, true).unwrap();
        let a: BTreeSet<_> = gt.sets.iter().map(|s| s.target(&m, &geo).unwrap()).collect();
        let b: BTreeSet<_> = out.monitoring.sets.iter().map(|s| s.target(&m, &geo).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn monitoring_set_json_round_trip() {
        let geo = small_geo();
        let m = linear(512);
        let gt = MonitoringSet::from_ground_truth(&m, &geo, Channel::new(1).unwrap()).unwrap();
        let back = MonitoringSet::from_json(&gt.to_json().unwrap()).unwrap();
        assert_eq!(gt, back);
        assert!(MonitoringSet::from_json(r#"{"channel":64,"sets":[]}"#).is_err());
    }

    /// Independent check on a fresh cache: W members evict the target line
    /// and W-1 do not.
    fn evicts(geo: &CacheGeometry, m: &PageMapping, target: u64, set: &[u64]) -> bool {
        let mut c = CacheState::new(geo, Replacement::default());
        let pa = |v: u64| m.translate(v).unwrap().0;
        c.access(geo, pa(target), 0);
        for &v in set {
            c.access(geo, pa(v), 0);
        }
        !c.is_resident(geo, pa(target))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn built_sets_are_sound_and_minimal(ch in 0u8..64, extra in 0u64..3) {
            let geo = small_geo();
            let n = 512 + extra * 256;
            let m = PageMapping::allocate(MappingPolicy::Linear { base: 256 * (1 + extra) }, n).unwrap();
            let ch = Channel::new(ch).unwrap();
            let out = build_monitoring_set(&m, &geo, Replacement::default(), ch, true).unwrap();
            prop_assert_eq!(out.spoiler.groups.len(), 256);
            prop_assert_eq!(out.cache_groups.len(), 16);
            prop_assert!(out.coverage.is_clean());
            let all: HashSet<u64> = out.monitoring.sets.iter().flat_map(|s| s.members.iter().copied()).collect();
            prop_assert_eq!(all.len(), out.monitoring.len() * geo.ways);
            for s in &out.monitoring.sets {
                let (set, slice) = s.target(&m, &geo).unwrap();
                // any other page in the same (set, slice) plays the victim
                let victim = (0..n).map(|v| page_va(v, ch)).find(|&v| {
                    let pa = m.translate(v).unwrap().0;
                    !s.members.contains(&v) && geo.set_of(pa) == set && geo.slice_of(pa) == slice
                });
                if let Some(v) = victim {
                    prop_assert!(evicts(&geo, &m, v, &s.members));
                    for i in 0..s.members.len() {
                        let mut less = s.members.clone();
                        less.remove(i);
                        prop_assert!(!evicts(&geo, &m, v, &less));
                    }
                }
            }
        }
    }
}
