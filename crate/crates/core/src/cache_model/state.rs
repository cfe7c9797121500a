use serde::{Deserialize, Serialize};

use super::geometry::CacheGeometry;

/// Opaque actor identity. Only oracles and tests look at line ownership.
pub type ActorId = u32;

pub const MAX_AGE: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Replacement {
    QuadAge { insert_age: u8, hit_age: u8 },
    Lru,
}

impl Default for Replacement {
    fn default() -> Self {
        Replacement::QuadAge { insert_age: 1, hit_age: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheLineState {
    pub tag: u64,
    pub valid: bool,
    pub age: u8,
    pub owner: ActorId,
    stamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Evicted {
    pub tag: u64,
    pub owner: ActorId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessResult {
    Hit,
    Miss { evicted: Option<Evicted> },
}

impl AccessResult {
    pub fn is_miss(self) -> bool {
        matches!(self, AccessResult::Miss { .. })
    }
}

/// The whole LLC: `slices x sets x ways` lines stored flat.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheState {
    sets: usize,
    ways: usize,
    policy: Replacement,
    lines: Vec<CacheLineState>,
    tick: u64,
}

impl CacheState {
    pub fn new(geo: &CacheGeometry, policy: Replacement) -> Self {
        if let Replacement::QuadAge { insert_age, hit_age } = policy {
            assert!(insert_age <= MAX_AGE && hit_age <= MAX_AGE, "ages are two-bit");
        }
        CacheState {
            sets: geo.sets_per_slice,
            ways: geo.ways,
            policy,
            lines: vec![CacheLineState::default(); geo.total_lines()],
            tick: 0,
        }
    }

    pub fn policy(&self) -> Replacement {
        self.policy
    }

    #[inline]
    fn base(&self, set: usize, slice: usize) -> usize {
        (slice * self.sets + set) * self.ways
    }

    pub fn set_lines(&self, set: usize, slice: usize) -> &[CacheLineState] {
        let b = self.base(set, slice);
        &self.lines[b..b + self.ways]
    }

    pub fn access(&mut self, geo: &CacheGeometry, pa: u64, actor: ActorId) -> AccessResult {
        self.access_line(geo.set_of(pa), geo.slice_of(pa), geo.tag_of(pa), actor)
    }

    pub fn access_line(&mut self, set: usize, slice: usize, tag: u64, actor: ActorId) -> AccessResult {
        self.tick += 1;
        let tick = self.tick;
        let policy = self.policy;
        let b = self.base(set, slice);
        let lines = &mut self.lines[b..b + self.ways];

        if let Some(line) = lines.iter_mut().find(|l| l.valid && l.tag == tag) {
            match policy {
                Replacement::QuadAge { hit_age, .. } => line.age = hit_age,
                Replacement::Lru => line.stamp = tick,
            }
            return AccessResult::Hit;
        }

        let (way, evicted) = match lines.iter().position(|l| !l.valid) {
            Some(w) => (w, None),
            None => {
                let w = match policy {
                    Replacement::QuadAge { .. } => quad_age_victim(lines),
                    Replacement::Lru => {
                        let mut w = 0;
                        for (i, l) in lines.iter().enumerate() {
                            if l.stamp < lines[w].stamp {
                                w = i;
                            }
                        }
                        w
                    }
                };
                (w, Some(Evicted { tag: lines[w].tag, owner: lines[w].owner }))
            }
        };
        let age = match policy {
            Replacement::QuadAge { insert_age, .. } => insert_age,
            Replacement::Lru => 0,
        };
        lines[way] = CacheLineState { tag, valid: true, age, owner: actor, stamp: tick };
        AccessResult::Miss { evicted }
    }

    pub fn is_resident(&self, geo: &CacheGeometry, pa: u64) -> bool {
        let tag = geo.tag_of(pa);
        self.set_lines(geo.set_of(pa), geo.slice_of(pa))
            .iter()
            .any(|l| l.valid && l.tag == tag)
    }

    /// clflush: drop the line if present.
    pub fn flush(&mut self, geo: &CacheGeometry, pa: u64) -> bool {
        let tag = geo.tag_of(pa);
        let b = self.base(geo.set_of(pa), geo.slice_of(pa));
        for l in &mut self.lines[b..b + self.ways] {
            if l.valid && l.tag == tag {
                l.valid = false;
                return true;
            }
        }
        false
    }

    /// Drop every line an actor brought in (enclave teardown).
    pub fn invalidate_owner(&mut self, actor: ActorId) -> usize {
        let mut n = 0;
        for l in &mut self.lines {
            if l.valid && l.owner == actor {
                l.valid = false;
                n += 1;
            }
        }
        n
    }

    pub fn owned_in(&self, set: usize, slice: usize, actor: ActorId) -> usize {
        self.set_lines(set, slice)
            .iter()
            .filter(|l| l.valid && l.owner == actor)
            .count()
    }

    /// Invalidate one (set, slice) and nothing else.
    pub fn reset_set(&mut self, set: usize, slice: usize) {
        let b = self.base(set, slice);
        for l in &mut self.lines[b..b + self.ways] {
            *l = CacheLineState::default();
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.lines {
            *l = CacheLineState::default();
        }
    }
}

/// Lowest way at age 3, ageing the whole set until one exists.
fn quad_age_victim(lines: &mut [CacheLineState]) -> usize {
    loop {
        if let Some(w) = lines.iter().position(|l| l.age >= MAX_AGE) {
            return w;
        }
        for l in lines.iter_mut() {
            l.age += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_model::geometry::SliceHash;
    use proptest::prelude::*;

    fn geo(ways: usize) -> CacheGeometry {
        CacheGeometry::new(1, 64, ways, SliceHash::new(vec![])).unwrap()
    }

    // Address of tag `t` in set `s` for a 64-set geometry.
    fn addr(s: u64, t: u64) -> u64 {
        (t << 12) | (s << 6)
    }

    /// Hand-steppable model of the replacement rule, kept deliberately naive:
    /// a list of (tag, age) in way order.
    struct RefSet {
        ways: usize,
        lines: Vec<Option<(u64, u8)>>,
    }

    impl RefSet {
        fn new(ways: usize) -> Self {
            RefSet { ways, lines: vec![None; ways] }
        }

        fn touch(&mut self, tag: u64) -> (bool, Option<u64>) {
            for slot in self.lines.iter_mut().flatten() {
                if slot.0 == tag {
                    slot.1 = 0;
                    return (true, None);
                }
            }
            for i in 0..self.ways {
                if self.lines[i].is_none() {
                    self.lines[i] = Some((tag, 1));
                    return (false, None);
                }
            }
            let mut step = 0;
            loop {
                for i in 0..self.ways {
                    if self.lines[i].unwrap().1 == 3 {
                        let old = self.lines[i].unwrap().0;
                        self.lines[i] = Some((tag, 1));
                        return (false, Some(old));
                    }
                }
                for l in self.lines.iter_mut().flatten() {
                    l.1 += 1;
                }
                step += 1;
                assert!(step <= 3);
            }
        }
    }

    #[test]
    fn cold_set_misses_without_eviction() {
        let g = geo(4);
        let mut c = CacheState::new(&g, Replacement::default());
        assert_eq!(c.access(&g, addr(5, 9), 0), AccessResult::Miss { evicted: None });
    }

    #[test]
    fn resident_line_hits() {
        let g = geo(4);
        let mut c = CacheState::new(&g, Replacement::default());
        c.access(&g, addr(5, 9), 0);
        assert_eq!(c.access(&g, addr(5, 9), 0), AccessResult::Hit);
    }

    #[test]
    fn four_way_fill_then_fifth() {
        // a,b,c,d inserted at age 1; e finds no age 3, everyone ages twice,
        // way 0 (a) is the first to reach 3.
        let g = geo(4);
        let mut c = CacheState::new(&g, Replacement::default());
        let mut r = RefSet::new(4);
        for t in 1..=4 {
            c.access(&g, addr(0, t), 0);
            r.touch(t);
        }
        let got = c.access(&g, addr(0, 5), 0);
        let (_, want) = r.touch(5);
        assert_eq!(want, Some(1));
        assert_eq!(got, AccessResult::Miss { evicted: Some(Evicted { tag: 1, owner: 0 }) });
        let ages: Vec<u8> = c.set_lines(0, 0).iter().map(|l| l.age).collect();
        assert_eq!(ages, vec![1, 3, 3, 3]);
    }

    #[test]
    fn recently_hit_line_survives() {
        // hitting a resets it to 0, so b (way 1) becomes the victim
        let g = geo(4);
        let mut c = CacheState::new(&g, Replacement::default());
        for t in 1..=4 {
            c.access(&g, addr(0, t), 0);
        }
        c.access(&g, addr(0, 1), 0);
        let got = c.access(&g, addr(0, 5), 0);
        assert_eq!(got, AccessResult::Miss { evicted: Some(Evicted { tag: 2, owner: 0 }) });
    }

    #[test]
    fn lru_evicts_least_recent() {
        let g = geo(4);
        let mut c = CacheState::new(&g, Replacement::Lru);
        for t in 1..=4 {
            c.access(&g, addr(0, t), 0);
        }
        c.access(&g, addr(0, 1), 0);
        c.access(&g, addr(0, 2), 0);
        let got = c.access(&g, addr(0, 5), 0);
        assert_eq!(got, AccessResult::Miss { evicted: Some(Evicted { tag: 3, owner: 0 }) });
    }

    #[test]
    fn flush_and_invalidate() {
        let g = geo(4);
        let mut c = CacheState::new(&g, Replacement::default());
        c.access(&g, addr(1, 1), 7);
        c.access(&g, addr(2, 1), 7);
        c.access(&g, addr(2, 2), 8);
        assert!(c.flush(&g, addr(1, 1)));
        assert!(!c.is_resident(&g, addr(1, 1)));
        assert_eq!(c.invalidate_owner(7), 1);
        assert!(c.is_resident(&g, addr(2, 2)));
    }

    proptest! {
        #[test]
        fn matches_reference_model(tags in proptest::collection::vec(0u64..12, 1..200), ways in 1usize..9) {
            let g = geo(ways);
            let mut c = CacheState::new(&g, Replacement::default());
            let mut r = RefSet::new(ways);
            for t in tags {
                let got = c.access(&g, addr(3, t), 0);
                let (hit, ev) = r.touch(t);
                match got {
                    AccessResult::Hit => prop_assert!(hit),
                    AccessResult::Miss { evicted } => {
                        prop_assert!(!hit);
                        prop_assert_eq!(evicted.map(|e| e.tag), ev);
                    }
                }
            }
        }

        #[test]
        fn ages_stay_in_range_and_tags_unique(
            seq in proptest::collection::vec((0u64..4, 0u64..40), 1..300),
            lru in any::<bool>(),
        ) {
            let g = geo(8);
            let policy = if lru { Replacement::Lru } else { Replacement::default() };
            let mut c = CacheState::new(&g, policy);
            for (s, t) in seq {
                c.access(&g, addr(s, t), 0);
                let lines = c.set_lines(s as usize, 0);
                let mut seen = std::collections::HashSet::new();
                for l in lines.iter().filter(|l| l.valid) {
                    prop_assert!(l.age <= 3);
                    prop_assert!(seen.insert(l.tag));
                }
            }
        }

        #[test]
        fn re_access_is_hit(seq in proptest::collection::vec((0u64..4, 0u64..40), 1..100)) {
            let g = geo(8);
            let mut c = CacheState::new(&g, Replacement::default());
            for (s, t) in seq {
                c.access(&g, addr(s, t), 0);
                prop_assert_eq!(c.access(&g, addr(s, t), 0), AccessResult::Hit);
            }
        }

        #[test]
        fn deterministic(seq in proptest::collection::vec((0u64..8, 0u64..40), 1..200)) {
            let g = geo(4);
            let mut a = CacheState::new(&g, Replacement::default());
            let mut b = CacheState::new(&g, Replacement::default());
            for &(s, t) in &seq {
                prop_assert_eq!(a.access(&g, addr(s, t), 1), b.access(&g, addr(s, t), 1));
            }
            prop_assert_eq!(a, b);
        }

        #[test]
        fn sets_are_isolated(
            seq in proptest::collection::vec(0u64..40, 1..100),
            other in 1u64..8,
        ) {
            let g = geo(4);
            let mut c = CacheState::new(&g, Replacement::default());
            for t in 0..4 {
                c.access(&g, addr(other, t), 2);
            }
            let before = c.set_lines(other as usize, 0).to_vec();
            for t in seq {
                c.access(&g, addr(0, t), 1);
            }
            prop_assert_eq!(c.set_lines(other as usize, 0), &before[..]);
        }

        #[test]
        fn w_plus_one_tags_evict(ways in 1usize..17, start in 0u64..1000, lru in any::<bool>()) {
            let g = geo(ways);
            let policy = if lru { Replacement::Lru } else { Replacement::default() };
            let mut c = CacheState::new(&g, policy);
            for t in start..start + ways as u64 + 1 {
                c.access(&g, addr(0, t), 0);
            }
            let gone = (start..start + ways as u64).filter(|&t| !c.is_resident(&g, addr(0, t))).count();
            prop_assert!(gone >= 1);
        }
    }
}
