use crate::cache_model::{CacheGeometry, CacheState, Replacement};
use crate::error::Result;
use crate::os_model::{alias20, PageMapping, PAGE_BITS};

/// Speculative-load aliasing as seen from inside the enclave.
pub trait AliasOracle {
    /// Err(Unmapped) when either page is missing.
    fn aliases(&self, va1: u64, va2: u64) -> Result<bool>;
}

impl AliasOracle for PageMapping {
    fn aliases(&self, va1: u64, va2: u64) -> Result<bool> {
        alias20(self, va1, va2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvictRule {
    /// Every target line is gone.
    All,
    /// At least one target line is gone.
    Any,
}

/// "Load `targets`, load `evictors`, reload `targets`: were they evicted?"
pub trait EvictionOracle {
    fn evicted(&mut self, targets: &[u64], evictors: &[u64], rule: EvictRule) -> bool;
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct Line {
    set: u32,
    slice: u32,
    tag: u64,
}

/// Runs the test on a scratch cache with the machine's geometry and policy,
/// starting every test from cold sets. Sets are isolated, so only evictors
/// that share a (set, slice) with some target are simulated.
pub struct SimEvictionOracle<'a> {
    geo: &'a CacheGeometry,
    mapping: &'a PageMapping,
    scratch: CacheState,
    offset: u64,
    by_vpn: Vec<Option<Line>>,
    tests: u64,
}

impl<'a> SimEvictionOracle<'a> {
    /// `offset` is the in-page offset the builder uses; lookups at that offset
    /// hit a precomputed table.
    pub fn new(geo: &'a CacheGeometry, policy: Replacement, mapping: &'a PageMapping, offset: u64) -> Self {
        let by_vpn = (0..mapping.n_pages())
            .map(|v| {
                mapping.ppn(v).map(|p| {
                    let pa = (p << PAGE_BITS) | offset;
                    Line { set: geo.set_of(pa) as u32, slice: geo.slice_of(pa) as u32, tag: geo.tag_of(pa) }
                })
            })
            .collect();
        SimEvictionOracle { geo, mapping, scratch: CacheState::new(geo, policy), offset, by_vpn, tests: 0 }
    }

    pub fn tests_run(&self) -> u64 {
        self.tests
    }

    #[inline]
    fn line(&self, va: u64) -> Option<Line> {
        if va & ((1 << PAGE_BITS) - 1) == self.offset {
            return self.by_vpn.get((va >> PAGE_BITS) as usize).copied().flatten();
        }
        let pa = self.mapping.translate(va).ok()?.0;
        Some(Line { set: self.geo.set_of(pa) as u32, slice: self.geo.slice_of(pa) as u32, tag: self.geo.tag_of(pa) })
    }
}

impl EvictionOracle for SimEvictionOracle<'_> {
    fn evicted(&mut self, targets: &[u64], evictors: &[u64], rule: EvictRule) -> bool {
        self.tests += 1;
        let tl: Vec<Line> = targets.iter().filter_map(|&v| self.line(v)).collect();
        if tl.is_empty() {
            return false;
        }
        let mut keys: Vec<(u32, u32)> = tl.iter().map(|l| (l.set, l.slice)).collect();
        keys.sort_unstable();
        keys.dedup();
        for &(s, sl) in &keys {
            self.scratch.reset_set(s as usize, sl as usize);
        }
        for l in &tl {
            self.scratch.access_line(l.set as usize, l.slice as usize, l.tag, 0);
        }
        for &v in evictors {
            if let Some(l) = self.line(v) {
                if keys.binary_search(&(l.set, l.slice)).is_ok() {
                    self.scratch.access_line(l.set as usize, l.slice as usize, l.tag, 0);
                }
            }
        }
        let gone = |l: &Line| !self.scratch.set_lines(l.set as usize, l.slice as usize).iter().any(|x| x.valid && x.tag == l.tag);
        match rule {
            EvictRule::All => tl.iter().all(gone),
            EvictRule::Any => tl.iter().any(gone),
        }
    }
}
