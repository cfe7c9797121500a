use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache_model::{PhysicalAddress, PA_BITS};
use crate::error::{Error, Result};

pub const PAGE_BITS: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_BITS;
pub const PPN_LIMIT: u64 = 1 << (PA_BITS - PAGE_BITS);
/// Pages spanned by one 4 MiB DRAM row-boundary period (22 address bits).
pub const BOUNDARY_PAGES: u64 = 1 << (22 - PAGE_BITS);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum MapEdit {
    SwapPair { vpn_a: u64, vpn_b: u64 },
    Remap { vpn: u64, ppn: u64 },
    Unmap { vpn: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MappingPolicy {
    Linear { base: u64 },
    /// A seeded shuffle of `base..base + n`.
    Permuted { base: u64, seed: u64 },
    /// Linear from `base`, then the edits in order.
    Adversarial { base: u64, edits: Vec<MapEdit> },
}

impl MappingPolicy {
    pub fn base(&self) -> u64 {
        match self {
            MappingPolicy::Linear { base }
            | MappingPolicy::Permuted { base, .. }
            | MappingPolicy::Adversarial { base, .. } => *base,
        }
    }

    /// The page-swap arrangement at the first 4 MiB physical boundary inside
    /// the region: the two pages on either side of it trade places.
    pub fn swap_trick(base: u64, n_pages: u64) -> Result<Self> {
        let first = (base / BOUNDARY_PAGES + 1) * BOUNDARY_PAGES;
        if first <= base || first >= base + n_pages {
            return Err(Error::Script("region does not straddle a 4 MiB boundary".into()));
        }
        let vpn = first - base;
        Ok(MappingPolicy::Adversarial { base, edits: vec![MapEdit::SwapPair { vpn_a: vpn - 1, vpn_b: vpn }] })
    }
}

/// VPN -> PPN table for one enclave region. VPNs are region relative and
/// start at 0, so a virtual address is just `vpn << 12 | offset`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageMapping {
    pub policy: MappingPolicy,
    entries: Vec<Option<u64>>,
}

impl PageMapping {
    pub fn allocate(policy: MappingPolicy, n_pages: u64) -> Result<Self> {
        if n_pages == 0 {
            return Err(Error::Script("cannot allocate zero pages".into()));
        }
        let base = policy.base();
        if base.checked_add(n_pages).is_none_or(|end| end > PPN_LIMIT) {
            return Err(Error::Exhausted { base, needed: n_pages });
        }
        let linear: Vec<Option<u64>> = (0..n_pages).map(|v| Some(base + v)).collect();
        let mut m = PageMapping { policy: policy.clone(), entries: linear };
        match &policy {
            MappingPolicy::Linear { .. } => {}
            MappingPolicy::Permuted { seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                m.entries.shuffle(&mut rng);
            }
            MappingPolicy::Adversarial { edits, .. } => {
                for e in edits {
                    m.apply_edit(e)?;
                }
            }
        }
        Ok(m)
    }

    /// Build from an explicit table. Rejects duplicate PPNs.
    pub fn from_entries(policy: MappingPolicy, entries: Vec<Option<u64>>) -> Result<Self> {
        let m = PageMapping { policy, entries };
        if !m.is_injective() {
            return Err(Error::Script("mapping is not injective".into()));
        }
        Ok(m)
    }

    pub fn apply_edit(&mut self, edit: &MapEdit) -> Result<()> {
        match *edit {
            MapEdit::SwapPair { vpn_a, vpn_b } => self.swap(vpn_a, vpn_b),
            MapEdit::Remap { vpn, ppn } => self.remap(vpn, ppn),
            MapEdit::Unmap { vpn } => {
                self.check_vpn(vpn)?;
                self.entries[vpn as usize] = None;
                Ok(())
            }
        }
    }

    fn check_vpn(&self, vpn: u64) -> Result<()> {
        if vpn >= self.n_pages() {
            return Err(Error::Script(format!("vpn {vpn:#x} outside the region")));
        }
        Ok(())
    }

    pub fn swap(&mut self, vpn_a: u64, vpn_b: u64) -> Result<()> {
        self.check_vpn(vpn_a)?;
        self.check_vpn(vpn_b)?;
        self.entries.swap(vpn_a as usize, vpn_b as usize);
        Ok(())
    }

    pub fn remap(&mut self, vpn: u64, ppn: u64) -> Result<()> {
        self.check_vpn(vpn)?;
        if ppn >= PPN_LIMIT {
            return Err(Error::Exhausted { base: ppn, needed: 1 });
        }
        if self.entries.iter().enumerate().any(|(v, p)| *p == Some(ppn) && v as u64 != vpn) {
            return Err(Error::Script(format!("ppn {ppn:#x} already mapped")));
        }
        self.entries[vpn as usize] = Some(ppn);
        Ok(())
    }

    pub fn n_pages(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn ppn(&self, vpn: u64) -> Option<u64> {
        self.entries.get(vpn as usize).copied().flatten()
    }

    pub fn entries(&self) -> &[Option<u64>] {
        &self.entries
    }

    pub fn translate(&self, va: u64) -> Result<PhysicalAddress> {
        let vpn = va >> PAGE_BITS;
        let ppn = self.ppn(vpn).ok_or(Error::Unmapped(vpn))?;
        Ok(PhysicalAddress((ppn << PAGE_BITS) | (va & (PAGE_SIZE - 1))))
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = HashSet::new();
        self.entries.iter().flatten().all(|p| seen.insert(*p))
    }

    /// `PPN = first PPN + VPN` for every page.
    pub fn is_linear(&self) -> bool {
        match self.ppn(0) {
            Some(b) => self.entries.iter().enumerate().all(|(v, p)| *p == Some(b + v as u64)),
            None => false,
        }
    }
}

/// Speculative-load aliasing predicate: physical bits 0-19 agree.
pub fn alias20(mapping: &PageMapping, va1: u64, va2: u64) -> Result<bool> {
    let a = mapping.translate(va1)?.0;
    let b = mapping.translate(va2)?.0;
    Ok((a ^ b) & 0xF_FFFF == 0)
}

pub fn translate(mapping: &PageMapping, va: u64) -> Result<PhysicalAddress> {
    mapping.translate(va)
}

pub fn allocate(policy: MappingPolicy, n_pages: u64) -> Result<PageMapping> {
    PageMapping::allocate(policy, n_pages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_identity_offset() {
        let m = allocate(MappingPolicy::Linear { base: 0 }, 4).unwrap();
        for v in 0..4 {
            assert_eq!(m.ppn(v), Some(v));
        }
        assert_eq!(m.translate(0x1234).unwrap().0, 0x1234);
    }

    #[test]
    fn permuted_replays_the_shuffle() {
        let m = allocate(MappingPolicy::Permuted { base: 0, seed: 5 }, 4).unwrap();
        let mut want: Vec<u64> = (0..4).collect();
        want.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
        let got: Vec<u64> = (0..4).map(|v| m.ppn(v).unwrap()).collect();
        assert_eq!(got, want);
        let mut sorted = got.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let va = (2 << 12) | 0xabc;
        assert_eq!(m.translate(va).unwrap().0, (want[2] << 12) | 0xabc);
    }

    #[test]
    fn exhausted_space() {
        assert!(matches!(
            allocate(MappingPolicy::Linear { base: PPN_LIMIT - 2 }, 4),
            Err(Error::Exhausted { .. })
        ));
        assert!(allocate(MappingPolicy::Linear { base: 0 }, 0).is_err());
    }

    #[test]
    fn unmapped_translate_fails() {
        let mut m = allocate(MappingPolicy::Linear { base: 0 }, 4).unwrap();
        assert_eq!(m.translate(4 << 12), Err(Error::Unmapped(4)));
        m.apply_edit(&MapEdit::Unmap { vpn: 2 }).unwrap();
        assert_eq!(m.translate(2 << 12), Err(Error::Unmapped(2)));
    }

    #[test]
    fn swap_trick_swaps_boundary_pages() {
        let p = MappingPolicy::swap_trick(1000, 100).unwrap();
        let m = allocate(p, 100).unwrap();
        // PPN 1024 is the first 4 MiB boundary, at VPN 24
        assert_eq!(m.ppn(23), Some(1024));
        assert_eq!(m.ppn(24), Some(1023));
        assert!(m.is_injective());
        assert!(!m.is_linear());
        assert!(MappingPolicy::swap_trick(0, 100).is_err());
    }

    #[test]
    fn remap_keeps_injectivity() {
        let mut m = allocate(MappingPolicy::Linear { base: 0 }, 4).unwrap();
        assert!(m.remap(0, 3).is_err());
        m.remap(0, 99).unwrap();
        assert!(m.is_injective());
    }

    #[test]
    fn alias20_examples() {
        let m = allocate(MappingPolicy::Linear { base: 7 }, 600).unwrap();
        let va = 0x3456;
        assert!(alias20(&m, va, va).unwrap());
        assert!(alias20(&m, va, va + (1 << 20)).unwrap());
        assert!(!alias20(&m, va, va + (1 << 12)).unwrap());
    }

    proptest! {
        #[test]
        fn permuted_is_injective(seed in any::<u64>(), n in 1u64..300, base in 0u64..1000) {
            let m = allocate(MappingPolicy::Permuted { base, seed }, n).unwrap();
            prop_assert!(m.is_injective());
            prop_assert_eq!(m.entries().iter().flatten().count() as u64, n);
        }

        #[test]
        fn offset_bits_preserved(seed in any::<u64>(), va in 0u64..(64 << 12)) {
            let m = allocate(MappingPolicy::Permuted { base: 3, seed }, 64).unwrap();
            prop_assert_eq!(m.translate(va).unwrap().0 & 0xfff, va & 0xfff);
        }

        #[test]
        fn linear_alias_iff_congruent(base in 0u64..4096, a in 0u64..(768 << 12), b in 0u64..(768 << 12)) {
            let m = allocate(MappingPolicy::Linear { base }, 768).unwrap();
            let expect = a.abs_diff(b) % (1 << 20) == 0;
            prop_assert_eq!(alias20(&m, a, b).unwrap(), expect);
            let pa = m.translate(a).unwrap().0;
            prop_assert_eq!(pa, (base << 12) + a);
        }

        #[test]
        fn swaps_preserve_injectivity(
            swaps in proptest::collection::vec((0u64..50, 0u64..50), 0..40),
            va in 0u64..(50 << 12),
        ) {
            let mut m = allocate(MappingPolicy::Linear { base: 11 }, 50).unwrap();
            for (a, b) in swaps {
                m.swap(a, b).unwrap();
            }
            prop_assert!(m.is_injective());
            prop_assert_eq!(m.translate(va).unwrap().0 & 0xfff, va & 0xfff);
        }
    }
}
