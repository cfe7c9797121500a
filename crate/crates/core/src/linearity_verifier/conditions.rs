use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::layout::AddressLayout;
use crate::os_model::PageMapping;

/// Observations an enclave can make about pairs of its own addresses, plus
/// the ground-truth translation the checker uses to evaluate them in bulk.
pub trait Oracles {
    fn layout(&self) -> &AddressLayout;

    /// None for a page the OS left unmapped.
    fn physical(&self, va: u64) -> Option<u64>;

    fn same_physical(&self, a: u64, b: u64) -> bool {
        matches!((self.physical(a), self.physical(b)), (Some(x), Some(y)) if x == y)
    }

    fn aliases(&self, a: u64, b: u64) -> bool {
        matches!((self.physical(a), self.physical(b)), (Some(x), Some(y)) if self.layout().alias(x, y))
    }

    fn same_set(&self, a: u64, b: u64) -> bool {
        let l = self.layout();
        matches!((self.physical(a), self.physical(b)), (Some(x), Some(y)) if l.set_index(x) == l.set_index(y))
    }

    fn row_conflict(&self, a: u64, b: u64) -> bool {
        matches!((self.physical(a), self.physical(b)), (Some(x), Some(y)) if self.layout().conflicts(x, y))
    }
}

/// Oracles backed by a VPN -> frame table.
#[derive(Clone, Debug)]
pub struct PageTableOracles {
    layout: AddressLayout,
    entries: Vec<Option<u64>>,
}

impl PageTableOracles {
    pub fn new(layout: AddressLayout, entries: Vec<Option<u64>>) -> Self {
        PageTableOracles { layout, entries }
    }

    pub fn from_mapping(layout: AddressLayout, mapping: &PageMapping) -> Self {
        Self::new(layout, mapping.entries().to_vec())
    }

    pub fn from_frames(layout: AddressLayout, frames: &[u64]) -> Self {
        Self::new(layout, frames.iter().map(|&f| Some(f)).collect())
    }

    pub fn n_pages(&self) -> u64 {
        self.entries.len() as u64
    }
}

impl Oracles for PageTableOracles {
    fn layout(&self) -> &AddressLayout {
        &self.layout
    }

    fn physical(&self, va: u64) -> Option<u64> {
        let vpn = va >> self.layout.page_bits;
        let ppn = (*self.entries.get(vpn as usize)?)?;
        Some((ppn << self.layout.page_bits) | (va & (self.layout.page_size() - 1)))
    }
}

/// The "memory is linear" guess: PA = anchor_pa + (VA - anchor_va).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub anchor_va: u64,
    pub anchor_pa: u64,
}

impl Hypothesis {
    /// PA = VA, the setup assignment of the constraint encoding.
    pub fn identity() -> Self {
        Hypothesis { anchor_va: 0, anchor_pa: 0 }
    }

    /// Anchored at the real translation of `va`.
    pub fn anchored(o: &impl Oracles, va: u64) -> Option<Self> {
        Some(Hypothesis { anchor_va: va, anchor_pa: o.physical(va)? })
    }

    pub fn pa(&self, layout: &AddressLayout, va: u64) -> u64 {
        self.anchor_pa.wrapping_add(va).wrapping_sub(self.anchor_va) & layout.addr_mask()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    SamePhysical,
    Aliases,
    SameSet,
    RowConflict,
}

impl Predicate {
    pub fn eval(self, o: &impl Oracles, a: u64, b: u64) -> bool {
        match self {
            Predicate::SamePhysical => o.same_physical(a, b),
            Predicate::Aliases => o.aliases(a, b),
            Predicate::SameSet => o.same_set(a, b),
            Predicate::RowConflict => o.row_conflict(a, b),
        }
    }
}

/// A pair whose observation contradicts what the condition requires.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub a: u64,
    pub b: u64,
    pub predicate: Predicate,
    /// What linear memory would have produced.
    pub required: bool,
}

impl Counterexample {
    /// True when the oracle still disagrees with the requirement.
    pub fn recheck(&self, o: &impl Oracles) -> bool {
        self.predicate.eval(o, self.a, self.b) != self.required
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub condition: u8,
    pub passed: bool,
    /// Pairs (or items) examined.
    pub checked: u64,
    pub counterexample: Option<Counterexample>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub outcomes: Vec<ConditionOutcome>,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|c| c.passed)
    }

    pub fn passed(&self, condition: u8) -> bool {
        self.outcomes.iter().any(|c| c.condition == condition && c.passed)
    }

    pub fn first_failure(&self) -> Option<&ConditionOutcome> {
        self.outcomes.iter().find(|c| !c.passed)
    }

    /// Every attached counterexample still reproduces against `o`.
    pub fn recheck(&self, o: &impl Oracles) -> bool {
        self.outcomes.iter().filter_map(|c| c.counterexample.as_ref()).all(|c| c.recheck(o))
    }
}

fn outcome(condition: u8, checked: u64, cex: Option<Counterexample>) -> ConditionOutcome {
    ConditionOutcome { condition, passed: cex.is_none(), checked, counterexample: cex }
}

fn test_addresses(layout: &AddressLayout, n_pages: u64) -> Vec<u64> {
    let offs = layout.probe_offsets();
    (0..n_pages).flat_map(|p| offs.iter().map(move |o| (p << layout.page_bits) | o)).collect()
}

/// Evaluate the five linear-memory conditions over the first `n_pages`
/// pages. Pairs the hypothesis says nothing about are not constrained.
pub fn check_conditions(o: &impl Oracles, n_pages: u64, hyp: Hypothesis) -> ConditionReport {
    let l = o.layout();
    let vas = test_addresses(l, n_pages);
    let mapped: Vec<(u64, u64)> = vas.iter().filter_map(|&v| o.physical(v).map(|p| (v, p))).collect();
    ConditionReport {
        outcomes: vec![
            c1(o, n_pages),
            c2(o, &mapped),
            c3(o, &mapped),
            c4(o, &mapped, hyp),
            c5(o, n_pages, &mapped, hyp),
        ],
    }
}

/// Distinct VAs, distinct PAs.
fn c1(o: &impl Oracles, n_pages: u64) -> ConditionOutcome {
    let pb = o.layout().page_bits;
    let mut seen: HashMap<u64, u64> = HashMap::new();
    for p in 0..n_pages {
        let va = p << pb;
        let Some(pa) = o.physical(va) else {
            return outcome(
                1,
                p + 1,
                Some(Counterexample { a: va, b: va, predicate: Predicate::SamePhysical, required: true }),
            );
        };
        if let Some(&prev) = seen.get(&pa) {
            return outcome(
                1,
                p + 1,
                Some(Counterexample { a: prev, b: va, predicate: Predicate::SamePhysical, required: false }),
            );
        }
        seen.insert(pa, va);
    }
    outcome(1, n_pages, None)
}

/// VAs sharing the low alias bits must alias.
fn c2(o: &impl Oracles, mapped: &[(u64, u64)]) -> ConditionOutcome {
    let l = o.layout();
    let mask = (1u64 << l.alias_bits) - 1;
    let mut first: HashMap<u64, (u64, u64)> = HashMap::new();
    let mut n = 0;
    for &(va, pa) in mapped {
        match first.get(&(va & mask)) {
            None => {
                first.insert(va & mask, (va, pa));
            }
            Some(&(fva, fpa)) => {
                n += 1;
                if !l.alias(fpa, pa) {
                    return outcome(
                        2,
                        n,
                        Some(Counterexample { a: fva, b: va, predicate: Predicate::Aliases, required: true }),
                    );
                }
            }
        }
    }
    outcome(2, n, None)
}

/// VAs sharing the set-index bits must land in the same set.
fn c3(o: &impl Oracles, mapped: &[(u64, u64)]) -> ConditionOutcome {
    let l = o.layout();
    let mut first: HashMap<u64, (u64, u64)> = HashMap::new();
    let mut n = 0;
    for &(va, pa) in mapped {
        match first.get(&l.set_index(va)) {
            None => {
                first.insert(l.set_index(va), (va, pa));
            }
            Some(&(fva, fpa)) => {
                n += 1;
                if l.set_index(fpa) != l.set_index(pa) {
                    return outcome(
                        3,
                        n,
                        Some(Counterexample { a: fva, b: va, predicate: Predicate::SameSet, required: true }),
                    );
                }
            }
        }
    }
    outcome(3, n, None)
}

#[derive(Clone, Copy)]
struct Entry {
    va: u64,
    row_h: u64,
    bank_o: u64,
    row_o: u64,
}

/// Within each hypothesised bank: conflict exactly when hypothesised rows
/// differ. Checked per class in linear time instead of over all pairs.
fn c4(o: &impl Oracles, mapped: &[(u64, u64)], hyp: Hypothesis) -> ConditionOutcome {
    let l = o.layout();
    let mut classes: HashMap<u64, Vec<Entry>> = HashMap::new();
    for &(va, pa) in mapped {
        let h = hyp.pa(l, va);
        classes.entry(l.bank(h)).or_default().push(Entry { va, row_h: l.row(h), bank_o: l.bank(pa), row_o: l.row(pa) });
    }
    let mut keys: Vec<u64> = classes.keys().copied().collect();
    keys.sort_unstable();
    let mut n = 0u64;
    let cex = |a: u64, b: u64, required: bool| Some(Counterexample { a, b, predicate: Predicate::RowConflict, required });
    for k in keys {
        let class = &classes[&k];
        n += class.len() as u64;
        // same hypothesised row: equal observed bank forces equal observed row
        let mut within: HashMap<(u64, u64), (u64, u64)> = HashMap::new();
        for e in class {
            match within.get(&(e.row_h, e.bank_o)) {
                Some(&(row_o, va)) if row_o != e.row_o => return outcome(4, n, cex(va, e.va, false)),
                Some(_) => {}
                None => {
                    within.insert((e.row_h, e.bank_o), (e.row_o, e.va));
                }
            }
        }
        let r = class[0];
        let Some(r2) = class.iter().copied().find(|e| e.row_h != r.row_h) else {
            continue;
        };
        // different hypothesised rows: one observed bank, and rows that stay apart
        for e in class {
            let partner = if e.row_h != r.row_h { r } else { r2 };
            if e.bank_o != partner.bank_o {
                return outcome(4, n, cex(partner.va, e.va, true));
            }
        }
        let mut rows: HashMap<u64, (u64, u64)> = HashMap::new();
        for e in class {
            match rows.get(&e.row_o) {
                Some(&(row_h, va)) if row_h != e.row_h => return outcome(4, n, cex(va, e.va, true)),
                Some(_) => {}
                None => {
                    rows.insert(e.row_o, (e.row_h, e.va));
                }
            }
        }
    }
    outcome(4, n, None)
}

/// Consecutive VAs conflict iff the hypothesised PA sits at the boundary;
/// the first and last address conflict iff the hypothesis says so.
fn c5(o: &impl Oracles, n_pages: u64, mapped: &[(u64, u64)], hyp: Hypothesis) -> ConditionOutcome {
    let l = o.layout();
    let end = n_pages << l.page_bits;
    let mut n = 0;
    for &(va, _) in mapped {
        if va + 1 >= end {
            continue;
        }
        n += 1;
        let required = l.at_boundary(hyp.pa(l, va));
        if o.row_conflict(va, va + 1) != required {
            return outcome(
                5,
                n,
                Some(Counterexample { a: va, b: va + 1, predicate: Predicate::RowConflict, required }),
            );
        }
    }
    if end > 1 {
        let (a, b) = (0, end - 1);
        if o.physical(a).is_some() && o.physical(b).is_some() {
            n += 1;
            let required = l.conflicts(hyp.pa(l, a), hyp.pa(l, b));
            if o.row_conflict(a, b) != required {
                return outcome(5, n, Some(Counterexample { a, b, predicate: Predicate::RowConflict, required }));
            }
        }
    }
    outcome(5, n, None)
}
