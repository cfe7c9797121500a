use serde::{Deserialize, Serialize};

use crate::cache_model::{BANK_FUNCTIONS, LINE_BITS, PA_BITS, ROW_SHIFT};
use crate::os_model::PAGE_BITS;

/// Which physical bits mean what, for the full machine or a miniature used
/// by exhaustive searches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressLayout {
    pub addr_bits: u32,
    pub page_bits: u32,
    pub line_bits: u32,
    /// Set index is bits `line_bits..set_top`.
    pub set_top: u32,
    /// Pages sharing this many low bits alias.
    pub alias_bits: u32,
    /// Each mask's parity is one bank-selection bit.
    pub bank_masks: Vec<u64>,
    pub row_shift: u32,
    /// Consecutive addresses conflict iff the low `boundary_bits` are all ones.
    pub boundary_bits: u32,
}

impl AddressLayout {
    pub fn full() -> Self {
        AddressLayout {
            addr_bits: PA_BITS,
            page_bits: PAGE_BITS,
            line_bits: LINE_BITS,
            set_top: 16,
            alias_bits: 20,
            bank_masks: BANK_FUNCTIONS.to_vec(),
            row_shift: ROW_SHIFT,
            boundary_bits: 22,
        }
    }

    /// 8-bit addresses, 8-byte pages (32 of them), 4-byte lines.
    /// Set bits 2-4: bit 2 inside the page, bits 3-4 chosen by the OS.
    /// Bank bits: a2^a3^a4^a5, a6^a3, a7^a5. Row = a7..a5.
    /// 0x7F -> 0x80 is the only consecutive pair that conflicts.
    pub fn scaled() -> Self {
        AddressLayout {
            addr_bits: 8,
            page_bits: 3,
            line_bits: 2,
            set_top: 5,
            alias_bits: 6,
            bank_masks: vec![0b0011_1100, 0b0100_1000, 0b1010_0000],
            row_shift: 5,
            boundary_bits: 7,
        }
    }

    pub fn addr_mask(&self) -> u64 {
        if self.addr_bits >= 64 {
            u64::MAX
        } else {
            (1u64 << self.addr_bits) - 1
        }
    }

    pub fn page_size(&self) -> u64 {
        1 << self.page_bits
    }

    pub fn frames(&self) -> u64 {
        1 << (self.addr_bits - self.page_bits)
    }

    pub fn bank(&self, pa: u64) -> u64 {
        self.bank_masks
            .iter()
            .enumerate()
            .fold(0, |acc, (i, m)| acc | ((((pa & m).count_ones() & 1) as u64) << i))
    }

    pub fn row(&self, pa: u64) -> u64 {
        pa >> self.row_shift
    }

    pub fn conflicts(&self, a: u64, b: u64) -> bool {
        self.bank(a) == self.bank(b) && self.row(a) != self.row(b)
    }

    pub fn set_index(&self, pa: u64) -> u64 {
        (pa >> self.line_bits) & ((1 << (self.set_top - self.line_bits)) - 1)
    }

    pub fn alias(&self, a: u64, b: u64) -> bool {
        (a ^ b) & ((1 << self.alias_bits) - 1) == 0
    }

    pub fn at_boundary(&self, pa: u64) -> bool {
        let m = (1u64 << self.boundary_bits) - 1;
        pa & m == m
    }

    /// In-page offsets worth probing: every offset for tiny pages, otherwise
    /// each combination of in-page bank bits plus the last byte of the page.
    pub fn probe_offsets(&self) -> Vec<u64> {
        if self.page_bits <= 4 {
            return (0..self.page_size()).collect();
        }
        let in_page = self.bank_masks.iter().fold(0, |a, m| a | m) & (self.page_size() - 1);
        let bits: Vec<u32> = (0..self.page_bits).filter(|b| in_page >> b & 1 == 1).collect();
        let mut out: Vec<u64> = (0..1u64 << bits.len())
            .map(|k| bits.iter().enumerate().fold(0, |acc, (i, b)| acc | ((k >> i & 1) << b)))
            .collect();
        out.push(self.page_size() - 1);
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_boundary_is_unique() {
        let l = AddressLayout::scaled();
        let hits: Vec<u64> = (0..255u64).filter(|&x| l.conflicts(x, x + 1)).collect();
        assert_eq!(hits, vec![0x7f]);
        assert!(l.at_boundary(0x7f) && !l.at_boundary(0x3f));
        assert!(l.conflicts(0, 0xff));
    }

    #[test]
    fn scaled_consecutive_conflict_iff_boundary() {
        let l = AddressLayout::scaled();
        for x in 0..255u64 {
            assert_eq!(l.conflicts(x, x + 1), l.at_boundary(x), "{x:#x}");
        }
    }

    #[test]
    fn full_layout_agrees_with_dram_model() {
        let l = AddressLayout::full();
        for pa in [0u64, 0x3f_ffff, 0x40_0000, 0x1234_5678, 0x3_ffff_ffff] {
            let d = crate::cache_model::dram_map(pa);
            assert_eq!(l.row(pa), d.row);
        }
        assert!(l.conflicts(0x3f_ffff, 0x40_0000));
        assert!(!l.conflicts(0x3f_fffe, 0x3f_ffff));
    }

    #[test]
    fn full_probe_offsets_cover_bank_bits() {
        let l = AddressLayout::full();
        assert_eq!(l.probe_offsets(), vec![0, 0x100, 0x200, 0x300, 0xfff]);
        assert_eq!(AddressLayout::scaled().probe_offsets().len(), 8);
    }
}
