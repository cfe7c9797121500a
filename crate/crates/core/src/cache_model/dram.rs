use serde::{Deserialize, Serialize};

const fn mask(bits: &[u32]) -> u64 {
    let mut m = 0u64;
    let mut i = 0;
    while i < bits.len() {
        m |= 1 << bits[i];
        i += 1;
    }
    m
}

pub const CHANNEL_MASK: u64 = mask(&[18, 15, 13, 12, 9, 8]);
pub const BG0_MASK: u64 = mask(&[19, 15]);
pub const BG1_MASK: u64 = mask(&[20, 16]);
pub const BA0_MASK: u64 = mask(&[21, 17]);
pub const BA1_MASK: u64 = mask(&[22, 18]);
// Same pair as BA1 on the modelled machine.
pub const RANK_MASK: u64 = mask(&[22, 18]);
pub const ROW_SHIFT: u32 = 18;

/// The six bank functions in order (channel, bg0, bg1, ba0, ba1, rank).
pub const BANK_FUNCTIONS: [u64; 6] = [CHANNEL_MASK, BG0_MASK, BG1_MASK, BA0_MASK, BA1_MASK, RANK_MASK];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DramCoordinates {
    pub channel: u8,
    pub bg0: u8,
    pub bg1: u8,
    pub ba0: u8,
    pub ba1: u8,
    pub rank: u8,
    pub row: u64,
}

impl DramCoordinates {
    /// Packed (channel, bg0, bg1, ba0, ba1, rank), channel in bit 0.
    pub fn bank(&self) -> u8 {
        self.channel | self.bg0 << 1 | self.bg1 << 2 | self.ba0 << 3 | self.ba1 << 4 | self.rank << 5
    }
}

#[inline]
fn parity(x: u64) -> u8 {
    (x.count_ones() & 1) as u8
}

pub fn dram_map(pa: u64) -> DramCoordinates {
    DramCoordinates {
        channel: parity(pa & CHANNEL_MASK),
        bg0: parity(pa & BG0_MASK),
        bg1: parity(pa & BG1_MASK),
        ba0: parity(pa & BA0_MASK),
        ba1: parity(pa & BA1_MASK),
        rank: parity(pa & RANK_MASK),
        row: pa >> ROW_SHIFT,
    }
}

/// Same bank, different row.
pub fn row_conflict(a: u64, b: u64) -> bool {
    let (x, y) = (dram_map(a), dram_map(b));
    x.bank() == y.bank() && x.row != y.row
}
