use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINE_SIZE: u64 = 64;
pub const LINE_BITS: u32 = 6;
/// Width of the modelled physical address space (16 GiB).
pub const PA_BITS: u32 = 34;
pub const PA_MASK: u64 = (1 << PA_BITS) - 1;

/// First set-index bit the OS controls through page placement. Bits 6-11
/// sit in the page offset and are fixed by the enclave itself.
pub const OS_SET_SHIFT: u32 = 12;

// Slice-hash columns for up to 16 slices, over tag bits 16..=33 only. The
// first three are the published Intel functions with the low (set-index)
// bits dropped, the fourth is our own choice for 9..16 slice parts.
const DEFAULT_HASH_BITS: [&[u32]; 4] = [
    &[16, 17, 18, 20, 22, 24, 25, 26, 27, 28, 30, 32, 33],
    &[16, 17, 19, 20, 21, 22, 23, 24, 26, 28, 29, 31, 33],
    &[16, 19, 22, 23, 26, 27, 30, 31],
    &[17, 18, 20, 24, 27, 29, 30, 32],
];

/// XOR bit-matrix: output bit `i` is the parity of `pa & rows[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SliceHash {
    pub rows: Vec<u64>,
}

impl SliceHash {
    pub fn new(rows: Vec<u64>) -> Self {
        SliceHash { rows }
    }

    /// Default matrix with enough output bits for `slices`.
    pub fn default_for(slices: usize) -> Result<Self> {
        let outputs = output_bits(slices) as usize;
        if outputs > DEFAULT_HASH_BITS.len() {
            return Err(Error::Geometry(format!(
                "no default slice hash for {slices} slices, supply slice_hash_matrix"
            )));
        }
        let rows = DEFAULT_HASH_BITS[..outputs]
            .iter()
            .map(|bits| bits.iter().fold(0u64, |m, b| m | (1 << b)))
            .collect();
        Ok(SliceHash { rows })
    }

    #[inline]
    pub fn eval(&self, pa: u64) -> u64 {
        let mut out = 0u64;
        for (i, row) in self.rows.iter().enumerate() {
            out |= (((pa & row).count_ones() & 1) as u64) << i;
        }
        out
    }
}

/// ceil(log2(n)), with 0 for a single slice.
pub fn output_bits(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub slices: usize,
    pub sets_per_slice: usize,
    pub ways: usize,
    #[serde(rename = "slice_hash_matrix")]
    pub slice_hash: SliceHash,
}

impl CacheGeometry {
    pub fn new(slices: usize, sets_per_slice: usize, ways: usize, slice_hash: SliceHash) -> Result<Self> {
        let geo = CacheGeometry { slices, sets_per_slice, ways, slice_hash };
        geo.validate()?;
        Ok(geo)
    }

    pub fn with_default_hash(slices: usize, sets_per_slice: usize, ways: usize) -> Result<Self> {
        Self::new(slices, sets_per_slice, ways, SliceHash::default_for(slices)?)
    }

    /// 12 MiB, 16-way, 12 slices of 1024 sets.
    pub fn reference_machine() -> Self {
        Self::with_default_hash(12, 1024, 16).expect("static geometry")
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.ways == 0 {
            return Err(Error::Geometry("slices and ways must be positive".into()));
        }
        if !self.sets_per_slice.is_power_of_two() {
            return Err(Error::Geometry(format!(
                "sets_per_slice = {} is not a power of two",
                self.sets_per_slice
            )));
        }
        if self.sets_per_slice < 64 {
            // bits 6-11 must all be set-index bits for the channel to exist
            return Err(Error::Geometry("need at least 64 sets per slice".into()));
        }
        if LINE_BITS + self.set_bits() > PA_BITS {
            return Err(Error::Geometry("set index exceeds the address width".into()));
        }
        let want = output_bits(self.slices) as usize;
        if self.slice_hash.rows.len() != want {
            return Err(Error::Geometry(format!(
                "slice hash has {} output bits, {} slices need {}",
                self.slice_hash.rows.len(),
                self.slices,
                want
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn set_bits(&self) -> u32 {
        self.sets_per_slice.trailing_zeros()
    }

    /// Number of set indices that share one value of bits 6-11.
    #[inline]
    pub fn sets_per_channel(&self) -> usize {
        self.sets_per_slice >> 6
    }

    #[inline]
    pub fn slice_of(&self, pa: u64) -> usize {
        (self.slice_hash.eval(pa & PA_MASK) % self.slices as u64) as usize
    }

    #[inline]
    pub fn set_of(&self, pa: u64) -> usize {
        ((pa >> LINE_BITS) as usize) & (self.sets_per_slice - 1)
    }

    #[inline]
    pub fn tag_of(&self, pa: u64) -> u64 {
        (pa & PA_MASK) >> (LINE_BITS + self.set_bits())
    }

    pub fn decompose(&self, pa: PhysicalAddress) -> Decomposed {
        let pa = pa.0;
        Decomposed {
            line_offset: pa & (LINE_SIZE - 1),
            set_index: self.set_of(pa),
            slice: self.slice_of(pa),
            tag: self.tag_of(pa),
        }
    }

    pub fn total_lines(&self) -> usize {
        self.slices * self.sets_per_slice * self.ways
    }

    pub fn size_bytes(&self) -> u64 {
        self.total_lines() as u64 * LINE_SIZE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decomposed {
    pub line_offset: u64,
    pub set_index: usize,
    pub slice: usize,
    pub tag: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysicalAddress(pub u64);

impl PhysicalAddress {
    #[inline]
    pub fn bit(self, i: u32) -> u64 {
        (self.0 >> i) & 1
    }

    pub fn line_offset(self) -> u64 {
        self.0 & (LINE_SIZE - 1)
    }

    pub fn set_index(self, geo: &CacheGeometry) -> usize {
        geo.set_of(self.0)
    }

    /// Bits 6-11: the part of the set index that lies inside the page.
    pub fn enclave_set_bits(self) -> u64 {
        (self.0 >> LINE_BITS) & 0x3f
    }

    /// Set-index bits at and above bit 12, placed there by the page mapping.
    pub fn os_set_bits(self, geo: &CacheGeometry) -> u64 {
        let width = geo.set_bits().saturating_sub(OS_SET_SHIFT - LINE_BITS);
        (self.0 >> OS_SET_SHIFT) & ((1 << width) - 1)
    }
}

impl From<u64> for PhysicalAddress {
    fn from(v: u64) -> Self {
        PhysicalAddress(v)
    }
}
