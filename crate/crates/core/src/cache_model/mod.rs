//! Addressed LLC model: set/slice decomposition, quad-age replacement and
//! the DRAM bank/row mapping used as a timing oracle.

mod dram;
mod geometry;
mod state;

pub use dram::{dram_map, row_conflict, DramCoordinates, BANK_FUNCTIONS, ROW_SHIFT};
pub use geometry::{
    output_bits, CacheGeometry, Decomposed, PhysicalAddress, SliceHash, LINE_BITS, LINE_SIZE, OS_SET_SHIFT,
    PA_BITS, PA_MASK,
};
pub use state::{AccessResult, ActorId, CacheLineState, CacheState, Evicted, Replacement, MAX_AGE};

/// Free-function form of [`CacheGeometry::decompose`].
pub fn decompose(pa: PhysicalAddress, geo: &CacheGeometry) -> Decomposed {
    geo.decompose(pa)
}

/// Free-function form of [`CacheState::access`].
pub fn access(state: &mut CacheState, geo: &CacheGeometry, pa: PhysicalAddress, actor: ActorId) -> AccessResult {
    state.access(geo, pa.0, actor)
}
