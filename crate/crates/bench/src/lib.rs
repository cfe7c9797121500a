//! Fixtures shared by the criterion benches.

use clonesim_core::detector::{spawn_instances, Detector, DetectorConfig, LatencyModel};
use clonesim_core::eviction_builder::Channel;
use clonesim_core::{CacheGeometry, Replacement, World};

pub fn two_slice_geometry() -> CacheGeometry {
    CacheGeometry::with_default_hash(2, 1024, 16).expect("valid geometry")
}

/// A world with `n` calibrated and primed instances on channel 0.
pub fn primed_world(n: usize, seed: u64) -> (World, Vec<Detector>) {
    let mut world = World::new(two_slice_geometry(), Replacement::default(), LatencyModel::default(), seed);
    let cfg = DetectorConfig { m: 16 / n.max(1), n: n.max(1), ..Default::default() };
    let mut ds = spawn_instances(&mut world, n, Channel::new(0).expect("channel 0"), &cfg).expect("spawn");
    for d in &mut ds {
        d.prime(&mut world).expect("prime");
    }
    (world, ds)
}
