//! Simulator and algorithms for detecting enclave clones through contention
//! on a shared last-level cache channel.

pub mod cache_model;
pub mod detector;
pub mod eviction_builder;
pub mod linearity_verifier;
pub mod error;
pub mod os_model;
pub mod scenarios;

pub use cache_model::{CacheGeometry, CacheState, PhysicalAddress, Replacement};
pub use error::{Error, Result};
pub use os_model::{PageMapping, World};
