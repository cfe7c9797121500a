//! The untrusted OS: page tables, the oracles an enclave can query, and the
//! adversarial actions of a malicious kernel.

mod adversary;
mod mapping;
mod world;

pub use adversary::{apply_adversary, Action, AdversaryScript};
pub use mapping::{
    alias20, allocate, translate, MapEdit, MappingPolicy, PageMapping, BOUNDARY_PAGES, PAGE_BITS, PAGE_SIZE,
    PPN_LIMIT,
};
pub use world::{Actor, Background, PollutionJob, Sample, World, OS_PPN_BASE};
