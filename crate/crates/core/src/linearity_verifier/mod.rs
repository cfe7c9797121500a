//! Conditions a linear memory arrangement must satisfy, a constraint search
//! for arrangements that satisfy them without being linear, and the
//! channel-evasion question for partial monitoring.

mod conditions;
mod evasion;
mod layout;
mod search;

pub use conditions::{
    check_conditions, ConditionOutcome, ConditionReport, Counterexample, Hypothesis, Oracles, PageTableOracles,
    Predicate,
};
pub use layout::AddressLayout;
pub use search::{is_affine, revalidate, search_nonlinear, to_adversary_script, SearchConfig, SearchResult};
pub use evasion::{evasion_demo, EvasionResult, EvasionWitness, CHANNEL_SETS};
