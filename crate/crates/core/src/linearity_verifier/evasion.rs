use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::os_model::{MappingPolicy, PageMapping};

/// Sets of one channel on one slice, indexed by physical bits 12-15.
pub const CHANNEL_SETS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvasionWitness {
    pub clone_a: MappingPolicy,
    pub clone_b: MappingPolicy,
    /// Region pages each clone is given.
    pub n_pages: u64,
    /// Sets the clones think they watch: VPN bits 0-3 under the linear guess.
    pub believed: Vec<u8>,
    /// Sets they really watch, from the page tables.
    pub sets_a: Vec<u8>,
    pub sets_b: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvasionResult {
    pub k: usize,
    pub witness: Option<EvasionWitness>,
    /// Subset pairs examined by the exhaustive pass.
    pub pairs_checked: u64,
}

fn subsets(k: usize) -> Vec<u16> {
    (0..=u16::MAX).filter(|s| s.count_ones() as usize == k).collect()
}

/// Each clone monitors the first `k` pages of its region, taking their set
/// from the VPN as if memory were linear. The OS picks which real sets those
/// pages hit. Can it give two clones disjoint sets?
pub fn evasion_demo(k: usize) -> Result<EvasionResult> {
    if !(1..=CHANNEL_SETS).contains(&k) {
        return Err(Error::Config(format!("k must be in 1..=16, got {k}")));
    }
    let all = subsets(k);
    let mut pairs = 0u64;
    let mut found = None;
    'outer: for &a in &all {
        for &b in &all {
            pairs += 1;
            if a & b == 0 {
                found = Some((a, b));
                break 'outer;
            }
        }
    }
    let Some((a, b)) = found else {
        return Ok(EvasionResult { k, witness: None, pairs_checked: pairs });
    };
    // lexicographically first pair is {0..k} and {k..2k}: two linear regions
    // whose frame numbers differ by k modulo 16
    debug_assert_eq!(a, ((1u32 << k) - 1) as u16);
    let n_pages = CHANNEL_SETS as u64;
    let clone_a = MappingPolicy::Linear { base: 256 };
    let clone_b = MappingPolicy::Linear { base: 512 + b.trailing_zeros() as u64 };
    let watched = |policy: &MappingPolicy| -> Result<Vec<u8>> {
        let m = PageMapping::allocate(policy.clone(), n_pages)?;
        let mut s: Vec<u8> = (0..k as u64).map(|v| (m.ppn(v).unwrap() & 0xf) as u8).collect();
        s.sort_unstable();
        Ok(s)
    };
    let sets_a = watched(&clone_a)?;
    let sets_b = watched(&clone_b)?;
    let believed: Vec<u8> = (0..k as u8).collect();
    if sets_a.iter().any(|s| sets_b.contains(s)) {
        return Err(Error::Spec("witness construction does not separate the clones".into()));
    }
    Ok(EvasionResult {
        k,
        witness: Some(EvasionWitness { clone_a, clone_b, n_pages, believed, sets_a, sets_b }),
        pairs_checked: pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_set_is_evadable() {
        let r = evasion_demo(1).unwrap();
        let w = r.witness.unwrap();
        assert_eq!(w.believed, vec![0]);
        assert_eq!(w.sets_a, vec![0]);
        assert_eq!(w.sets_b, vec![1]);
    }

    #[test]
    fn all_sixteen_close_the_gap() {
        let r = evasion_demo(16).unwrap();
        assert!(r.witness.is_none());
        assert_eq!(r.pairs_checked, 1);
    }

    #[test]
    fn threshold_sits_at_half_the_channel() {
        for k in 1..=16 {
            let r = evasion_demo(k).unwrap();
            assert_eq!(r.witness.is_some(), 2 * k <= 16, "k={k}");
            if let Some(w) = r.witness {
                assert_eq!(w.sets_a.len(), k);
                assert!(w.sets_a.iter().all(|s| !w.sets_b.contains(s)));
            }
        }
    }

    #[test]
    fn nine_sets_checks_every_pair() {
        let n = subsets(9).len() as u64;
        assert_eq!(n, 11440);
        assert_eq!(evasion_demo(9).unwrap().pairs_checked, n * n);
    }

    #[test]
    fn out_of_range_k() {
        assert!(evasion_demo(0).is_err());
        assert!(evasion_demo(17).is_err());
    }
}
