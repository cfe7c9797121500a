use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::oracle::{AliasOracle, EvictRule, EvictionOracle};
use crate::cache_model::LINE_BITS;
use crate::error::{Error, Result};
use crate::os_model::PAGE_BITS;

pub const CHANNELS: usize = 64;
pub const SPOILER_GROUPS: usize = 256;
pub const CACHE_GROUPS: usize = 16;

/// Value of address bits 6-11 shared by every line of a channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Channel(u8);

impl Channel {
    pub fn new(v: u8) -> Result<Self> {
        if (v as usize) < CHANNELS {
            Ok(Channel(v))
        } else {
            Err(Error::Config(format!("channel {v} is not in 0..64")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// In-page offset whose bits 6-11 equal the channel.
    pub fn offset(self) -> u64 {
        (self.0 as u64) << LINE_BITS
    }
}

impl TryFrom<u8> for Channel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Channel::new(v)
    }
}

impl From<Channel> for u8 {
    fn from(c: Channel) -> u8 {
        c.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Explicit channel for this binary; otherwise derived from the identity.
    pub pin: Option<u8>,
}

/// Public, deterministic channel choice for a binary. Collisions between
/// unrelated binaries are possible and only cost availability.
pub fn select_channel(binary_identity: &str, config: &ChannelConfig) -> Result<Channel> {
    if let Some(p) = config.pin {
        return Channel::new(p);
    }
    let digest = Sha256::digest(binary_identity.as_bytes());
    Channel::new(digest[digest.len() - 1] & 0x3f)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoilerGroup {
    pub id: u8,
    /// Virtual addresses, one per page, in discovery order.
    pub members: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoilerGroups {
    pub groups: Vec<SpoilerGroup>,
    /// Pages that faulted when probed.
    pub unmapped: Vec<u64>,
    pub n_pages: u64,
    pub channel: Channel,
}

pub fn page_va(vpn: u64, channel: Channel) -> u64 {
    (vpn << PAGE_BITS) | channel.offset()
}

/// Partition the region into 256 classes by aliasing of the low 20 physical
/// bits. Test addresses already placed in a group are skipped; if fewer than
/// 256 classes show up the memory cannot be honest.
pub fn build_spoiler_groups(n_pages: u64, channel: Channel, oracle: &impl AliasOracle) -> Result<SpoilerGroups> {
    let mut assigned = vec![false; n_pages as usize];
    let mut unmapped = Vec::new();
    let mut groups: Vec<SpoilerGroup> = Vec::with_capacity(SPOILER_GROUPS);

    for i in 0..n_pages {
        if groups.len() == SPOILER_GROUPS {
            break;
        }
        if assigned[i as usize] {
            continue;
        }
        let test = page_va(i, channel);
        match oracle.aliases(test, test) {
            Ok(_) => {}
            Err(Error::Unmapped(_)) => {
                assigned[i as usize] = true;
                unmapped.push(i);
                continue;
            }
            Err(e) => return Err(e),
        }
        assigned[i as usize] = true;
        let mut members = vec![test];
        for j in (i + 1)..n_pages {
            if assigned[j as usize] {
                continue;
            }
            let va = page_va(j, channel);
            match oracle.aliases(test, va) {
                Ok(true) => {
                    assigned[j as usize] = true;
                    members.push(va);
                }
                Ok(false) => {}
                Err(Error::Unmapped(_)) => {
                    assigned[j as usize] = true;
                    unmapped.push(j);
                }
                Err(e) => return Err(e),
            }
        }
        groups.push(SpoilerGroup { id: groups.len() as u8, members });
    }
    // pages never reached as test addresses may still be holes
    for j in 0..n_pages {
        if !assigned[j as usize] {
            let va = page_va(j, channel);
            if let Err(Error::Unmapped(_)) = oracle.aliases(va, va) {
                unmapped.push(j);
            }
        }
    }
    unmapped.sort_unstable();
    unmapped.dedup();

    if groups.len() < SPOILER_GROUPS {
        return Err(Error::MemoryManipulation(format!(
            "only {} of {} spoiler groups could be formed from {} pages",
            groups.len(),
            SPOILER_GROUPS,
            n_pages
        )));
    }
    Ok(SpoilerGroups { groups, unmapped, n_pages, channel })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGroup {
    /// Channel-relative id, 0..16, in discovery order.
    pub id: u8,
    /// Ids of the spoiler groups merged into this one.
    pub spoiler_ids: Vec<u8>,
    pub members: Vec<u64>,
}

fn flatten(groups: &[SpoilerGroup], ids: impl Iterator<Item = usize>) -> Vec<u64> {
    let mut out = Vec::new();
    for i in ids {
        out.extend_from_slice(&groups[i].members);
    }
    out
}

/// Merge the 256 spoiler groups into the 16 groups sharing a set index,
/// using only eviction tests.
pub fn regroup_to_cache_groups(spoiler: &SpoilerGroups, oracle: &mut impl EvictionOracle) -> Result<Vec<CacheGroup>> {
    let groups = &spoiler.groups;
    let n = groups.len();
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(CACHE_GROUPS);

    for i in 0..CACHE_GROUPS {
        let Some(t) = (0..n).find(|&j| !taken[j]) else {
            return Err(Error::MemoryManipulation(format!("ran out of spoiler groups at cache group {i}")));
        };
        let test = &groups[t].members;
        let mut copy: Vec<bool> = (0..n).map(|j| !taken[j] && j != t).collect();
        let mut chosen = vec![t];

        let rest = flatten(groups, (0..n).filter(|&j| copy[j]));
        if !oracle.evicted(test, &rest, EvictRule::All) {
            return Err(Error::MemoryManipulation(format!(
                "spoiler group {t} cannot be evicted by the rest of the region"
            )));
        }
        // stage one: drop groups the test array does not need
        for j in (t + 1)..n {
            if !copy[j] {
                continue;
            }
            copy[j] = false;
            let rest = flatten(groups, (0..n).filter(|&k| copy[k]));
            if !oracle.evicted(test, &rest, EvictRule::All) {
                chosen.push(j);
                copy[j] = true;
            }
        }
        // stage two: pull in every group the core evicts, repeating while the
        // core grows so slices the test array missed get covered too
        loop {
            let core_lines = flatten(groups, chosen.iter().copied());
            let before = chosen.len();
            for j in 0..n {
                if taken[j] || chosen.contains(&j) {
                    continue;
                }
                if oracle.evicted(&groups[j].members, &core_lines, EvictRule::Any) {
                    chosen.push(j);
                }
            }
            if chosen.len() == before {
                break;
            }
        }
        chosen.sort_unstable();
        for &j in &chosen {
            taken[j] = true;
        }
        let want = n / CACHE_GROUPS;
        if chosen.len() != want {
            return Err(Error::MemoryManipulation(format!(
                "cache group {i} holds {} spoiler groups, expected {want}",
                chosen.len()
            )));
        }
        out.push(CacheGroup {
            id: i as u8,
            spoiler_ids: chosen.iter().map(|&j| groups[j].id).collect(),
            members: flatten(groups, chosen.iter().copied()),
        });
    }
    if let Some(j) = (0..n).find(|&j| !taken[j]) {
        return Err(Error::MemoryManipulation(format!("spoiler group {j} joins no cache group")));
    }
    Ok(out)
}
