use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cache_model::ActorId;
use crate::detector::{Detector, DetectorConfig, Verdict};
use crate::error::Result;
use crate::eviction_builder::{default_region_pages, select_channel, ChannelConfig, MonitoringSet};
use crate::os_model::{MappingPolicy, World};

/// Platform counter shared by every instance of one binary.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotonicCounter {
    value: u64,
}

impl MonotonicCounter {
    pub fn starting_at(value: u64) -> Self {
        MonotonicCounter { value }
    }

    pub fn increment(&mut self) -> u64 {
        self.value += 1;
        self.value
    }

    pub fn read(&self) -> u64 {
        self.value
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    pub payload: String,
    pub mc_value: u64,
    /// Instance that produced it. Ground truth for the report only.
    pub sealed_by: ActorId,
}

/// Sealing keyed by (binary identity, platform). No cryptography: only the
/// scoping matters, and it lets every clone open every other clone's blobs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedStore {
    blobs: BTreeMap<(String, String), Vec<SealedBlob>>,
}

impl SealedStore {
    pub fn seal(&mut self, identity: &str, platform: &str, blob: SealedBlob) {
        self.blobs.entry((identity.to_string(), platform.to_string())).or_default().push(blob);
    }

    pub fn readable(&self, identity: &str, platform: &str) -> &[SealedBlob] {
        self.blobs
            .get(&(identity.to_string(), platform.to_string()))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// What one binary runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Program {
    /// Data owner side of the interpreter: seal each item with a fresh
    /// counter value.
    BiSgxLike { data: Option<String>, mc: Option<u64> },
    KvStore { map: BTreeMap<String, String> },
    /// Forwards whatever it was sent, in arrival order.
    Proxy { queue: Vec<String> },
}

/// One loaded instance. State moves only through the methods below.
#[derive(Clone, Debug)]
pub struct ToyEnclave {
    pub identity: String,
    pub actor: ActorId,
    pub program: Program,
    pub detector: Option<Detector>,
    /// First alarm seen; the instance refuses all work after it.
    pub halted: Option<Verdict>,
}

impl ToyEnclave {
    /// Load a new instance on its own region. With a detector it calibrates
    /// and primes right away.
    pub fn launch(world: &mut World, identity: &str, program: Program, detector: Option<&DetectorConfig>) -> Result<Self> {
        let pages = default_region_pages(&world.geo);
        let name = format!("{identity}#{}", world.actor_count());
        let actor = world.spawn_enclave(&name, pages, |b| MappingPolicy::Linear { base: b })?;
        let mut e = ToyEnclave { identity: identity.to_string(), actor, program, detector: None, halted: None };
        if let Some(cfg) = detector {
            let channel = select_channel(identity, &ChannelConfig::default())?;
            world.target_channel = channel.value();
            let ms = MonitoringSet::from_ground_truth(world.mapping(actor)?, &world.geo, channel)?;
            let mut d = Detector::new(actor, ms, cfg.clone(), world.geo.ways)?;
            let v = d.start(world)?;
            if v.is_alarm() {
                e.halted = Some(v);
            }
            e.detector = Some(d);
        }
        Ok(e)
    }

    /// Probe before doing anything observable. Without a detector this is
    /// always NoClone.
    pub fn guard(&mut self, world: &mut World) -> Result<Verdict> {
        if let Some(v) = self.halted {
            return Ok(v);
        }
        let Some(d) = self.detector.as_mut() else {
            return Ok(Verdict::NoClone);
        };
        let v = d.check(world)?;
        if v.is_alarm() {
            self.halted = Some(v);
        }
        Ok(v)
    }

    pub fn verdict(&self) -> Verdict {
        self.halted.unwrap_or(Verdict::NoClone)
    }

    pub fn kv_put(&mut self, key: &str, value: &str) {
        if let Program::KvStore { map } = &mut self.program {
            map.insert(key.to_string(), value.to_string());
        }
    }

    pub fn kv_get(&self, key: &str) -> Option<String> {
        match &self.program {
            Program::KvStore { map } => map.get(key).cloned(),
            _ => None,
        }
    }

    pub fn kv_snapshot(&self) -> String {
        match &self.program {
            Program::KvStore { map } => serde_json::to_string(map).unwrap_or_default(),
            _ => String::new(),
        }
    }

    /// Load a snapshot if its counter value is the current one
    /// (inc-then-store: anything older is a rollback).
    pub fn kv_restore(&mut self, blob: &SealedBlob, counter: &MonotonicCounter) -> bool {
        if blob.mc_value != counter.read() {
            return false;
        }
        match serde_json::from_str::<BTreeMap<String, String>>(&blob.payload) {
            Ok(map) => {
                self.program = Program::KvStore { map };
                true
            }
            Err(_) => false,
        }
    }
}
