use serde::{Deserialize, Serialize};

use super::mapping::MapEdit;
use super::world::World;
use crate::cache_model::ActorId;
use crate::detector::ClockPerturbation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    SwapPair { actor: ActorId, vpn_a: u64, vpn_b: u64 },
    Remap { actor: ActorId, vpn: u64, ppn: u64 },
    /// Touch `lines` lines of the target channel every `interval` time
    /// units; interval 0 means before every enclave load.
    PolluteChannel { lines: usize, interval: f64 },
    /// Divide the counting thread's tick rate by `factor` inside the window.
    SlowClock { factor: f64, start: f64, end: f64 },
    /// Deschedule the counting thread: the counter stops inside the window.
    StallClock { start: f64, end: f64 },
    StepSchedule { order: Vec<ActorId> },
}

/// Declarative, replayable list of OS actions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversaryScript {
    #[serde(default)]
    pub actions: Vec<Action>,
}

impl AdversaryScript {
    pub fn new(actions: Vec<Action>) -> Self {
        AdversaryScript { actions }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        for a in &self.actions {
            match a {
                Action::SwapPair { actor, vpn_a, vpn_b } => {
                    let m = world.mapping(*actor)?;
                    for v in [vpn_a, vpn_b] {
                        if *v >= m.n_pages() {
                            return Err(Error::Script(format!("vpn {v:#x} outside actor {actor}'s region")));
                        }
                    }
                }
                Action::Remap { actor, vpn, .. } => {
                    if *vpn >= world.mapping(*actor)?.n_pages() {
                        return Err(Error::Script(format!("vpn {vpn:#x} outside actor {actor}'s region")));
                    }
                }
                Action::PolluteChannel { interval, .. } => {
                    if !(*interval >= 0.0) || !interval.is_finite() {
                        return Err(Error::Script("pollution interval must be >= 0".into()));
                    }
                }
                Action::SlowClock { factor, start, end } => {
                    if !(*factor > 0.0) || !factor.is_finite() || !(end > start) {
                        return Err(Error::Script("slow_clock needs factor > 0 and start < end".into()));
                    }
                }
                Action::StallClock { start, end } => {
                    if !(end > start) {
                        return Err(Error::Script("stall_clock needs start < end".into()));
                    }
                }
                Action::StepSchedule { order } => {
                    if order.is_empty() {
                        return Err(Error::Script("empty step schedule".into()));
                    }
                    for id in order {
                        world.actor(*id)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Validate the whole script, then apply it in order.
pub fn apply_adversary(world: &mut World, script: &AdversaryScript) -> Result<()> {
    script.validate(world)?;
    for a in &script.actions {
        match a {
            Action::SwapPair { actor, vpn_a, vpn_b } => {
                world.mapping_mut(*actor)?.apply_edit(&MapEdit::SwapPair { vpn_a: *vpn_a, vpn_b: *vpn_b })?
            }
            Action::Remap { actor, vpn, ppn } => {
                world.mapping_mut(*actor)?.apply_edit(&MapEdit::Remap { vpn: *vpn, ppn: *ppn })?
            }
            Action::PolluteChannel { lines, interval } => world.add_pollution(*lines, *interval)?,
            Action::SlowClock { factor, start, end } => world.clock.add(ClockPerturbation {
                start: *start,
                end: *end,
                rate_factor: 1.0 / factor,
            })?,
            Action::StallClock { start, end } => {
                world.clock.add(ClockPerturbation { start: *start, end: *end, rate_factor: 0.0 })?
            }
            Action::StepSchedule { order } => world.set_schedule(order.clone()),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_model::{CacheGeometry, Replacement};
    use crate::detector::LatencyModel;
    use crate::os_model::MappingPolicy;

    fn world() -> (World, ActorId) {
        let geo = CacheGeometry::with_default_hash(2, 1024, 4).unwrap();
        let mut w = World::new(geo, Replacement::default(), LatencyModel::default(), 1);
        let a = w.spawn_enclave("e", 16, |b| MappingPolicy::Linear { base: b }).unwrap();
        (w, a)
    }

    #[test]
    fn toml_round_trip() {
        let s = AdversaryScript::new(vec![
            Action::SwapPair { actor: 1, vpn_a: 0, vpn_b: 3 },
            Action::PolluteChannel { lines: 12, interval: 0.0 },
            Action::SlowClock { factor: 4.0, start: 0.0, end: 1e9 },
            Action::StallClock { start: 1e9, end: 2e9 },
            Action::StepSchedule { order: vec![1, 0, 1] },
        ]);
        let text = s.to_toml().unwrap();
        assert_eq!(AdversaryScript::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn swap_applies_and_keeps_offsets() {
        let (mut w, a) = world();
        let before = w.mapping(a).unwrap().clone();
        apply_adversary(&mut w, &AdversaryScript::new(vec![Action::SwapPair { actor: a, vpn_a: 2, vpn_b: 5 }]))
            .unwrap();
        let m = w.mapping(a).unwrap();
        assert_eq!(m.ppn(2), before.ppn(5));
        assert!(m.is_injective());
        assert_eq!(m.translate(0x2abc).unwrap().0 & 0xfff, 0xabc);
    }

    #[test]
    fn invalid_references_rejected() {
        let (mut w, a) = world();
        let bad = [
            Action::SwapPair { actor: a, vpn_a: 0, vpn_b: 99 },
            Action::SwapPair { actor: 42, vpn_a: 0, vpn_b: 1 },
            Action::StepSchedule { order: vec![a, 77] },
            Action::SlowClock { factor: 0.0, start: 0.0, end: 1.0 },
        ];
        for b in bad {
            assert!(apply_adversary(&mut w, &AdversaryScript::new(vec![b])).is_err());
        }
    }

    #[test]
    fn zero_line_pollution_changes_nothing() {
        let (mut w, _) = world();
        apply_adversary(&mut w, &AdversaryScript::new(vec![Action::PolluteChannel { lines: 0, interval: 1.0 }]))
            .unwrap();
        assert!(w.pollution_jobs().is_empty());
    }

    #[test]
    fn slow_clock_scales_rate() {
        let (mut w, _) = world();
        apply_adversary(&mut w, &AdversaryScript::new(vec![Action::SlowClock { factor: 2.0, start: 0.0, end: 100.0 }]))
            .unwrap();
        assert_eq!(w.clock.reading(0.0, 100.0), 50.0);
    }
}
