use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mapping::{MappingPolicy, PageMapping, PAGE_BITS, PPN_LIMIT};
use crate::cache_model::{AccessResult, ActorId, CacheGeometry, CacheState, Replacement, LINE_BITS};
use crate::detector::{ClockOracle, LatencyModel};
use crate::error::{Error, Result};

/// Something that touches the cache on its own schedule (noise, attackers on
/// other cores). Called before every timed access with the current time.
pub trait Background: Send {
    fn run_until(&mut self, now: f64, cache: &mut CacheState, geo: &CacheGeometry);
    fn accesses(&self) -> u64;
}

/// One timed load as the enclave sees it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    /// Ground truth, for oracles only.
    pub miss: bool,
    pub latency: f64,
    pub start: f64,
    pub ticks_before: f64,
    pub ticks_after: f64,
}

impl Sample {
    pub fn reading(&self) -> f64 {
        self.ticks_after - self.ticks_before
    }
}

#[derive(Clone, Debug)]
pub struct Actor {
    pub name: String,
    pub mapping: Option<PageMapping>,
    pub alive: bool,
}

/// Lines the OS touches in one channel at a fixed interval.
#[derive(Clone, Debug)]
pub struct PollutionJob {
    pub lines: Vec<u64>,
    pub interval: f64,
    next: f64,
}

impl PollutionJob {
    /// `count` lines spread round-robin over every (set, slice) of `channel`.
    pub fn new(geo: &CacheGeometry, channel: u8, count: usize, interval: f64, ppn_base: u64) -> Result<Self> {
        let per_channel = geo.sets_per_channel();
        let targets = per_channel * geo.slices;
        let mut lines = Vec::with_capacity(count);
        let mut found: Vec<Vec<u64>> = vec![Vec::new(); targets];
        let mut cursor = vec![0u64; per_channel];
        for j in 0..count {
            let t = j % targets;
            let os_set = t % per_channel;
            let k = j / targets;
            while found[t].len() <= k {
                let ppn = ppn_base + os_set as u64 + (cursor[os_set] * per_channel as u64);
                cursor[os_set] += 1;
                if ppn >= PPN_LIMIT {
                    return Err(Error::Exhausted { base: ppn_base, needed: count as u64 });
                }
                let pa = (ppn << PAGE_BITS) | ((channel as u64) << LINE_BITS);
                let s = geo.slice_of(pa);
                let slot = os_set + s * per_channel;
                found[slot].push(pa);
            }
            lines.push(found[t][k]);
        }
        Ok(PollutionJob { lines, interval, next: 0.0 })
    }
}

/// The machine: cache, time, page tables of every actor, and the OS's
/// standing interference.
pub struct World {
    pub geo: CacheGeometry,
    pub cache: CacheState,
    pub clock: ClockOracle,
    pub latency: LatencyModel,
    /// Loop overhead between two timed loads of the same thread.
    pub access_gap: f64,
    pub target_channel: u8,
    now: f64,
    actors: Vec<Actor>,
    rng: ChaCha8Rng,
    pollution: Vec<PollutionJob>,
    background: Vec<Box<dyn Background>>,
    next_ppn: u64,
    os_actor: ActorId,
    schedule: Option<Vec<ActorId>>,
}

/// PPNs from here up are reserved for the OS and noise actors.
pub const OS_PPN_BASE: u64 = PPN_LIMIT / 2;
const REGION_ALIGN: u64 = 256;

impl World {
    pub fn new(geo: CacheGeometry, policy: Replacement, latency: LatencyModel, seed: u64) -> Self {
        let cache = CacheState::new(&geo, policy);
        let mut w = World {
            geo,
            cache,
            clock: ClockOracle::default(),
            latency,
            access_gap: 2.0,
            target_channel: 0,
            now: 0.0,
            actors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            pollution: Vec::new(),
            background: Vec::new(),
            next_ppn: REGION_ALIGN,
            os_actor: 0,
            schedule: None,
        };
        w.os_actor = w.add_actor("os", None);
        w
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn os_actor(&self) -> ActorId {
        self.os_actor
    }

    pub fn add_actor(&mut self, name: &str, mapping: Option<PageMapping>) -> ActorId {
        self.actors.push(Actor { name: name.to_string(), mapping, alive: true });
        (self.actors.len() - 1) as ActorId
    }

    /// Next free, aligned PPN range of `n_pages` below the OS area.
    pub fn reserve_ppns(&mut self, n_pages: u64) -> Result<u64> {
        let base = self.next_ppn;
        let end = base + n_pages;
        if end > OS_PPN_BASE {
            return Err(Error::Exhausted { base, needed: n_pages });
        }
        self.next_ppn = end.div_ceil(REGION_ALIGN) * REGION_ALIGN;
        Ok(base)
    }

    /// Allocate a fresh region and register an enclave on it. `make` gets
    /// the reserved base PPN and returns the policy to apply.
    pub fn spawn_enclave(
        &mut self,
        name: &str,
        n_pages: u64,
        make: impl FnOnce(u64) -> MappingPolicy,
    ) -> Result<ActorId> {
        let base = self.reserve_ppns(n_pages)?;
        let mapping = PageMapping::allocate(make(base), n_pages)?;
        Ok(self.add_actor(name, Some(mapping)))
    }

    pub fn actor(&self, id: ActorId) -> Result<&Actor> {
        self.actors.get(id as usize).ok_or(Error::UnknownActor(id))
    }

    pub fn actor_count(&self) -> usize {
        self.actors.len()
    }

    pub fn mapping(&self, id: ActorId) -> Result<&PageMapping> {
        self.actor(id)?.mapping.as_ref().ok_or(Error::UnknownActor(id))
    }

    pub fn mapping_mut(&mut self, id: ActorId) -> Result<&mut PageMapping> {
        self.actors
            .get_mut(id as usize)
            .and_then(|a| a.mapping.as_mut())
            .ok_or(Error::UnknownActor(id))
    }

    pub fn translate(&self, id: ActorId, va: u64) -> Result<u64> {
        Ok(self.mapping(id)?.translate(va)?.0)
    }

    /// Untimed physical access, as an attacker on another core would do.
    pub fn access_pa(&mut self, actor: ActorId, pa: u64) -> AccessResult {
        self.cache.access(&self.geo, pa, actor)
    }

    fn run_background(&mut self) {
        let now = self.now;
        for job in &mut self.pollution {
            if job.interval <= 0.0 {
                for &pa in &job.lines {
                    self.cache.access(&self.geo, pa, self.os_actor);
                }
                continue;
            }
            while job.next <= now {
                for &pa in &job.lines {
                    self.cache.access(&self.geo, pa, self.os_actor);
                }
                job.next += job.interval;
            }
        }
        for b in &mut self.background {
            b.run_until(now, &mut self.cache, &self.geo);
        }
    }

    /// A load by `actor` at `va`, timed through the counting thread.
    pub fn timed_access(&mut self, actor: ActorId, va: u64) -> Result<Sample> {
        let pa = self.translate(actor, va)?;
        self.run_background();
        let miss = self.cache.access(&self.geo, pa, actor).is_miss();
        let latency = self.latency.sample(miss, &mut self.rng);
        let start = self.now;
        let end = start + latency;
        let s = Sample {
            miss,
            latency,
            start,
            ticks_before: self.clock.ticks(start),
            ticks_after: self.clock.ticks(end),
        };
        self.now = end + self.access_gap;
        Ok(s)
    }

    /// Untimed load through the page table (prime passes that don't measure).
    pub fn access_va(&mut self, actor: ActorId, va: u64) -> Result<AccessResult> {
        let pa = self.translate(actor, va)?;
        self.run_background();
        let r = self.cache.access(&self.geo, pa, actor);
        let lat = self.latency.sample(r.is_miss(), &mut self.rng);
        self.now += lat + self.access_gap;
        Ok(r)
    }

    pub fn flush(&mut self, actor: ActorId, va: u64) -> Result<bool> {
        let pa = self.translate(actor, va)?;
        Ok(self.cache.flush(&self.geo, pa))
    }

    pub fn advance(&mut self, dt: f64) {
        self.now += dt.max(0.0);
        self.run_background();
    }

    pub fn terminate(&mut self, actor: ActorId) -> Result<usize> {
        let a = self.actors.get_mut(actor as usize).ok_or(Error::UnknownActor(actor))?;
        a.alive = false;
        Ok(self.cache.invalidate_owner(actor))
    }

    pub fn add_pollution(&mut self, lines: usize, interval: f64) -> Result<()> {
        if lines == 0 {
            return Ok(());
        }
        let base = OS_PPN_BASE + (self.pollution.len() as u64) * (1 << 16);
        let mut job = PollutionJob::new(&self.geo, self.target_channel, lines, interval, base)?;
        job.next = self.now;
        self.pollution.push(job);
        Ok(())
    }

    pub fn pollution_jobs(&self) -> &[PollutionJob] {
        &self.pollution
    }

    pub fn add_background(&mut self, b: Box<dyn Background>) {
        self.background.push(b);
    }

    pub fn background_accesses(&self) -> u64 {
        self.background.iter().map(|b| b.accesses()).sum()
    }

    pub fn set_schedule(&mut self, order: Vec<ActorId>) {
        self.schedule = Some(order);
    }

    pub fn schedule(&self) -> Option<&[ActorId]> {
        self.schedule.as_deref()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
