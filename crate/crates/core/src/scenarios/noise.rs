use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::cache_model::{ActorId, CacheGeometry, CacheState, LINE_BITS};
use crate::error::{Error, Result};
use crate::os_model::{Background, OS_PPN_BASE, PAGE_BITS, PPN_LIMIT};

/// Owner tag of noise lines.
pub const NOISE_ACTOR: ActorId = ActorId::MAX - 1;
const NOISE_PPN_BASE: u64 = OS_PPN_BASE + PPN_LIMIT / 4;
const LINES_PER_PAGE: u64 = 1 << (PAGE_BITS - LINE_BITS);

/// Rates are accesses per unit of simulated time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum NoiseProfile {
    Idle,
    /// Evenly spaced accesses walking the pool in order.
    Streaming { rate: f64 },
    /// Poisson arrivals, uniform lines.
    Random { rate: f64 },
    /// Random at `rate` for the first `duty` fraction of every `period`.
    Bursty { rate: f64, duty: f64, period: f64 },
}

impl NoiseProfile {
    pub fn name(&self) -> String {
        match self {
            NoiseProfile::Idle => "idle".into(),
            NoiseProfile::Streaming { rate } => format!("streaming({rate})"),
            NoiseProfile::Random { rate } => format!("random({rate})"),
            NoiseProfile::Bursty { rate, duty, period } => format!("bursty({rate},{duty},{period})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseProfile::Idle => true,
            NoiseProfile::Streaming { rate } | NoiseProfile::Random { rate } => rate > 0.0 && rate.is_finite(),
            NoiseProfile::Bursty { rate, duty, period } => {
                rate > 0.0 && rate.is_finite() && (0.0..=1.0).contains(&duty) && period > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!("bad noise profile {self:?}")))
        }
    }

    /// Expected accesses over `[0, t)`.
    pub fn expected_accesses(&self, t: f64) -> f64 {
        match *self {
            NoiseProfile::Idle => 0.0,
            NoiseProfile::Streaming { rate } | NoiseProfile::Random { rate } => rate * t,
            NoiseProfile::Bursty { rate, duty, period } => {
                let full = (t / period).floor();
                let rest = (t - full * period).min(duty * period);
                rate * (full * duty * period + rest)
            }
        }
    }
}

/// Which lines the noise touches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    /// Only lines in the victim channel.
    #[default]
    Channel,
    /// Every channel but the victim's.
    OtherChannels,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub profile: NoiseProfile,
    #[serde(default)]
    pub target: NoiseTarget,
    /// Pool pages; each gives one line per targeted channel.
    #[serde(default = "default_pages")]
    pub pages: u64,
}

fn default_pages() -> u64 {
    256
}

impl NoiseSpec {
    pub fn idle() -> Self {
        NoiseSpec { profile: NoiseProfile::Idle, target: NoiseTarget::Channel, pages: default_pages() }
    }

    pub fn on_channel(profile: NoiseProfile) -> Self {
        NoiseSpec { profile, target: NoiseTarget::Channel, pages: default_pages() }
    }
}

pub struct NoiseActor {
    profile: NoiseProfile,
    pool: Vec<u64>,
    rng: ChaCha8Rng,
    next: f64,
    cursor: usize,
    count: u64,
}

impl NoiseActor {
    fn gap(&mut self) -> f64 {
        match self.profile {
            NoiseProfile::Idle => f64::INFINITY,
            NoiseProfile::Streaming { rate } => 1.0 / rate,
            NoiseProfile::Random { rate } | NoiseProfile::Bursty { rate, .. } => {
                Exp::new(rate).expect("validated rate").sample(&mut self.rng)
            }
        }
    }

    /// Push `t` out of any off-phase.
    /// `t + gap`, where only on-phase time counts towards the gap.
    fn advance(&self, t: f64, gap: f64) -> f64 {
        match self.profile {
            NoiseProfile::Bursty { duty, period, .. } => {
                let on = duty * period;
                let k = (t / period).floor();
                let tau = k * on + (t - k * period).min(on) + gap;
                let k2 = (tau / on).floor();
                k2 * period + (tau - k2 * on)
            }
            _ => t + gap,
        }
    }

    fn pick(&mut self) -> u64 {
        match self.profile {
            NoiseProfile::Streaming { .. } => {
                let pa = self.pool[self.cursor];
                self.cursor = (self.cursor + 1) % self.pool.len();
                pa
            }
            _ => self.pool[self.rng.random_range(0..self.pool.len())],
        }
    }
}

impl Background for NoiseActor {
    fn run_until(&mut self, now: f64, cache: &mut CacheState, geo: &CacheGeometry) {
        while self.next <= now {
            let pa = self.pick();
            cache.access(geo, pa, NOISE_ACTOR);
            self.count += 1;
            let g = self.gap();
            self.next = self.advance(self.next, g);
        }
    }

    fn accesses(&self) -> u64 {
        self.count
    }
}

/// A seeded background actor for `spec`, aimed relative to `channel`.
pub fn noise_workload(spec: &NoiseSpec, channel: u8, seed: u64) -> Result<NoiseActor> {
    spec.profile.validate()?;
    if spec.pages == 0 || NOISE_PPN_BASE + spec.pages > PPN_LIMIT {
        return Err(Error::Spec(format!("noise pool of {} pages does not fit", spec.pages)));
    }
    let offsets: Vec<u64> = match spec.target {
        NoiseTarget::Channel => vec![channel as u64],
        NoiseTarget::OtherChannels => (0..LINES_PER_PAGE).filter(|&c| c != channel as u64).collect(),
        NoiseTarget::All => (0..LINES_PER_PAGE).collect(),
    };
    let mut pool = Vec::with_capacity(spec.pages as usize * offsets.len());
    for p in 0..spec.pages {
        for &c in &offsets {
            pool.push(((NOISE_PPN_BASE + p) << PAGE_BITS) | (c << LINE_BITS));
        }
    }
    let mut a = NoiseActor {
        profile: spec.profile,
        pool,
        rng: ChaCha8Rng::seed_from_u64(seed),
        next: 0.0,
        cursor: 0,
        count: 0,
    };
    a.next = match spec.profile {
        NoiseProfile::Idle => f64::INFINITY,
        _ => {
            let g = a.gap();
            a.advance(0.0, g)
        }
    };
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_model::Replacement;

    fn run(spec: NoiseSpec, until: f64, seed: u64) -> (NoiseActor, CacheState, CacheGeometry) {
        let geo = CacheGeometry::with_default_hash(2, 1024, 16).unwrap();
        let mut cache = CacheState::new(&geo, Replacement::default());
        let mut a = noise_workload(&spec, 7, seed).unwrap();
        a.run_until(until, &mut cache, &geo);
        (a, cache, geo)
    }

    #[test]
    fn idle_never_touches_the_cache() {
        let (a, cache, geo) = run(NoiseSpec::idle(), 1e9, 1);
        assert_eq!(a.accesses(), 0);
        assert_eq!(cache, CacheState::new(&geo, Replacement::default()));
    }

    #[test]
    fn random_rate_matches_expectation() {
        for rate in [0.001, 0.01, 0.05] {
            let spec = NoiseSpec::on_channel(NoiseProfile::Random { rate });
            let t = 1e6;
            let mut total = 0.0;
            for seed in 0..10 {
                total += run(spec, t, seed).0.accesses() as f64;
            }
            let mean = total / 10.0;
            let want = spec.profile.expected_accesses(t);
            // Poisson: sd of the mean is sqrt(want / 10)
            assert!((mean - want).abs() < 5.0 * (want / 10.0).sqrt(), "rate {rate}: {mean} vs {want}");
        }
    }

    #[test]
    fn bursty_only_fires_in_the_on_phase() {
        let spec = NoiseSpec::on_channel(NoiseProfile::Bursty { rate: 0.1, duty: 0.25, period: 1000.0 });
        let (a, ..) = run(spec, 1e6, 3);
        let want = spec.profile.expected_accesses(1e6);
        assert!((a.accesses() as f64 - want).abs() < 5.0 * want.sqrt());
        assert!((want - 0.1 * 0.25 * 1e6).abs() < 1e-6);
    }

    #[test]
    fn targets_respect_the_channel() {
        let geo = CacheGeometry::with_default_hash(2, 1024, 16).unwrap();
        for (target, inside) in [(NoiseTarget::Channel, true), (NoiseTarget::OtherChannels, false)] {
            let a = noise_workload(&NoiseSpec { target, ..NoiseSpec::on_channel(NoiseProfile::Streaming { rate: 1.0 }) }, 7, 0)
                .unwrap();
            assert!(a.pool.iter().all(|&pa| (((pa >> LINE_BITS) & 0x3f) == 7) == inside));
            assert!(a.pool.iter().all(|&pa| geo.set_of(pa) < geo.sets_per_slice));
        }
    }

    #[test]
    fn streaming_is_evenly_spaced() {
        let (a, ..) = run(NoiseSpec::on_channel(NoiseProfile::Streaming { rate: 0.5 }), 1000.0, 0);
        assert_eq!(a.accesses(), 500);
    }

    #[test]
    fn bad_profiles() {
        assert!(noise_workload(&NoiseSpec::on_channel(NoiseProfile::Random { rate: 0.0 }), 0, 0).is_err());
        let b = NoiseProfile::Bursty { rate: 1.0, duty: 1.5, period: 10.0 };
        assert!(noise_workload(&NoiseSpec::on_channel(b), 0, 0).is_err());
    }
}
