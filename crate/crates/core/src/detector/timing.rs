use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

/// Hit and miss latency, each a normal truncated at `truncate_sd` standard
/// deviations so that unperturbed readings never leave their band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub hit: Gaussian,
    pub miss: Gaussian,
    pub truncate_sd: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            hit: Gaussian { mean: 100.0, sd: 8.0 },
            miss: Gaussian { mean: 450.0, sd: 25.0 },
            truncate_sd: 4.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hit.sd >= 0.0
            && self.miss.sd >= 0.0
            && self.truncate_sd > 0.0
            && self.hit.mean > 0.0
            && self.miss.mean.is_finite();
        if !ok {
            return Err(Error::Config("latency parameters must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, miss: bool, rng: &mut R) -> f64 {
        let g = if miss { self.miss } else { self.hit };
        if g.sd == 0.0 {
            return g.mean;
        }
        let n = Normal::new(g.mean, g.sd).expect("validated sd");
        let lim = self.truncate_sd * g.sd;
        loop {
            let x: f64 = n.sample(rng);
            if (x - g.mean).abs() <= lim {
                return x.max(0.0);
            }
        }
    }

    /// Upper edge of the hit support is below the lower edge of the miss one.
    pub fn separable(&self) -> bool {
        self.hit.mean + self.truncate_sd * self.hit.sd < self.miss.mean - self.truncate_sd * self.miss.sd
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockPerturbation {
    pub start: f64,
    pub end: f64,
    /// Multiplier on the tick rate inside the window. 0 stalls the counter.
    pub rate_factor: f64,
}

/// The counting thread: a counter that advances at `rate` ticks per unit of
/// simulated time, except inside perturbation windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockOracle {
    pub rate: f64,
    pub perturbations: Vec<ClockPerturbation>,
}

impl Default for ClockOracle {
    fn default() -> Self {
        ClockOracle { rate: 1.0, perturbations: Vec::new() }
    }
}

impl ClockOracle {
    pub fn add(&mut self, p: ClockPerturbation) -> Result<()> {
        if !(p.end > p.start) || p.rate_factor < 0.0 || !p.rate_factor.is_finite() {
            return Err(Error::Script(format!("bad clock window {p:?}")));
        }
        if self.perturbations.iter().any(|q| p.start < q.end && q.start < p.end) {
            return Err(Error::Script("clock windows overlap".into()));
        }
        self.perturbations.push(p);
        self.perturbations.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(())
    }

    /// Counter value at simulated time `t`.
    pub fn ticks(&self, t: f64) -> f64 {
        let mut lost = 0.0;
        for p in &self.perturbations {
            if p.start >= t {
                break;
            }
            let overlap = t.min(p.end) - p.start;
            lost += overlap * (1.0 - p.rate_factor);
        }
        self.rate * (t - lost)
    }

    pub fn reading(&self, t0: f64, t1: f64) -> f64 {
        self.ticks(t1) - self.ticks(t0)
    }

    pub fn is_perturbed(&self) -> bool {
        !self.perturbations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_model_is_separable() {
        assert!(LatencyModel::default().separable());
    }

    #[test]
    fn samples_stay_in_truncation_band() {
        let m = LatencyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20_000 {
            let h = m.sample(false, &mut rng);
            assert!((h - 100.0).abs() <= 32.0);
            let x = m.sample(true, &mut rng);
            assert!((x - 450.0).abs() <= 100.0);
        }
    }

    #[test]
    fn clock_unperturbed_is_linear() {
        let c = ClockOracle { rate: 2.0, perturbations: vec![] };
        assert_eq!(c.reading(10.0, 35.0), 50.0);
    }

    #[test]
    fn slow_and_stalled_windows() {
        let mut c = ClockOracle::default();
        c.add(ClockPerturbation { start: 100.0, end: 200.0, rate_factor: 0.5 }).unwrap();
        c.add(ClockPerturbation { start: 300.0, end: 400.0, rate_factor: 0.0 }).unwrap();
        assert_eq!(c.reading(0.0, 100.0), 100.0);
        assert_eq!(c.reading(100.0, 200.0), 50.0);
        assert_eq!(c.reading(150.0, 250.0), 75.0);
        assert_eq!(c.reading(310.0, 390.0), 0.0);
        assert_eq!(c.reading(400.0, 410.0), 10.0);
        assert!(c.add(ClockPerturbation { start: 150.0, end: 160.0, rate_factor: 1.0 }).is_err());
    }
}
