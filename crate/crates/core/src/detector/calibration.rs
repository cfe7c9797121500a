use serde::{Deserialize, Serialize};

/// Machine-readable cause of an Anomaly verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyReason {
    /// The counter did not move between two reads.
    ClockStall,
    /// A reading fits neither the hit nor the miss distribution.
    OutOfBandLatency,
    /// A reading far above any miss: the probe was descheduled mid-access.
    InterruptedProbe,
    /// The monitoring set no longer covers the channel.
    CoverageFailure,
    /// Not a single primed line stayed resident.
    PrimeFailed,
    /// Hit and miss timings could not be told apart, or drifted.
    Calibration,
}

impl std::fmt::Display for AnomalyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AnomalyReason::ClockStall => "clock_stall",
            AnomalyReason::OutOfBandLatency => "out_of_band_latency",
            AnomalyReason::InterruptedProbe => "interrupted_probe",
            AnomalyReason::CoverageFailure => "coverage_failure",
            AnomalyReason::PrimeFailed => "prime_failed",
            AnomalyReason::Calibration => "calibration",
        };
        f.write_str(s)
    }
}

/// Empirical mean and sd of one reading population.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub sd: f64,
}

/// Readings within this many sd of the mean belong to the band.
pub const BAND_WIDTH: f64 = 5.0;

impl Band {
    pub fn from_samples(xs: &[f64]) -> Option<Band> {
        if xs.len() < 2 {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some(Band { mean, sd: var.sqrt() })
    }

    pub fn lo(&self) -> f64 {
        self.mean - BAND_WIDTH * self.sd
    }

    pub fn hi(&self) -> f64 {
        self.mean + BAND_WIDTH * self.sd
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo() && x <= self.hi()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadingClass {
    Hit,
    Miss,
    Stall,
    Interrupted,
    OutOfBand,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub hit: Band,
    pub miss: Band,
    /// Readings above this count as misses.
    pub threshold: f64,
    /// Sim time the samples were taken.
    pub at: f64,
}

impl Calibration {
    /// Bands from flush+reload (misses) and reload (hits) readings.
    pub fn from_samples(hits: &[f64], misses: &[f64], at: f64) -> Result<Calibration, AnomalyReason> {
        let (Some(hit), Some(miss)) = (Band::from_samples(hits), Band::from_samples(misses)) else {
            return Err(AnomalyReason::Calibration);
        };
        if !(hit.hi() < miss.lo()) || hit.mean <= 0.0 {
            return Err(AnomalyReason::Calibration);
        }
        Ok(Calibration { hit, miss, threshold: (hit.mean + miss.mean) / 2.0, at })
    }

    pub fn is_miss(&self, reading: f64) -> bool {
        reading > self.threshold
    }

    pub fn class(&self, reading: f64) -> ReadingClass {
        if reading <= 0.0 {
            ReadingClass::Stall
        } else if reading > 2.0 * self.miss.hi() {
            ReadingClass::Interrupted
        } else if self.hit.contains(reading) {
            ReadingClass::Hit
        } else if self.miss.contains(reading) {
            ReadingClass::Miss
        } else {
            ReadingClass::OutOfBand
        }
    }

    /// A fresh calibration is believable only if its means sit inside the
    /// bands of the reference one.
    pub fn consistent_with(&self, reference: &Calibration) -> bool {
        reference.hit.contains(self.hit.mean) && reference.miss.contains(self.miss.mean)
    }
}

/// First anomaly in a run of raw readings, if any. Stalls win over
/// interrupts, which win over plain out-of-band values.
pub fn detect_anomaly(readings: &[f64], cal: &Calibration) -> Option<AnomalyReason> {
    let mut found = None;
    for &r in readings {
        match cal.class(r) {
            ReadingClass::Stall => return Some(AnomalyReason::ClockStall),
            ReadingClass::Interrupted => found = Some(AnomalyReason::InterruptedProbe),
            ReadingClass::OutOfBand if found.is_none() => found = Some(AnomalyReason::OutOfBandLatency),
            _ => {}
        }
    }
    found
}
