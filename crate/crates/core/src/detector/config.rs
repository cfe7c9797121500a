use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Ways filled per monitored set.
    pub m: usize,
    /// Observations per window.
    pub w: usize,
    /// Misses in a window that mean a clone.
    pub t: usize,
    /// Instances allowed to run at once.
    #[serde(rename = "instances")]
    pub n: usize,
    /// Sim time between calibrations; None calibrates once.
    #[serde(default)]
    pub recalibration_period: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { m: 12, w: 64, t: 1, n: 1, recalibration_period: None }
    }
}

impl DetectorConfig {
    pub fn validate(&self, ways: usize) -> Result<()> {
        let range = ways_for_instances(ways, self.n)?;
        if !range.contains(&self.m) {
            return Err(Error::Config(format!(
                "m={} outside {}..={} for W={ways}, N={}",
                self.m,
                range.start(),
                range.end(),
                self.n
            )));
        }
        if self.w == 0 || self.t == 0 || self.t > self.w {
            return Err(Error::Config(format!("need 1 <= t <= w, got t={}, w={}", self.t, self.w)));
        }
        if let Some(p) = self.recalibration_period {
            if !(p > 0.0) {
                return Err(Error::Config("recalibration_period must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// All m with W/(N+1) < m <= W/N.
pub fn ways_for_instances(ways: usize, instances: usize) -> Result<RangeInclusive<usize>> {
    if ways == 0 || instances == 0 {
        return Err(Error::Config("W and N must be at least 1".into()));
    }
    let lo = ways / (instances + 1) + 1;
    let hi = ways / instances;
    if lo > hi {
        return Err(Error::NoValidM { ways, instances });
    }
    Ok(lo..=hi)
}

/// Rungs tried when counting clones on a 16-way cache.
pub const LADDER: [usize; 7] = [12, 8, 5, 4, 3, 2, 1];

/// The counting ladder for any associativity: the 16-way ladder as is,
/// otherwise the largest valid m for each N, top rung three quarters full.
pub fn ladder(ways: usize) -> Vec<usize> {
    if ways == 16 {
        return LADDER.to_vec();
    }
    let mut out = Vec::new();
    for n in 1..=ways {
        if let Ok(r) = ways_for_instances(ways, n) {
            let m = if n == 1 { (*r.end() * 3 / 4).max(*r.start()) } else { *r.end() };
            if out.last() != Some(&m) {
                out.push(m);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Table of allowed instances vs monitored ways for a 16-way cache.
    const TABLE: [(usize, usize, usize); 7] = [(1, 9, 16), (2, 6, 8), (3, 5, 5), (4, 4, 4), (5, 3, 3), (8, 2, 2), (16, 1, 1)];

    #[test]
    fn table_for_sixteen_ways() {
        for (n, lo, hi) in TABLE {
            assert_eq!(ways_for_instances(16, n).unwrap(), lo..=hi, "N={n}");
        }
    }

    #[test]
    fn seven_instances_have_no_m() {
        assert_eq!(ways_for_instances(16, 7), Err(Error::NoValidM { ways: 16, instances: 7 }));
        assert!(ways_for_instances(16, 6).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate(16).is_ok());
        let bad = DetectorConfig { m: 8, ..Default::default() };
        assert!(bad.validate(16).is_err());
        let full = DetectorConfig { m: 16, ..Default::default() };
        assert!(full.validate(16).is_ok());
        assert!(DetectorConfig { t: 0, ..Default::default() }.validate(16).is_err());
        assert!(DetectorConfig { t: 65, ..Default::default() }.validate(16).is_err());
    }

    #[test]
    fn ladders() {
        assert_eq!(ladder(16), LADDER.to_vec());
        assert_eq!(ladder(4), vec![3, 2, 1]);
    }

    proptest::proptest! {
        #[test]
        fn range_matches_definition(w in 1usize..64, n in 1usize..40) {
            let brute: Vec<usize> = (1..=w).filter(|&m| m * n <= w && m * (n + 1) > w).collect();
            match ways_for_instances(w, n) {
                Ok(r) => proptest::prop_assert_eq!(r.collect::<Vec<_>>(), brute),
                Err(_) => proptest::prop_assert!(brute.is_empty()),
            }
        }
    }
}
