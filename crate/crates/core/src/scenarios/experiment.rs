use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::{noise_workload, NoiseSpec};
use crate::cache_model::{CacheGeometry, Replacement};
use crate::detector::{
    classify_threshold, spawn_instances, ways_for_instances, Calibration, Confusion, DetectorConfig, LatencyModel,
    Observation, ObservationWindow, Verdict,
};
use crate::error::{Error, Result};
use crate::eviction_builder::Channel;
use crate::os_model::{apply_adversary, AdversaryScript, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub slices: usize,
    pub sets_per_slice: usize,
    pub ways: usize,
    #[serde(default)]
    pub replacement: Replacement,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        GeometrySpec { slices: 2, sets_per_slice: 1024, ways: 16, replacement: Replacement::default() }
    }
}

impl GeometrySpec {
    pub fn build(&self) -> Result<CacheGeometry> {
        CacheGeometry::with_default_hash(self.slices, self.sets_per_slice, self.ways)
    }
}

fn one() -> Vec<usize> {
    vec![1]
}
fn idle() -> Vec<NoiseSpec> {
    vec![NoiseSpec::idle()]
}
fn no_pollution() -> Vec<f64> {
    vec![0.0]
}
fn default_interval() -> f64 {
    1000.0
}

/// A sweep. Every combination of m, N, workload and pollution is run once
/// per seed, with and without one extra clone; w and t are applied to the
/// resulting traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub latency: LatencyModel,
    pub m: Vec<usize>,
    pub w: Vec<usize>,
    /// Miss thresholds. Ignored when `auto_t` is set.
    #[serde(default = "one")]
    pub t: Vec<usize>,
    /// Pick t per (cell, w) to maximise F1 on the first seed, and score the
    /// remaining seeds only.
    #[serde(default)]
    pub auto_t: bool,
    #[serde(default = "one")]
    pub n: Vec<usize>,
    #[serde(default = "idle")]
    pub workloads: Vec<NoiseSpec>,
    /// Fraction of monitored lines the OS touches every interval.
    #[serde(default = "no_pollution")]
    pub pollution: Vec<f64>,
    #[serde(default = "default_interval")]
    pub pollution_interval: f64,
    #[serde(default)]
    pub adversary: Option<AdversaryScript>,
    /// Windows per class per seed at the largest w. Smaller w cut the same
    /// observations into more windows.
    pub trials: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub channel: u8,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let geo = self.geometry.build()?;
        self.latency.validate()?;
        Channel::new(self.channel)?;
        if self.m.is_empty() || self.w.is_empty() || self.n.is_empty() || self.workloads.is_empty() || self.pollution.is_empty() {
            return Err(Error::Spec("every sweep axis needs at least one value".into()));
        }
        if !self.auto_t && (self.t.is_empty() || self.t.contains(&0)) {
            return Err(Error::Spec("t values must be >= 1".into()));
        }
        if self.w.contains(&0) {
            return Err(Error::Spec("w values must be >= 1".into()));
        }
        if self.pollution.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Spec("pollution fractions must be in [0, 1]".into()));
        }
        if self.seeds.is_empty() || (self.auto_t && self.seeds.len() < 2) {
            return Err(Error::Spec("need seeds (two or more with auto_t)".into()));
        }
        for wl in &self.workloads {
            wl.profile.validate()?;
        }
        if self.cells_mn(&geo).is_empty() {
            return Err(Error::Spec("no (m, N) pair satisfies W/(N+1) < m <= W/N".into()));
        }
        Ok(())
    }

    fn cells_mn(&self, geo: &CacheGeometry) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &m in &self.m {
            for &n in &self.n {
                if ways_for_instances(geo.ways, n).map(|r| r.contains(&m)).unwrap_or(false) {
                    out.push((m, n));
                }
            }
        }
        out
    }
}

/// Observer-side trace of one world.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub calibration: Calibration,
    pub observations: Vec<Observation>,
    /// Requested length, also for failed traces.
    pub len: usize,
    /// Set when the observer could not even start.
    pub failed: Option<Verdict>,
}

impl Trace {
    /// Every non-overlapping window of length w, so all window lengths see
    /// the same stretch of the run.
    pub fn windows(&self, w: usize) -> Vec<ObservationWindow> {
        if self.failed.is_some() {
            return Vec::new();
        }
        self.observations.chunks_exact(w).map(|c| ObservationWindow::new(c.to_vec())).collect()
    }

    /// Verdicts for every window. A trace whose observer failed to start
    /// yields that verdict `len / w` times.
    pub fn verdicts(&self, w: usize, t: usize) -> Vec<(usize, Verdict)> {
        if let Some(v) = self.failed {
            return vec![(0, v); self.len / w];
        }
        self.windows(w).iter().map(|win| (win.misses(), classify_threshold(win, t, &self.calibration))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub geometry: GeometrySpec,
    pub latency: LatencyModel,
    pub m: usize,
    pub n: usize,
    /// Instances actually started (n for a clean run, n+1 with a clone).
    pub instances: usize,
    pub workload: NoiseSpec,
    pub pollution: f64,
    pub pollution_interval: f64,
    pub adversary: Option<AdversaryScript>,
    pub channel: u8,
    pub observations: usize,
}

/// Start `instances` clones, prime them in turn, then let them probe round
/// robin until the first one has `observations` readings.
pub fn record_trace(cfg: &TraceConfig, seed: u64) -> Result<Trace> {
    let geo = cfg.geometry.build()?;
    let sets = geo.sets_per_channel() * geo.slices;
    let mut world = World::new(geo, cfg.geometry.replacement, cfg.latency, seed);
    let dcfg = DetectorConfig { m: cfg.m, n: cfg.n, ..Default::default() };
    let channel = Channel::new(cfg.channel)?;
    let mut ds = spawn_instances(&mut world, cfg.instances, channel, &dcfg)?;
    let calibration = *ds[0].calibration().expect("spawned instances are calibrated");
    world.add_background(Box::new(noise_workload(&cfg.workload, cfg.channel, seed ^ 0x6e_6f69_7365)?));
    let lines = (cfg.pollution * (cfg.m * sets) as f64).round() as usize;
    world.add_pollution(lines, cfg.pollution_interval)?;
    if let Some(s) = &cfg.adversary {
        apply_adversary(&mut world, s)?;
    }
    for (k, d) in ds.iter_mut().enumerate() {
        match d.prime(&mut world) {
            Ok(_) => {}
            Err(Error::Anomaly(r)) if k == 0 => {
                return Ok(Trace { calibration, observations: Vec::new(), len: cfg.observations, failed: Some(Verdict::Anomaly(r)) })
            }
            Err(Error::Anomaly(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let mut observations = Vec::with_capacity(cfg.observations + ds[0].pass_len());
    while observations.len() < cfg.observations {
        for (k, d) in ds.iter_mut().enumerate() {
            let p = d.probe_pass(&mut world)?;
            if k == 0 {
                observations.extend(p.observations);
            }
        }
    }
    observations.truncate(cfg.observations);
    Ok(Trace { calibration, observations, len: cfg.observations, failed: None })
}

/// The t in 1..=w with the best F1 on a labelled pair of traces; ties go to
/// the smaller t.
pub fn best_threshold(clean: &Trace, clone: &Trace, w: usize) -> usize {
    let mut best = (f64::NEG_INFINITY, 1);
    for t in 1..=w {
        let mut c = Confusion::default();
        for (_, v) in clean.verdicts(w, t) {
            c.add(v, false);
        }
        for (_, v) in clone.verdicts(w, t) {
            c.add(v, true);
        }
        if c.f1() > best.0 {
            best = (c.f1(), t);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub m: usize,
    pub w: usize,
    pub t: usize,
    pub n: usize,
    pub workload: String,
    /// Pollution fraction in parts per million, so the key stays orderable.
    pub pollution_ppm: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub m: usize,
    pub w: usize,
    pub t: usize,
    pub n: usize,
    pub workload: String,
    pub pollution: f64,
    pub seeds: usize,
    pub windows: u64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub f1: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub f1_mean: f64,
    pub f1_sd: f64,
}

impl CellMetrics {
    pub fn confusion(&self) -> Confusion {
        Confusion { tp: self.tp, fp: self.fp, tn: self.tn, fn_: self.fn_ }
    }

    /// F1, FPR and FNR must come from the stored counts.
    pub fn is_consistent(&self) -> bool {
        let c = self.confusion();
        c.total() == self.windows && c.f1() == self.f1 && c.fpr() == self.fpr && c.fnr() == self.fnr
    }
}

/// One row per classified window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub seed: u64,
    pub m: usize,
    pub w: usize,
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub workload: String,
    pub misses: usize,
    pub verdict: String,
    /// 1 when a clone was running.
    pub truth: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub cells: Vec<CellMetrics>,
    #[serde(skip)]
    pub verdicts: Vec<VerdictRow>,
}

impl MetricsTable {
    pub fn get(&self, m: usize, w: usize, t: usize, n: usize) -> Vec<&CellMetrics> {
        self.cells.iter().filter(|c| c.m == m && c.w == w && c.t == t && c.n == n).collect()
    }

    pub fn is_consistent(&self) -> bool {
        self.cells.iter().all(|c| c.is_consistent())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        for c in &self.cells {
            wr.serialize(c).map_err(|e| Error::Io(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_verdicts_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        for r in &self.verdicts {
            wr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Everything needed to replay a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub spec: ExperimentSpec,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(spec: &ExperimentSpec, outputs: Vec<String>) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            spec: spec.clone(),
            outputs,
        }
    }
}

#[derive(Clone, Debug)]
struct Job {
    m: usize,
    n: usize,
    workload: usize,
    pollution: usize,
    seed: u64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricsTable> {
    spec.validate()?;
    if spec.trials == 0 {
        return Ok(MetricsTable::default());
    }
    let geo = spec.geometry.build()?;
    let max_w = *spec.w.iter().max().expect("validated");
    let observations = spec.trials * max_w;
    let mut jobs = Vec::new();
    for (m, n) in spec.cells_mn(&geo) {
        for workload in 0..spec.workloads.len() {
            for pollution in 0..spec.pollution.len() {
                for &seed in &spec.seeds {
                    jobs.push(Job { m, n, workload, pollution, seed });
                }
            }
        }
    }
    let traces: Vec<(Trace, Trace)> = jobs
        .par_iter()
        .map(|j| {
            let cfg = |instances| TraceConfig {
                geometry: spec.geometry.clone(),
                latency: spec.latency,
                m: j.m,
                n: j.n,
                instances,
                workload: spec.workloads[j.workload],
                pollution: spec.pollution[j.pollution],
                pollution_interval: spec.pollution_interval,
                adversary: spec.adversary.clone(),
                channel: spec.channel,
                observations,
            };
            Ok((record_trace(&cfg(j.n), j.seed)?, record_trace(&cfg(j.n + 1), j.seed)?))
        })
        .collect::<Result<_>>()?;

    // (cell key) -> per-seed confusion
    let mut cells: BTreeMap<CellKey, Vec<Confusion>> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut chosen: BTreeMap<(usize, usize, usize, usize, usize), usize> = BTreeMap::new();
    for (j, (clean, clone)) in jobs.iter().zip(&traces) {
        for &w in &spec.w {
            let ts: Vec<usize> = if spec.auto_t {
                let k = (j.m, j.n, j.workload, j.pollution, w);
                if j.seed == spec.seeds[0] {
                    chosen.insert(k, best_threshold(clean, clone, w));
                    continue;
                }
                vec![chosen[&k]]
            } else {
                spec.t.clone()
            };
            for t in ts {
                let key = CellKey {
                    m: j.m,
                    w,
                    t,
                    n: j.n,
                    workload: spec.workloads[j.workload].profile.name(),
                    pollution_ppm: (spec.pollution[j.pollution] * 1e6).round() as u64,
                };
                let mut c = Confusion::default();
                for (truth, trace) in [(false, clean), (true, clone)] {
                    for (misses, v) in trace.verdicts(w, t) {
                        c.add(v, truth);
                        rows.push(VerdictRow {
                            seed: j.seed,
                            m: j.m,
                            w,
                            t,
                            n: j.n,
                            workload: key.workload.clone(),
                            misses,
                            verdict: v.to_string(),
                            truth: truth as u8,
                        });
                    }
                }
                cells.entry(key).or_default().push(c);
            }
        }
    }
    let cells = cells
        .into_iter()
        .map(|(k, per_seed)| {
            let mut pooled = Confusion::default();
            for c in &per_seed {
                pooled.merge(c);
            }
            let f1s: Vec<f64> = per_seed.iter().map(|c| c.f1()).collect();
            let (f1_mean, f1_sd) = mean_sd(&f1s);
            CellMetrics {
                m: k.m,
                w: k.w,
                t: k.t,
                n: k.n,
                pollution: k.pollution_ppm as f64 / 1e6,
                workload: k.workload,
                seeds: per_seed.len(),
                windows: pooled.total(),
                tp: pooled.tp,
                fp: pooled.fp,
                tn: pooled.tn,
                fn_: pooled.fn_,
                f1: pooled.f1(),
                fpr: pooled.fpr(),
                fnr: pooled.fnr(),
                f1_mean,
                f1_sd,
            }
        })
        .collect();
    Ok(MetricsTable { cells, verdicts: rows })
}
