use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::enclave::{MonotonicCounter, Program, SealedBlob, SealedStore, ToyEnclave};
use crate::detector::{DetectorConfig, Verdict};
use crate::error::{Error, Result};
use crate::os_model::World;

const PLATFORM: &str = "platform0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Bisgx,
    Fim,
    Forkvs,
    Bug,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bisgx" => Ok(Scenario::Bisgx),
            "fim" => Ok(Scenario::Fim),
            "forkvs" => Ok(Scenario::Forkvs),
            "bug" => Ok(Scenario::Bug),
            _ => Err(Error::Spec(format!("unknown scenario {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub scenario: Scenario,
    pub with_detector: bool,
    pub instances: usize,
    /// Final verdict of every instance, in launch order.
    pub verdicts: Vec<Verdict>,
    /// Some instance reported CloneDetected.
    pub detected: bool,
    /// The fork became visible to a client or to the adversary.
    pub diverged: bool,
    /// Blobs handed to the untrusted store.
    pub blobs: Vec<SealedBlob>,
    pub events: Vec<String>,
    /// Scenario specific results, e.g. what a client read.
    pub details: BTreeMap<String, String>,
}

impl AttackOutcome {
    fn new(scenario: Scenario, with_detector: bool, enclaves: &[ToyEnclave]) -> Self {
        AttackOutcome {
            scenario,
            with_detector,
            instances: enclaves.len(),
            verdicts: Vec::new(),
            detected: false,
            diverged: false,
            blobs: Vec::new(),
            events: Vec::new(),
            details: BTreeMap::new(),
        }
    }

    fn finish(mut self, enclaves: &[ToyEnclave]) -> Self {
        self.verdicts = enclaves.iter().map(|e| e.verdict()).collect();
        self.detected = self.verdicts.contains(&Verdict::CloneDetected);
        self
    }

    /// Counter values carried by more than one stored blob.
    pub fn duplicate_mc(&self) -> Vec<u64> {
        let mut by: BTreeMap<u64, usize> = BTreeMap::new();
        for b in &self.blobs {
            *by.entry(b.mc_value).or_default() += 1;
        }
        by.into_iter().filter(|&(_, n)| n > 1).map(|(v, _)| v).collect()
    }
}

fn launch_all(world: &mut World, identity: &str, program: Program, n: usize, det: Option<&DetectorConfig>) -> Result<Vec<ToyEnclave>> {
    (0..n).map(|_| ToyEnclave::launch(world, identity, program.clone(), det)).collect()
}

fn detector_config(with_detector: bool) -> Option<DetectorConfig> {
    with_detector.then(DetectorConfig::default)
}

/// One counter operation of one of the two clones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum McOp {
    Increment(usize),
    Read(usize),
}

impl McOp {
    fn instance(self) -> usize {
        match self {
            McOp::Increment(i) | McOp::Read(i) => i,
        }
    }
}

/// Both clones increment before either reads.
pub const FORK_SCHEDULE: [McOp; 4] = [McOp::Increment(0), McOp::Increment(1), McOp::Read(0), McOp::Read(1)];

/// All 24 orders of the four labelled operations.
pub fn mc_orderings() -> Vec<[McOp; 4]> {
    let ops = FORK_SCHEDULE;
    let mut out = Vec::with_capacity(24);
    let mut idx = [0usize, 1, 2, 3];
    permute(&mut idx, 0, &mut |p| out.push([ops[p[0]], ops[p[1]], ops[p[2]], ops[p[3]]]));
    out
}

fn permute(a: &mut [usize; 4], k: usize, f: &mut impl FnMut(&[usize; 4])) {
    if k == a.len() {
        f(a);
        return;
    }
    for i in k..a.len() {
        a.swap(k, i);
        permute(a, k + 1, f);
        a.swap(k, i);
    }
}

/// An order only decides who runs next: each instance still executes its
/// own code top to bottom, Increment before Read.
pub fn instance_sequence(order: &[McOp]) -> Vec<usize> {
    order.iter().map(|op| op.instance()).collect()
}

pub fn run_bisgx_attack(world: &mut World, with_detector: bool) -> Result<AttackOutcome> {
    run_bisgx_schedule(world, with_detector, &FORK_SCHEDULE)
}

pub fn run_bisgx_schedule(world: &mut World, with_detector: bool, order: &[McOp]) -> Result<AttackOutcome> {
    if order.iter().any(|op| op.instance() > 1) {
        return Err(Error::Spec("schedule names an instance other than 0 and 1".into()));
    }
    bisgx(world, with_detector, 2, &instance_sequence(order))
}

/// Benign run: one instance seals one item.
pub fn run_bisgx_single(world: &mut World, with_detector: bool) -> Result<AttackOutcome> {
    bisgx(world, with_detector, 1, &[0, 0])
}

fn bisgx(world: &mut World, with_detector: bool, n: usize, sequence: &[usize]) -> Result<AttackOutcome> {
    let det = detector_config(with_detector);
    let program = Program::BiSgxLike { data: None, mc: None };
    let mut es = launch_all(world, "bi-sgx", program, n, det.as_ref())?;
    let mut out = AttackOutcome::new(Scenario::Bisgx, with_detector, &es);
    let mut counter = MonotonicCounter::starting_at(10);
    let mut store = SealedStore::default();
    // stage 1: each clone gets its own item
    for (k, e) in es.iter_mut().enumerate() {
        if let Program::BiSgxLike { data, .. } = &mut e.program {
            *data = Some(format!("d{k}"));
        }
    }
    let mut step = vec![0usize; n];
    for &k in sequence {
        let e = &mut es[k];
        if e.halted.is_some() {
            out.events.push(format!("E{k} halted, skips its turn"));
            continue;
        }
        let Program::BiSgxLike { mc, .. } = &mut e.program else { unreachable!() };
        match step[k] {
            0 => {
                let v = counter.increment();
                out.events.push(format!("E{k} Increment(MC) -> {v}"));
            }
            1 => {
                *mc = Some(counter.read());
                out.events.push(format!("E{k} Read(MC) = {}", counter.read()));
            }
            _ => {}
        }
        step[k] += 1;
    }
    for (k, e) in es.iter_mut().enumerate() {
        let v = e.guard(world)?;
        if v.is_alarm() {
            out.events.push(format!("E{k} {v}, refuses to seal"));
            continue;
        }
        let Program::BiSgxLike { data: Some(d), mc: Some(mc) } = &e.program else {
            continue;
        };
        let blob = SealedBlob { payload: d.clone(), mc_value: *mc, sealed_by: e.actor };
        out.events.push(format!("E{k} Seal({d}, {mc}) and store at index {mc}"));
        store.seal(&e.identity, PLATFORM, blob.clone());
        out.blobs.push(blob);
    }
    // a researcher asking for index i accepts any blob carrying MC = i
    for i in out.duplicate_mc() {
        let valid: Vec<&str> = store
            .readable("bi-sgx", PLATFORM)
            .iter()
            .filter(|b| b.mc_value == i)
            .map(|b| b.payload.as_str())
            .collect();
        out.details.insert(format!("valid_at_{i}"), valid.join(","));
    }
    out.diverged = !out.duplicate_mc().is_empty();
    Ok(out.finish(&es))
}

/// Two clients on an in-memory store. Attack: each client gets its own clone.
pub fn run_fim_scenario(world: &mut World, with_detector: bool) -> Result<AttackOutcome> {
    fim(world, with_detector, 2)
}

pub fn run_fim_benign(world: &mut World, with_detector: bool) -> Result<AttackOutcome> {
    fim(world, with_detector, 1)
}

fn fim(world: &mut World, with_detector: bool, n: usize) -> Result<AttackOutcome> {
    let det = detector_config(with_detector);
    let mut es = launch_all(world, "kvs", Program::KvStore { map: BTreeMap::new() }, n, det.as_ref())?;
    let mut out = AttackOutcome::new(Scenario::Fim, with_detector, &es);
    let (ea, eb) = (0, n - 1);
    let mut latest: Option<&str> = None;
    for (client, k, value) in [("A", ea, "v_A"), ("B", eb, "v_B")] {
        if es[k].guard(world)?.is_alarm() {
            out.events.push(format!("{client}: PUT(k, {value}) refused by E{k}"));
            continue;
        }
        es[k].kv_put("k", value);
        latest = Some(value);
        out.events.push(format!("{client}: PUT(k, {value}) -> ACK from E{k}"));
    }
    if es[ea].guard(world)?.is_alarm() {
        out.events.push(format!("A: GET(k) refused by E{ea}"));
    } else {
        let got = es[ea].kv_get("k");
        out.events.push(format!("A: GET(k) -> {got:?} from E{ea}"));
        if let Some(g) = &got {
            out.details.insert("a_reads".into(), g.clone());
        }
        out.diverged = got.is_some() && got.as_deref() != latest;
    }
    if let Some(l) = latest {
        out.details.insert("latest".into(), l.to_string());
    }
    Ok(out.finish(&es))
}

/// A persistent store sealed at counter 1. Attack: the client's second
/// session lands on a clone that loaded the same snapshot.
pub fn run_forkvs_scenario(world: &mut World, with_detector: bool) -> Result<AttackOutcome> {
    forkvs(world, with_detector, true)
}

/// The honest restart: the first instance crashes and a new one restores.
pub fn run_forkvs_benign(world: &mut World, with_detector: bool) -> Result<AttackOutcome> {
    forkvs(world, with_detector, false)
}

fn forkvs(world: &mut World, with_detector: bool, attack: bool) -> Result<AttackOutcome> {
    let det = detector_config(with_detector);
    let mut counter = MonotonicCounter::starting_at(1);
    let mut store = SealedStore::default();
    let initial = SealedBlob { payload: r#"{"k":"v0"}"#.into(), mc_value: 1, sealed_by: 0 };
    store.seal("pkvs", PLATFORM, initial.clone());
    let empty = Program::KvStore { map: BTreeMap::new() };
    let mut es = launch_all(world, "pkvs", empty.clone(), if attack { 2 } else { 1 }, det.as_ref())?;
    for e in &mut es {
        e.kv_restore(&initial, &counter);
    }
    let mut out = AttackOutcome::new(Scenario::Forkvs, with_detector, &es);
    let mut acked: Option<String> = None;

    // session 1 on instance 0
    if es[0].guard(world)?.is_alarm() {
        out.events.push("C: PUT(k, v1) refused by E0".into());
    } else {
        es[0].kv_put("k", "v1");
        let mc = counter.increment();
        let blob = SealedBlob { payload: es[0].kv_snapshot(), mc_value: mc, sealed_by: es[0].actor };
        store.seal("pkvs", PLATFORM, blob.clone());
        out.blobs.push(blob);
        acked = Some("v1".into());
        out.events.push(format!("C: PUT(k, v1) -> ACK, snapshot sealed at {mc}"));
        if es[0].guard(world)?.is_alarm() {
            out.events.push("C: GET(k) refused by E0".into());
        } else {
            out.events.push(format!("C: GET(k) -> {:?} from E0", es[0].kv_get("k")));
        }
    }

    // session 2: a clone, or an honest restart after a crash
    let second = if attack {
        1
    } else {
        world.terminate(es[0].actor)?;
        out.events.push("E0 crashes".into());
        let mut r = ToyEnclave::launch(world, "pkvs", empty, det.as_ref())?;
        // the OS may offer any blob; only the one matching the counter loads
        let blobs: Vec<SealedBlob> = store.readable("pkvs", PLATFORM).to_vec();
        let mut loaded = false;
        for b in &blobs {
            if r.kv_restore(b, &counter) {
                loaded = true;
                break;
            }
            out.events.push(format!("restart rejects snapshot at {}", b.mc_value));
        }
        out.details.insert("restored".into(), loaded.to_string());
        es.push(r);
        es.len() - 1
    };
    if es[second].guard(world)?.is_alarm() {
        out.events.push(format!("C: GET(k) refused by E{second}"));
    } else {
        let got = es[second].kv_get("k");
        out.events.push(format!("C: GET(k) -> {got:?} from E{second}"));
        if let Some(g) = &got {
            out.details.insert("second_session_reads".into(), g.clone());
        }
        out.diverged = acked.is_some() && got != acked;
    }
    Ok(out.finish(&es))
}

/// Two clients behind an anonymizing proxy. Attack: one proxy clone each.
pub fn run_bug_scenario(world: &mut World, with_detector: bool) -> Result<AttackOutcome> {
    bug(world, with_detector, 2)
}

pub fn run_bug_benign(world: &mut World, with_detector: bool) -> Result<AttackOutcome> {
    bug(world, with_detector, 1)
}

fn bug(world: &mut World, with_detector: bool, n: usize) -> Result<AttackOutcome> {
    let det = detector_config(with_detector);
    let mut es = launch_all(world, "proxy", Program::Proxy { queue: Vec::new() }, n, det.as_ref())?;
    let mut out = AttackOutcome::new(Scenario::Bug, with_detector, &es);
    let clients = [("A", "req_A", 0), ("B", "req_B", n - 1)];
    for &(c, req, k) in &clients {
        if let Program::Proxy { queue } = &mut es[k].program {
            queue.push(req.to_string());
        }
        out.events.push(format!("{c} -> E{k}: {req}"));
    }
    // what the adversary sees: which instance forwarded what
    let mut forwarded: Vec<Vec<String>> = vec![Vec::new(); n];
    for k in 0..n {
        if es[k].guard(world)?.is_alarm() {
            out.events.push(format!("E{k} refuses to forward"));
            continue;
        }
        let Program::Proxy { queue } = &mut es[k].program else { unreachable!() };
        let mut batch = std::mem::take(queue);
        batch.shuffle(world.rng());
        out.events.push(format!("E{k} forwards {batch:?}"));
        forwarded[k] = batch;
    }
    let mut linked = BTreeMap::new();
    for &(c, req, k) in &clients {
        let set = &forwarded[k];
        out.details.insert(format!("anonymity_{c}"), set.len().to_string());
        if set.len() == 1 {
            linked.insert(c.to_string(), set[0].clone());
            out.details.insert(format!("linked_{c}"), set[0].clone());
            debug_assert_eq!(set[0], req);
        }
    }
    out.diverged = !linked.is_empty();
    Ok(out.finish(&es))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_model::{CacheGeometry, Replacement};
    use crate::detector::LatencyModel;

    fn world(seed: u64) -> World {
        let geo = CacheGeometry::with_default_hash(2, 1024, 16).unwrap();
        World::new(geo, Replacement::default(), LatencyModel::default(), seed)
    }

    #[test]
    fn orderings_are_all_distinct() {
        let all = mc_orderings();
        assert_eq!(all.len(), 24);
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), 24);
    }

    #[test]
    fn bisgx_fork_without_detector() {
        let o = run_bisgx_attack(&mut world(1), false).unwrap();
        assert_eq!(o.blobs.len(), 2);
        assert_eq!(o.duplicate_mc(), vec![12]);
        assert_eq!(o.details["valid_at_12"], "d0,d1");
        assert!(o.diverged && !o.detected);
    }

    #[test]
    fn bisgx_detected_with_detector() {
        let o = run_bisgx_attack(&mut world(1), true).unwrap();
        assert!(o.detected);
        assert!(o.duplicate_mc().is_empty());
        assert!(!o.diverged);
    }

    #[test]
    fn serial_order_does_not_fork() {
        let o = run_bisgx_schedule(&mut world(2), false, &[McOp::Increment(0), McOp::Read(0), McOp::Increment(1), McOp::Read(1)])
            .unwrap();
        let mut mcs: Vec<u64> = o.blobs.iter().map(|b| b.mc_value).collect();
        mcs.sort();
        assert_eq!(mcs, vec![11, 12]);
    }

    #[test]
    fn single_instance_seals() {
        for det in [false, true] {
            let o = run_bisgx_single(&mut world(3), det).unwrap();
            assert_eq!(o.verdicts, vec![Verdict::NoClone]);
            assert_eq!(o.blobs.len(), 1);
            assert_eq!(o.blobs[0].mc_value, 11);
        }
    }

    #[test]
    fn fim() {
        let o = run_fim_scenario(&mut world(4), false).unwrap();
        assert_eq!(o.details["a_reads"], "v_A");
        assert_eq!(o.details["latest"], "v_B");
        assert!(o.diverged);
        let o = run_fim_scenario(&mut world(4), true).unwrap();
        assert!(o.detected && !o.diverged);
        for det in [false, true] {
            let b = run_fim_benign(&mut world(4), det).unwrap();
            assert_eq!(b.details["a_reads"], "v_B");
            assert!(!b.diverged && !b.detected);
        }
    }

    #[test]
    fn forkvs() {
        let o = run_forkvs_scenario(&mut world(5), false).unwrap();
        assert_eq!(o.details["second_session_reads"], "v0");
        assert!(o.diverged);
        let o = run_forkvs_scenario(&mut world(5), true).unwrap();
        assert!(o.detected && !o.diverged);
        for det in [false, true] {
            let b = run_forkvs_benign(&mut world(5), det).unwrap();
            assert_eq!(b.details["second_session_reads"], "v1");
            assert_eq!(b.details["restored"], "true");
            assert!(b.events.iter().any(|e| e == "restart rejects snapshot at 1"));
            assert!(!b.diverged && !b.detected);
        }
    }

    #[test]
    fn bug() {
        let o = run_bug_scenario(&mut world(6), false).unwrap();
        assert_eq!(o.details["linked_A"], "req_A");
        assert_eq!(o.details["linked_B"], "req_B");
        assert!(o.diverged);
        let o = run_bug_scenario(&mut world(6), true).unwrap();
        assert!(o.detected && !o.diverged, "{:?}", o.events);
        for det in [false, true] {
            let b = run_bug_benign(&mut world(6), det).unwrap();
            assert_eq!(b.details["anonymity_A"], "2");
            assert!(!b.diverged && !b.detected);
        }
    }

    #[test]
    fn scenarios_are_deterministic() {
        for det in [false, true] {
            assert_eq!(run_bug_scenario(&mut world(7), det).unwrap(), run_bug_scenario(&mut world(7), det).unwrap());
            assert_eq!(run_bisgx_attack(&mut world(7), det).unwrap(), run_bisgx_attack(&mut world(7), det).unwrap());
        }
    }
}
