use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use clonesim_core::detector::{
    estimate_clone_count, spawn_instances, DetectorConfig, LatencyModel, Verdict,
};
use clonesim_core::eviction_builder::{build_monitoring_set, default_region_pages, select_channel, Channel, ChannelConfig};
use clonesim_core::linearity_verifier::{
    check_conditions, search_nonlinear, to_adversary_script, AddressLayout, Hypothesis, PageTableOracles, SearchConfig,
};
use clonesim_core::os_model::{apply_adversary, AdversaryScript, MappingPolicy};
use clonesim_core::scenarios::{
    noise_workload, run_bisgx_attack, run_bug_benign, run_bug_scenario, run_experiment, run_fim_benign, run_fim_scenario,
    run_forkvs_benign, run_forkvs_scenario, ExperimentSpec, NoiseProfile, NoiseSpec, RunManifest, Scenario,
};
use clonesim_core::{CacheGeometry, PageMapping, Replacement, World};

#[derive(Parser)]
#[command(name = "clonesim", version, about = "Cache-contention clone detection simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct GeoArgs {
    #[arg(long, default_value_t = 2)]
    slices: usize,
    #[arg(long, default_value_t = 1024)]
    sets: usize,
    #[arg(long, default_value_t = 16)]
    ways: usize,
    #[arg(long, value_enum, default_value_t = Policy::QuadAge)]
    policy: Policy,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    QuadAge,
    Lru,
}

impl GeoArgs {
    fn geometry(&self) -> Result<CacheGeometry> {
        Ok(CacheGeometry::with_default_hash(self.slices, self.sets, self.ways)?)
    }

    fn replacement(&self) -> Replacement {
        match self.policy {
            Policy::QuadAge => Replacement::default(),
            Policy::Lru => Replacement::Lru,
        }
    }

    fn world(&self) -> Result<World> {
        Ok(World::new(self.geometry()?, self.replacement(), LatencyModel::default(), self.seed))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Linear,
    Permuted,
    /// Swap the two pages around the first 4 MiB boundary.
    Swap,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the monitoring set of one channel from an enclave region.
    BuildEviction {
        #[command(flatten)]
        geo: GeoArgs,
        /// Binary identity used to pick the channel.
        #[arg(long, default_value = "enclave")]
        identity: String,
        /// Pin the channel instead of deriving it from the identity.
        #[arg(long)]
        channel: Option<u8>,
        /// Region size in pages (default: twice the cache).
        #[arg(long)]
        pages: Option<u64>,
        #[arg(long, value_enum, default_value_t = Layout::Linear)]
        layout: Layout,
        /// Write the monitoring set as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the linear-memory conditions on a region's page table.
    VerifyLinearity {
        #[arg(long, default_value_t = 1024)]
        pages: u64,
        #[arg(long, value_enum, default_value_t = Layout::Linear)]
        layout: Layout,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Enumerate non-linear arrangements that pass every condition on the
    /// scaled address layout.
    SearchNonlinear {
        #[arg(long, default_value_t = 32)]
        pages: usize,
        #[arg(long)]
        affinity: bool,
        #[arg(long)]
        max_results: Option<usize>,
        /// Write the first non-linear arrangement as an adversary script.
        #[arg(long)]
        script_out: Option<PathBuf>,
    },
    /// Run N allowed instances (plus optional clones) and print verdicts.
    Detect {
        #[command(flatten)]
        geo: GeoArgs,
        #[arg(long, default_value_t = 12)]
        m: usize,
        #[arg(long, default_value_t = 64)]
        w: usize,
        #[arg(long, default_value_t = 1)]
        t: usize,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        /// Extra instances beyond the allowed N.
        #[arg(long, default_value_t = 0)]
        clones: usize,
        #[arg(long, default_value_t = 10)]
        windows: usize,
        /// Random noise on the channel, accesses per time unit.
        #[arg(long, default_value_t = 0.0)]
        noise_rate: f64,
        /// Adversary script (TOML).
        #[arg(long)]
        script: Option<PathBuf>,
        /// Per-window CSV: instance,window,misses,verdict.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run one of the forking attacks and print the outcome as JSON.
    Attack {
        #[arg(value_enum)]
        scenario: AttackKind,
        #[arg(long)]
        with_detector: bool,
        /// Run the benign single-instance variant instead.
        #[arg(long)]
        benign: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run a parameter sweep from a TOML spec.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// Directory for metrics.csv, verdicts.csv and manifest.json.
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
    /// Start k instances and let each estimate how many others run.
    EstimateClones {
        #[command(flatten)]
        geo: GeoArgs,
        #[arg(long, default_value_t = 2)]
        instances: usize,
        #[arg(long, default_value_t = 4)]
        max_probe: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Bisgx,
    Fim,
    Forkvs,
    Bug,
}

fn layout_policy(layout: Layout, base: u64, pages: u64, seed: u64) -> Result<MappingPolicy> {
    Ok(match layout {
        Layout::Linear => MappingPolicy::Linear { base },
        Layout::Permuted => MappingPolicy::Permuted { base, seed },
        Layout::Swap => MappingPolicy::swap_trick(base, pages)?,
    })
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn build_eviction(
    geo: GeoArgs,
    identity: String,
    channel: Option<u8>,
    pages: Option<u64>,
    layout: Layout,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut world = geo.world()?;
    let pages = pages.unwrap_or_else(|| default_region_pages(&world.geo));
    let actor = world.spawn_enclave(&identity, pages, |b| MappingPolicy::Linear { base: b })?;
    if !matches!(layout, Layout::Linear) {
        let base = world.mapping(actor)?.policy.base();
        *world.mapping_mut(actor)? = PageMapping::allocate(layout_policy(layout, base, pages, geo.seed)?, pages)?;
    }
    let channel = match channel {
        Some(c) => Channel::new(c)?,
        None => select_channel(&identity, &ChannelConfig::default())?,
    };
    let built = build_monitoring_set(world.mapping(actor)?, &world.geo, geo.replacement(), channel, false)?;
    if let Some(path) = out {
        fs::write(&path, built.monitoring.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    print_json(&serde_json::json!({
        "channel": channel.value(),
        "spoiler_groups": built.spoiler.groups.len(),
        "cache_groups": built.cache_groups.len(),
        "eviction_sets": built.monitoring.len(),
        "coverage_clean": built.coverage.is_clean(),
        "oracle_tests": built.oracle_tests,
    }))
}

fn verify_linearity(pages: u64, layout: Layout, seed: u64) -> Result<()> {
    let base = 1024 - 256;
    let mapping = PageMapping::allocate(layout_policy(layout, base, pages, seed)?, pages)?;
    let o = PageTableOracles::from_mapping(AddressLayout::full(), &mapping);
    let hyp = Hypothesis::anchored(&o, 0).context("first page is unmapped")?;
    let report = check_conditions(&o, pages, hyp);
    print_json(&serde_json::json!({ "linear": report.all_pass(), "report": report }))
}

fn search(pages: usize, affinity: bool, max_results: Option<usize>, script_out: Option<PathBuf>) -> Result<()> {
    let cfg = SearchConfig { affinity, max_results, ..Default::default() };
    let r = search_nonlinear(&AddressLayout::scaled(), pages, &cfg)?;
    if let Some(path) = script_out {
        let Some(first) = r.nonlinear.first() else { bail!("no non-linear arrangement found") };
        fs::write(&path, to_adversary_script(1, first).to_toml()?)?;
    }
    print_json(&serde_json::json!({
        "nonlinear": r.nonlinear.len(),
        "affine": r.affine.len(),
        "complete": r.complete,
        "nodes": r.nodes,
        "first": r.nonlinear.first(),
    }))
}

#[allow(clippy::too_many_arguments)]
fn detect(
    geo: GeoArgs,
    m: usize,
    w: usize,
    t: usize,
    instances: usize,
    clones: usize,
    windows: usize,
    noise_rate: f64,
    script: Option<PathBuf>,
    csv_out: Option<PathBuf>,
) -> Result<()> {
    let mut world = geo.world()?;
    let cfg = DetectorConfig { m, w, t, n: instances, ..Default::default() };
    let mut ds = spawn_instances(&mut world, instances + clones, Channel::new(0)?, &cfg)?;
    if noise_rate > 0.0 {
        let spec = NoiseSpec::on_channel(NoiseProfile::Random { rate: noise_rate });
        world.add_background(Box::new(noise_workload(&spec, 0, geo.seed)?));
    }
    let mut rows = Vec::new();
    let mut done = vec![0usize; ds.len()];
    for (k, d) in ds.iter_mut().enumerate() {
        let v = d.start(&mut world)?;
        rows.push((k, 0usize, None, v));
    }
    // scripts act on a running system: clock changes before startup would
    // simply be calibrated into the reference
    let started_at = world.now();
    if let Some(path) = script {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        apply_adversary(&mut world, &AdversaryScript::from_toml(&text)?)?;
    }
    while done.iter().any(|&n| n < windows) {
        for (k, d) in ds.iter_mut().enumerate() {
            for (win, v) in d.step(&mut world)? {
                if done[k] < windows {
                    done[k] += 1;
                    rows.push((k, done[k], Some(win.misses()), v));
                }
            }
        }
    }
    if let Some(path) = csv_out {
        let mut text = String::from("instance,window,misses,verdict\n");
        for (k, n, misses, v) in &rows {
            let misses = misses.map(|x| x.to_string()).unwrap_or_default();
            text.push_str(&format!("{k},{n},{misses},{v}\n"));
        }
        fs::write(&path, text)?;
    }
    let summary: Vec<_> = (0..ds.len())
        .map(|k| {
            let vs: Vec<&Verdict> = rows.iter().filter(|r| r.0 == k).map(|r| &r.3).collect();
            serde_json::json!({
                "instance": k,
                "start": vs[0].to_string(),
                "alarms": vs[1..].iter().filter(|v| v.is_alarm()).count(),
                "windows": vs.len() - 1,
            })
        })
        .collect();
    print_json(&serde_json::json!({ "started_at": started_at, "instances": summary }))
}

fn attack(kind: AttackKind, with_detector: bool, benign: bool, seed: u64) -> Result<()> {
    let geo = CacheGeometry::with_default_hash(2, 1024, 16)?;
    let mut world = World::new(geo, Replacement::default(), LatencyModel::default(), seed);
    let scenario = match kind {
        AttackKind::Bisgx => Scenario::Bisgx,
        AttackKind::Fim => Scenario::Fim,
        AttackKind::Forkvs => Scenario::Forkvs,
        AttackKind::Bug => Scenario::Bug,
    };
    let out = match (scenario, benign) {
        (Scenario::Bisgx, false) => run_bisgx_attack(&mut world, with_detector)?,
        (Scenario::Bisgx, true) => clonesim_core::scenarios::run_bisgx_single(&mut world, with_detector)?,
        (Scenario::Fim, false) => run_fim_scenario(&mut world, with_detector)?,
        (Scenario::Fim, true) => run_fim_benign(&mut world, with_detector)?,
        (Scenario::Forkvs, false) => run_forkvs_scenario(&mut world, with_detector)?,
        (Scenario::Forkvs, true) => run_forkvs_benign(&mut world, with_detector)?,
        (Scenario::Bug, false) => run_bug_scenario(&mut world, with_detector)?,
        (Scenario::Bug, true) => run_bug_benign(&mut world, with_detector)?,
    };
    print_json(&out)
}

fn sweep(spec_path: PathBuf, out: PathBuf) -> Result<()> {
    let text = fs::read_to_string(&spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = ExperimentSpec::from_toml(&text)?;
    let table = run_experiment(&spec)?;
    fs::create_dir_all(&out)?;
    table.write_csv(fs::File::create(out.join("metrics.csv"))?)?;
    table.write_verdicts_csv(fs::File::create(out.join("verdicts.csv"))?)?;
    let manifest = RunManifest::new(&spec, vec!["metrics.csv".into(), "verdicts.csv".into()]);
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("{} cells, {} windows -> {}", table.cells.len(), table.verdicts.len(), out.display());
    Ok(())
}

fn estimate(geo: GeoArgs, instances: usize, max_probe: usize) -> Result<()> {
    if instances == 0 {
        bail!("need at least one instance");
    }
    let mut world = geo.world()?;
    let mut ds = spawn_instances(&mut world, instances, Channel::new(0)?, &DetectorConfig::default())?;
    let est = estimate_clone_count(&mut world, &mut ds, max_probe)?;
    let rows: Vec<_> = est
        .iter()
        .enumerate()
        .map(|(k, e)| serde_json::json!({ "instance": k, "estimate": e, "text": e.to_string(), "truth": instances - 1 }))
        .collect();
    print_json(&rows)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::BuildEviction { geo, identity, channel, pages, layout, out } => {
            build_eviction(geo, identity, channel, pages, layout, out)
        }
        Cmd::VerifyLinearity { pages, layout, seed } => verify_linearity(pages, layout, seed),
        Cmd::SearchNonlinear { pages, affinity, max_results, script_out } => {
            search(pages, affinity, max_results, script_out)
        }
        Cmd::Detect { geo, m, w, t, instances, clones, windows, noise_rate, script, csv } => {
            detect(geo, m, w, t, instances, clones, windows, noise_rate, script, csv)
        }
        Cmd::Attack { scenario, with_detector, benign, seed } => attack(scenario, with_detector, benign, seed),
        Cmd::Sweep { spec, out } => sweep(spec, out),
        Cmd::EstimateClones { geo, instances, max_probe } => estimate(geo, instances, max_probe),
    }
}
