use std::hint::black_box;

use clonesim_bench::{primed_world, two_slice_geometry};
use clonesim_core::detector::{classify_threshold, Calibration, Observation, ObservationWindow};
use clonesim_core::eviction_builder::{build_monitoring_set, default_region_pages, Channel};
use clonesim_core::linearity_verifier::{search_nonlinear, AddressLayout, SearchConfig};
use clonesim_core::os_model::MappingPolicy;
use clonesim_core::{CacheState, PageMapping, Replacement};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn cache_access(c: &mut Criterion) {
    let geo = two_slice_geometry();
    let mut cache = CacheState::new(&geo, Replacement::default());
    let mut pa = 0u64;
    c.bench_function("cache access (quad-age)", |b| {
        b.iter(|| {
            pa = pa.wrapping_add(0x1_0040) & ((1 << 30) - 1);
            black_box(cache.access(&geo, pa, 1))
        })
    });
}

fn probe_pass(c: &mut Criterion) {
    let (mut world, mut ds) = primed_world(1, 1);
    c.bench_function("probe pass, m=12", |b| b.iter(|| black_box(ds[0].probe_pass(&mut world).unwrap())));
}

fn build_sets(c: &mut Criterion) {
    let geo = two_slice_geometry();
    let m = PageMapping::allocate(MappingPolicy::Linear { base: 1024 }, default_region_pages(&geo)).unwrap();
    let ch = Channel::new(7).unwrap();
    c.bench_function("build monitoring set", |b| {
        b.iter(|| black_box(build_monitoring_set(&m, &geo, Replacement::default(), ch, true).unwrap()))
    });
}

fn classify(c: &mut Criterion) {
    let cal = Calibration::from_samples(&[100.0, 101.0, 99.0, 100.5], &[450.0, 455.0, 445.0, 452.0], 0.0).unwrap();
    let obs: Vec<Observation> = (0..1024)
        .map(|i| Observation { miss: i % 97 == 0, reading: if i % 97 == 0 { 450.0 } else { 100.0 }, truth: false })
        .collect();
    c.bench_function("classify window w=1024", |b| {
        b.iter_batched(
            || ObservationWindow::new(obs.clone()),
            |w| black_box(classify_threshold(&w, 8, &cal)),
            BatchSize::SmallInput,
        )
    });
}

fn constraint_search(c: &mut Criterion) {
    let mut g = c.benchmark_group("search");
    g.sample_size(10);
    let cfg = SearchConfig { parallel: false, ..Default::default() };
    g.bench_function("non-linear search, 16 pages", |b| {
        b.iter(|| black_box(search_nonlinear(&AddressLayout::scaled(), 16, &cfg).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, cache_access, probe_pass, build_sets, classify, constraint_search);
criterion_main!(benches);
