use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use kernloop_core::compendium::{
    build, extractive_provider, ingest, parse_sources, BuildOptions, Compendium, CompendiumError, SourceRef,
};
use kernloop_core::llm::{LlmClient, RetryPolicy};
use kernloop_core::metrics::{Backend, Catalog};

fn snapshots() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/snapshots")
}

fn sources() -> Vec<SourceRef> {
    parse_sources(&std::fs::read_to_string(snapshots().join("sources.txt")).unwrap())
}

fn client() -> LlmClient {
    LlmClient::new(Arc::new(extractive_provider())).with_retry(RetryPolicy::immediate(1))
}

fn options() -> BuildOptions {
    BuildOptions {
        built_at: Some("2026-01-01T00:00:00Z".into()),
        ..Default::default()
    }
}

fn build_bundled() -> Compendium {
    build(&sources(), &snapshots(), &client(), &Catalog::builtin(), &options())
        .unwrap()
        .0
}

#[test]
fn bundled_snapshots_cover_every_default_metric() {
    let catalog = Catalog::builtin();
    let c = build_bundled();
    for backend in Backend::ALL {
        for m in catalog.default_metric_set(backend) {
            assert!(c.get(m.as_str()).is_some(), "no entry for {m}");
            assert!(!c.lookup(m.as_str(), 1).is_empty(), "lookup misses {m}");
        }
    }
    assert_eq!(c.lookup("occupancy", 1)[0].metric, "gpu.occupancy");
    assert_eq!(c.lookup("backend bound", 1)[0].metric, "cpu.backend_bound");
}

#[test]
fn duplicate_documentation_is_merged() {
    let c = build_bundled();
    let ipc = c.get("cpu.ipc").unwrap();
    assert_eq!(ipc.provenance.len(), 2);
    let occ = c.get("gpu.occupancy").unwrap();
    assert_eq!(occ.provenance.len(), 2);
}

#[test]
fn provenance_closes_over_ingested_segments() {
    let segs = ingest(&sources(), &snapshots(), options().segment_budget);
    let ids: BTreeSet<_> = segs.segments.iter().map(|s| s.segment_id.clone()).collect();
    for e in build_bundled().entries {
        for p in &e.provenance {
            assert!(ids.contains(p), "{} cites unknown segment {p}", e.metric);
        }
    }
}

#[test]
fn build_is_deterministic_modulo_timestamp() {
    let a = build_bundled();
    let mut opts = options();
    opts.built_at = Some("2030-06-06T00:00:00Z".into());
    opts.parallelism = 1;
    let (b, _) = build(&sources(), &snapshots(), &client(), &Catalog::builtin(), &opts).unwrap();
    assert_eq!(a.content_hash, b.content_hash);
    let mut b2 = b.clone();
    b2.built_at = a.built_at.clone();
    assert_eq!(a.to_json(), b2.to_json());
}

#[test]
fn small_budget_still_covers() {
    let mut opts = options();
    opts.segment_budget = 600;
    let (c, report) = build(&sources(), &snapshots(), &client(), &Catalog::builtin(), &opts).unwrap();
    assert!(report.segments > 8);
    assert!(c.missing_defaults(&Catalog::builtin(), &Backend::ALL).is_empty());
}

#[test]
fn missing_gpu_docs_fail_coverage() {
    let cpu_only: Vec<SourceRef> = sources().into_iter().filter(|s| s.tool == "perf").collect();
    let err = build(&cpu_only, &snapshots(), &client(), &Catalog::builtin(), &options()).unwrap_err();
    match err {
        CompendiumError::Coverage(missing) => {
            assert!(missing.contains(&"gpu.occupancy".to_string()));
            assert!(missing.iter().all(|m| m.starts_with("gpu.")));
        }
        other => panic!("unexpected {other}"),
    }
    let mut cpu_opts = options();
    cpu_opts.backends = vec![Backend::Cpu];
    build(&cpu_only, &snapshots(), &client(), &Catalog::builtin(), &cpu_opts).unwrap();
}

#[test]
fn unreachable_sources_are_skipped() {
    let mut list = sources();
    list.insert(0, SourceRef::new("perf", "does/not/exist.md"));
    let (_, report) = build(&list, &snapshots(), &client(), &Catalog::builtin(), &options()).unwrap();
    assert_eq!(report.source_warnings.len(), 1);
    let none = build(&[SourceRef::new("perf", "nope.md")], &snapshots(), &client(), &Catalog::builtin(), &options());
    assert!(matches!(none, Err(CompendiumError::NoSegments(_))));
}

#[test]
fn shipped_compendium_matches_fresh_build() {
    let shipped = Compendium::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/compendium.json")).unwrap();
    assert_eq!(shipped.content_hash, build_bundled().content_hash);
    assert_eq!(Compendium::bundled(), shipped);
}
