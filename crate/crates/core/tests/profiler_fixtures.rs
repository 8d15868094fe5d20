use std::collections::BTreeMap;
use std::path::PathBuf;

use kernloop_core::metrics::{Catalog, MetricId};
use kernloop_core::profiler::{ncu_parse, perf_parse, NcuAliasTable, ProfilerError};
use serde::Deserialize;

#[derive(Deserialize)]
struct Expected {
    requested: Vec<String>,
    values: BTreeMap<String, f64>,
    warnings: Vec<String>,
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn every_fixture_parses_to_its_expected_values() {
    let catalog = Catalog::builtin();
    let aliases = NcuAliasTable::builtin(&catalog);
    let expected: BTreeMap<String, Expected> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("expected.json")).unwrap()).unwrap();
    let (mut perf, mut ncu) = (0, 0);
    for (file, exp) in &expected {
        let raw = std::fs::read_to_string(fixtures().join(file)).unwrap();
        let requested: Vec<MetricId> = exp.requested.iter().map(|m| m.parse().unwrap()).collect();
        let report = if file.starts_with("perf/") {
            perf += 1;
            perf_parse(&raw, &requested, &catalog)
        } else {
            ncu += 1;
            ncu_parse(&raw, &requested, &catalog, &aliases)
        }
        .unwrap_or_else(|e| panic!("{file}: {e}"));
        let got: BTreeMap<String, f64> = report.values().iter().map(|(k, v)| (k.to_string(), *v)).collect();
        assert_eq!(
            got.keys().collect::<Vec<_>>(),
            exp.values.keys().collect::<Vec<_>>(),
            "{file}: metric set"
        );
        for (m, want) in &exp.values {
            let v = got[m];
            assert!(
                (v - want).abs() <= 1e-9 * want.abs().max(1.0),
                "{file}: {m} = {v}, expected {want}"
            );
        }
        for w in &exp.warnings {
            assert!(report.warnings.contains(w), "{file}: missing warning {w:?} in {:?}", report.warnings);
        }
    }
    assert!(perf >= 10 && ncu >= 10, "corpus too small: {perf} perf, {ncu} ncu");
}

#[derive(Deserialize)]
struct ExpectedError {
    kind: String,
    #[serde(default)]
    line: Option<usize>,
    requested: Vec<String>,
}

#[test]
fn malformed_fixtures_raise_expected_errors() {
    let catalog = Catalog::builtin();
    let aliases = NcuAliasTable::builtin(&catalog);
    let dir = fixtures().join("malformed");
    let expected: BTreeMap<String, ExpectedError> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("errors.json")).unwrap()).unwrap();
    assert!(expected.len() >= 6);
    for (file, exp) in &expected {
        let raw = std::fs::read_to_string(dir.join(file)).unwrap();
        let requested: Vec<MetricId> = exp.requested.iter().map(|m| m.parse().unwrap()).collect();
        let result = if file.starts_with("perf_") {
            perf_parse(&raw, &requested, &catalog)
        } else {
            ncu_parse(&raw, &requested, &catalog, &aliases)
        };
        match (exp.kind.as_str(), result) {
            ("parse", Err(ProfilerError::Parse { line, .. })) => {
                if let Some(want) = exp.line {
                    assert_eq!(line, want, "{file}: error line");
                }
            }
            ("empty_profile", Err(ProfilerError::EmptyProfile)) => {}
            (kind, other) => panic!("{file}: expected {kind} error, got {other:?}"),
        }
    }
}
