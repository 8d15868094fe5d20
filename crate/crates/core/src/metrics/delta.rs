use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{MetricId, MetricsError, ProfileReport};

/// Per-metric comparison between two reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeltaEntry {
    Both {
        current: f64,
        baseline: f64,
        delta: f64,
    },
    OnlyCurrent {
        value: f64,
    },
    OnlyBaseline {
        value: f64,
    },
}

impl DeltaEntry {
    pub fn delta(&self) -> Option<f64> {
        match self {
            DeltaEntry::Both { delta, .. } => Some(*delta),
            _ => None,
        }
    }

    /// Same comparison seen from the other side.
    pub fn swapped(&self) -> DeltaEntry {
        match *self {
            DeltaEntry::Both {
                current,
                baseline,
                delta,
            } => DeltaEntry::Both {
                current: baseline,
                baseline: current,
                delta: -delta,
            },
            DeltaEntry::OnlyCurrent { value } => DeltaEntry::OnlyBaseline { value },
            DeltaEntry::OnlyBaseline { value } => DeltaEntry::OnlyCurrent { value },
        }
    }
}

pub type ProfileDelta = BTreeMap<MetricId, DeltaEntry>;

/// `current - baseline` for every metric in both reports; one-sided metrics
/// are kept and marked.
pub fn profile_delta(
    current: &ProfileReport,
    baseline: &ProfileReport,
) -> Result<ProfileDelta, MetricsError> {
    if current.backend != baseline.backend {
        return Err(MetricsError::BackendMismatch {
            current: current.backend,
            baseline: baseline.backend,
        });
    }
    let mut out = BTreeMap::new();
    for (id, &cur) in current.values() {
        let entry = match baseline.value(id) {
            Some(base) => DeltaEntry::Both {
                current: cur,
                baseline: base,
                delta: cur - base,
            },
            None => DeltaEntry::OnlyCurrent { value: cur },
        };
        out.insert(id.clone(), entry);
    }
    for (id, &base) in baseline.values() {
        out.entry(id.clone())
            .or_insert(DeltaEntry::OnlyBaseline { value: base });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Backend, Catalog};
    use proptest::prelude::*;

    fn report(backend: Backend, pairs: &[(&str, f64)]) -> ProfileReport {
        let values = pairs
            .iter()
            .map(|(k, v)| (MetricId::known(k), *v))
            .collect();
        ProfileReport::build(backend, values, &Catalog::builtin()).unwrap()
    }

    #[test]
    fn trace_round_one_deltas() {
        let best = report(Backend::Cpu, &[("cpu.ipc", 1.37), ("cpu.frontend_bound", 5.10)]);
        let cur = report(Backend::Cpu, &[("cpu.ipc", 1.49), ("cpu.frontend_bound", 7.68)]);
        let d = profile_delta(&cur, &best).unwrap();
        let ipc = d[&MetricId::known("cpu.ipc")].delta().unwrap();
        let fe = d[&MetricId::known("cpu.frontend_bound")].delta().unwrap();
        assert!((ipc - 0.12).abs() < 1e-12);
        assert!((fe - 2.58).abs() < 1e-12);
    }

    #[test]
    fn one_sided_metrics_are_marked() {
        let a = report(Backend::Cpu, &[("cpu.ipc", 1.0), ("cpu.cycles", 10.0)]);
        let b = report(Backend::Cpu, &[("cpu.ipc", 2.0), ("cpu.instructions_retired", 5.0)]);
        let d = profile_delta(&a, &b).unwrap();
        assert_eq!(d[&MetricId::known("cpu.cycles")], DeltaEntry::OnlyCurrent { value: 10.0 });
        assert_eq!(
            d[&MetricId::known("cpu.instructions_retired")],
            DeltaEntry::OnlyBaseline { value: 5.0 }
        );
    }

    #[test]
    fn backend_mismatch_is_an_error() {
        let a = report(Backend::Cpu, &[("cpu.ipc", 1.0)]);
        let b = report(Backend::Gpu, &[("gpu.occupancy", 50.0)]);
        assert!(matches!(
            profile_delta(&a, &b),
            Err(MetricsError::BackendMismatch { .. })
        ));
    }

    fn arb_report() -> impl Strategy<Value = ProfileReport> {
        let names = [
            "cpu.cycles",
            "cpu.instructions_retired",
            "cpu.frontend_bound",
            "cpu.backend_bound",
            "cpu.llc_misses",
        ];
        proptest::collection::vec(proptest::option::of(0.0f64..100.0), names.len()).prop_map(
            move |vals| {
                let pairs: Vec<(&str, f64)> = names
                    .iter()
                    .zip(vals)
                    .filter_map(|(n, v)| v.map(|v| (*n, v)))
                    .collect();
                report(Backend::Cpu, &pairs)
            },
        )
    }

    proptest! {
        #[test]
        fn self_delta_is_zero(r in arb_report()) {
            let d = profile_delta(&r, &r).unwrap();
            prop_assert!(d.values().all(|e| e.delta() == Some(0.0)));
        }

        #[test]
        fn delta_is_antisymmetric(a in arb_report(), b in arb_report()) {
            let ab = profile_delta(&a, &b).unwrap();
            let ba = profile_delta(&b, &a).unwrap();
            prop_assert_eq!(ab.len(), ba.len());
            for (k, e) in &ab {
                prop_assert_eq!(e.swapped(), ba[k]);
            }
        }
    }
}
