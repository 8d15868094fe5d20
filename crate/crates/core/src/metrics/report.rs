use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{Backend, Catalog, MetricId, MetricsError, Unit};

/// Accepted range for the sum of the four top-down level-1 fractions, in percent.
pub const TOPDOWN_SUM_BAND: (f64, f64) = (99.0, 101.0);

const TOPDOWN_AREAS: [&str; 4] = [
    "cpu.frontend_bound",
    "cpu.backend_bound",
    "cpu.bad_speculation",
    "cpu.retiring",
];

/// Metric values collected by one profiling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub backend: Backend,
    values: BTreeMap<MetricId, f64>,
    #[serde(default)]
    pub iteration: u32,
    /// Verbatim profiler output, relative to the state directory when
    /// produced by the loop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_artifact: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ns: Option<f64>,
    /// Requested metrics that were missing or not countable.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub warnings: BTreeSet<String>,
}

impl ProfileReport {
    /// Validates `values` against the catalog and fills in derived metrics
    /// (`cpu.ipc`, miss rates) whose inputs are present.
    pub fn build(
        backend: Backend,
        mut values: BTreeMap<MetricId, f64>,
        catalog: &Catalog,
    ) -> Result<Self, MetricsError> {
        derive_metrics(&mut values, catalog);
        let report = ProfileReport {
            backend,
            values,
            iteration: 0,
            raw_artifact: None,
            wall_time_ns: None,
            warnings: BTreeSet::new(),
        };
        report.validate(catalog)?;
        Ok(report)
    }

    pub fn with_iteration(mut self, iteration: u32) -> Self {
        self.iteration = iteration;
        self
    }

    pub fn with_raw_artifact(mut self, path: impl Into<PathBuf>) -> Self {
        self.raw_artifact = Some(path.into());
        self
    }

    pub fn with_wall_time(mut self, ns: f64) -> Result<Self, MetricsError> {
        if !(ns > 0.0) {
            return Err(MetricsError::InvalidTiming(format!(
                "wall time must be positive, got {ns}"
            )));
        }
        self.wall_time_ns = Some(ns);
        Ok(self)
    }

    pub fn with_warnings(mut self, warnings: impl IntoIterator<Item = String>) -> Self {
        self.warnings.extend(warnings);
        self
    }

    pub fn values(&self) -> &BTreeMap<MetricId, f64> {
        &self.values
    }

    pub fn value(&self, id: &MetricId) -> Option<f64> {
        self.values.get(id).copied()
    }

    /// Convenience lookup by metric name string.
    pub fn get(&self, name: &str) -> Option<f64> {
        MetricId::new(name).ok().and_then(|id| self.value(&id))
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Drops metrics for which `keep` returns false.
    pub fn retain(&mut self, mut keep: impl FnMut(&MetricId) -> bool) {
        self.values.retain(|k, _| keep(k));
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<(), MetricsError> {
        for (id, &value) in &self.values {
            let desc = catalog
                .get(id)
                .ok_or_else(|| MetricsError::UnknownMetric(id.clone()))?;
            if !desc.backend.includes(self.backend) {
                return Err(MetricsError::WrongBackend {
                    metric: id.clone(),
                    backend: self.backend,
                });
            }
            if !value.is_finite() {
                return Err(MetricsError::OutOfRange {
                    metric: id.clone(),
                    value,
                    reason: "not finite",
                });
            }
            match desc.unit {
                Unit::Percent if !(0.0..=100.0).contains(&value) => {
                    return Err(MetricsError::OutOfRange {
                        metric: id.clone(),
                        value,
                        reason: "percent must lie in [0, 100]",
                    })
                }
                Unit::Percent => {}
                _ if value < 0.0 => {
                    return Err(MetricsError::OutOfRange {
                        metric: id.clone(),
                        value,
                        reason: "must be non-negative",
                    })
                }
                _ => {}
            }
        }
        if self.backend == Backend::Cpu {
            let parts: Option<Vec<f64>> = TOPDOWN_AREAS
                .iter()
                .map(|name| self.get(name))
                .collect();
            if let Some(parts) = parts {
                let sum: f64 = parts.iter().sum();
                let (lo, hi) = TOPDOWN_SUM_BAND;
                if !(lo..=hi).contains(&sum) {
                    return Err(MetricsError::TopdownSum { sum, lo, hi });
                }
            }
        }
        if let Some(ns) = self.wall_time_ns {
            if !(ns > 0.0) {
                return Err(MetricsError::InvalidTiming(format!(
                    "wall time must be positive, got {ns}"
                )));
            }
        }
        Ok(())
    }
}

fn derive_metrics(values: &mut BTreeMap<MetricId, f64>, catalog: &Catalog) {
    let ratio = |values: &BTreeMap<MetricId, f64>, num: &str, den: &str| {
        let n = values.get(&MetricId::known(num))?;
        let d = values.get(&MetricId::known(den))?;
        (*d > 0.0).then(|| n / d)
    };
    let derived = [
        ("cpu.ipc", ratio(values, "cpu.instructions_retired", "cpu.cycles")),
        (
            "cpu.llc_miss_rate",
            ratio(values, "cpu.llc_misses", "cpu.llc_references").map(|r| r * 100.0),
        ),
        (
            "cpu.branch_miss_rate",
            ratio(values, "cpu.branch_misses", "cpu.branch_instructions").map(|r| r * 100.0),
        ),
    ];
    for (name, value) in derived {
        let id = MetricId::known(name);
        if let Some(v) = value {
            if catalog.contains(&id) {
                values.entry(id).or_insert(v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<MetricId, f64> {
        pairs
            .iter()
            .map(|(k, v)| (MetricId::known(k), *v))
            .collect()
    }

    #[test]
    fn ipc_is_derived_from_counts() {
        let catalog = Catalog::builtin();
        let r = ProfileReport::build(
            Backend::Cpu,
            map(&[("cpu.instructions_retired", 136_000.0), ("cpu.cycles", 242_000.0)]),
            &catalog,
        )
        .unwrap();
        assert_eq!(r.get("cpu.ipc"), Some(136_000.0 / 242_000.0));
    }

    #[test]
    fn reported_ipc_is_not_overwritten() {
        let catalog = Catalog::builtin();
        let r = ProfileReport::build(
            Backend::Cpu,
            map(&[
                ("cpu.instructions_retired", 10.0),
                ("cpu.cycles", 20.0),
                ("cpu.ipc", 0.52),
            ]),
            &catalog,
        )
        .unwrap();
        assert_eq!(r.get("cpu.ipc"), Some(0.52));
    }

    #[test]
    fn unknown_metric_rejected() {
        let catalog = Catalog::builtin();
        let err = ProfileReport::build(Backend::Cpu, map(&[("cpu.bogus", 1.0)]), &catalog)
            .unwrap_err();
        assert!(matches!(err, MetricsError::UnknownMetric(_)));
    }

    #[test]
    fn gpu_metric_in_cpu_report_rejected() {
        let catalog = Catalog::builtin();
        let err = ProfileReport::build(Backend::Cpu, map(&[("gpu.occupancy", 50.0)]), &catalog)
            .unwrap_err();
        assert!(matches!(err, MetricsError::WrongBackend { .. }));
    }

    #[test]
    fn percent_range_enforced() {
        let catalog = Catalog::builtin();
        let err = ProfileReport::build(Backend::Gpu, map(&[("gpu.occupancy", 100.5)]), &catalog)
            .unwrap_err();
        assert!(matches!(err, MetricsError::OutOfRange { .. }));
    }

    #[test]
    fn topdown_sum_band() {
        let catalog = Catalog::builtin();
        let ok = map(&[
            ("cpu.frontend_bound", 5.1),
            ("cpu.backend_bound", 61.76),
            ("cpu.bad_speculation", 1.1),
            ("cpu.retiring", 32.5),
        ]);
        assert!(ProfileReport::build(Backend::Cpu, ok, &catalog).is_ok());
        let bad = map(&[
            ("cpu.frontend_bound", 5.1),
            ("cpu.backend_bound", 61.76),
            ("cpu.bad_speculation", 1.1),
            ("cpu.retiring", 20.0),
        ]);
        assert!(matches!(
            ProfileReport::build(Backend::Cpu, bad, &catalog),
            Err(MetricsError::TopdownSum { .. })
        ));
        // Partial top-down data is not checked.
        let partial = map(&[("cpu.frontend_bound", 5.1), ("cpu.backend_bound", 61.76)]);
        assert!(ProfileReport::build(Backend::Cpu, partial, &catalog).is_ok());
    }

    #[test]
    fn serde_roundtrip_is_exact() {
        let catalog = Catalog::builtin();
        let r = ProfileReport::build(
            Backend::Cpu,
            map(&[("cpu.instructions_retired", 945_000.0), ("cpu.cycles", 689_781.0)]),
            &catalog,
        )
        .unwrap()
        .with_iteration(3)
        .with_raw_artifact("t/iter3/profile.raw")
        .with_wall_time(1234.5)
        .unwrap()
        .with_warnings(["cpu.frontend_bound: <not supported>".to_string()]);
        let json = serde_json::to_string(&r).unwrap();
        let back: ProfileReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn non_positive_wall_time_rejected() {
        let catalog = Catalog::builtin();
        let r = ProfileReport::build(Backend::Gpu, BTreeMap::new(), &catalog).unwrap();
        assert!(r.with_wall_time(0.0).is_err());
    }
}
