use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentError, HardwareSpec};
use crate::metrics::{Backend, Catalog, MetricId, ProfileReport, Unit};
use crate::verifier::Category;

const BUILTIN_RULES: &str = include_str!("../../data/rules.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    FrontendBound,
    BackendMemoryBound,
    BackendCoreBound,
    BadSpeculation,
    LowOccupancy,
    RegisterPressure,
    LowMemoryThroughput,
    LowTensorCoreUtil,
    Underparallelized,
    Other,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::FrontendBound => "frontend_bound",
            Label::BackendMemoryBound => "backend_memory_bound",
            Label::BackendCoreBound => "backend_core_bound",
            Label::BadSpeculation => "bad_speculation",
            Label::LowOccupancy => "low_occupancy",
            Label::RegisterPressure => "register_pressure",
            Label::LowMemoryThroughput => "low_memory_throughput",
            Label::LowTensorCoreUtil => "low_tensor_core_util",
            Label::Underparallelized => "underparallelized",
            Label::Other => "other",
        }
    }

    /// Words used to query the compendium.
    pub fn query(self) -> String {
        self.as_str().replace('_', " ")
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Gt,
    Ge,
    Lt,
    Le,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Gt => value > threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
        }
    }

    fn fires_high(self) -> bool {
        matches!(self, Comparator::Gt | Comparator::Ge)
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
        }
    }
}

/// Secondary test that picks between two labels once the primary fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSplit {
    pub metric: MetricId,
    pub comparator: Comparator,
    pub threshold: f64,
    /// Label used when the split metric is missing or the test fails.
    pub otherwise: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeTo {
    /// Threshold is a percentage of `HardwareSpec::memory_bandwidth_gbps`.
    MemoryBandwidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub metric: MetricId,
    pub comparator: Comparator,
    pub threshold: f64,
    pub label: Label,
    pub backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<RuleSplit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_to: Option<RelativeTo>,
    /// Restricts the rule to these task categories when non-empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<Category>,
    /// Upper end of the metric's range, for severity normalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    /// Lower end of the metric's range; defaults to 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub metric: MetricId,
    pub value: f64,
    /// Effective threshold the value was compared against.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckLabel {
    pub label: Label,
    /// Normalized distance past the threshold, in `[0, 1]` for bounded metrics.
    pub severity: f64,
    pub evidence: Vec<Evidence>,
}

impl BottleneckLabel {
    /// One-line summary for prompts.
    pub fn describe(&self) -> String {
        let ev: Vec<String> = self
            .evidence
            .iter()
            .map(|e| format!("{} = {} (threshold {})", e.metric, fmt_num(e.value), fmt_num(e.threshold)))
            .collect();
        format!("{} [severity {:.3}]: {}", self.label, self.severity, ev.join("; "))
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    if v.abs() >= 1e6 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.4e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Threshold rules mapping profile values to bottleneck labels.
#[derive(Debug, Clone)]
pub struct RuleTable {
    rules: Vec<Rule>,
}

impl RuleTable {
    /// The defaults shipped in `data/rules.json`.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_RULES, &Catalog::builtin()).expect("builtin rules are valid")
    }

    /// Parses a rule array. Metrics are checked against the catalog and
    /// percent-valued metrics get `max = 100` unless set explicitly.
    pub fn from_json(text: &str, catalog: &Catalog) -> Result<Self, AgentError> {
        let mut rules: Vec<Rule> =
            serde_json::from_str(text).map_err(|e| AgentError::Rules(format!("invalid rules JSON: {e}")))?;
        for (i, rule) in rules.iter_mut().enumerate() {
            let desc = catalog
                .get(&rule.metric)
                .ok_or_else(|| AgentError::Rules(format!("rule {i}: unknown metric {}", rule.metric)))?;
            if !desc.backend.includes(rule.backend) {
                return Err(AgentError::Rules(format!(
                    "rule {i}: metric {} is not a {} metric",
                    rule.metric, rule.backend
                )));
            }
            if let Some(split) = &rule.split {
                if !catalog.contains(&split.metric) {
                    return Err(AgentError::Rules(format!("rule {i}: unknown split metric {}", split.metric)));
                }
            }
            if !rule.threshold.is_finite() {
                return Err(AgentError::Rules(format!("rule {i}: threshold must be finite")));
            }
            if rule.max.is_none() && desc.unit == Unit::Percent && rule.relative_to.is_none() {
                rule.max = Some(100.0);
            }
        }
        Ok(RuleTable { rules })
    }

    pub fn load(path: &Path, catalog: &Catalog) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text, catalog)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Labels fired by `profile`, most severe first (ties by label).
    ///
    /// Category-restricted rules only apply when `category` is given and
    /// listed. A backend mismatch between profile and hardware yields no
    /// labels.
    pub fn classify(
        &self,
        profile: &ProfileReport,
        hw: &HardwareSpec,
        category: Option<Category>,
    ) -> Vec<BottleneckLabel> {
        if profile.backend != hw.backend {
            tracing::warn!(profile = %profile.backend, hardware = %hw.backend, "backend mismatch; no bottleneck labels");
            return Vec::new();
        }
        let mut out: Vec<BottleneckLabel> = Vec::new();
        for rule in self.rules.iter().filter(|r| r.backend == profile.backend) {
            if !rule.categories.is_empty() && !category.is_some_and(|c| rule.categories.contains(&c)) {
                continue;
            }
            let Some(value) = profile.value(&rule.metric) else { continue };
            let threshold = match rule.relative_to {
                None => rule.threshold,
                Some(RelativeTo::MemoryBandwidth) => match hw.memory_bandwidth_gbps {
                    Some(bw) => rule.threshold / 100.0 * bw * 1e9,
                    None => continue,
                },
            };
            if !rule.comparator.holds(value, threshold) {
                continue;
            }
            let severity = severity(rule, value, threshold);
            let mut evidence = vec![Evidence {
                metric: rule.metric.clone(),
                value,
                threshold,
            }];
            let label = match &rule.split {
                None => rule.label,
                Some(split) => match profile.value(&split.metric) {
                    Some(v) => {
                        evidence.push(Evidence {
                            metric: split.metric.clone(),
                            value: v,
                            threshold: split.threshold,
                        });
                        if split.comparator.holds(v, split.threshold) {
                            rule.label
                        } else {
                            split.otherwise
                        }
                    }
                    None => split.otherwise,
                },
            };
            match out.iter_mut().find(|l| l.label == label) {
                Some(existing) => {
                    existing.severity = existing.severity.max(severity);
                    existing.evidence.extend(evidence);
                }
                None => out.push(BottleneckLabel {
                    label,
                    severity,
                    evidence,
                }),
            }
        }
        out.sort_by(|a, b| b.severity.total_cmp(&a.severity).then(a.label.cmp(&b.label)));
        out
    }

    /// Human-readable rule listing.
    pub fn describe(&self) -> Vec<String> {
        self.rules
            .iter()
            .map(|r| {
                let rel = if r.relative_to.is_some() { "% of bandwidth" } else { "" };
                format!("{} {} {}{rel} => {}", r.metric, r.comparator.symbol(), fmt_num(r.threshold), r.label)
            })
            .collect()
    }
}

impl Default for RuleTable {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Distance past the threshold divided by the room between threshold and
/// the end of the range in the firing direction.
fn severity(rule: &Rule, value: f64, threshold: f64) -> f64 {
    let (distance, room) = if rule.comparator.fires_high() {
        let room = match rule.max {
            Some(max) => max - threshold,
            None => threshold.abs(),
        };
        (value - threshold, room)
    } else {
        (threshold - value, threshold - rule.min.unwrap_or(0.0))
    };
    if room > 0.0 {
        (distance / room).max(0.0)
    } else {
        1.0
    }
}

/// [`RuleTable::classify`] with the default table and no task category.
pub fn classify_bottlenecks(profile: &ProfileReport, hw: &HardwareSpec) -> Vec<BottleneckLabel> {
    RuleTable::builtin().classify(profile, hw, None)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    fn cpu_hw() -> HardwareSpec {
        HardwareSpec {
            backend: Backend::Cpu,
            core_or_sm_count: 8,
            cache_hierarchy: vec![],
            memory_bandwidth_gbps: None,
            model_name: None,
            notes: String::new(),
        }
    }

    fn gpu_hw() -> HardwareSpec {
        HardwareSpec {
            backend: Backend::Gpu,
            core_or_sm_count: 108,
            memory_bandwidth_gbps: Some(1000.0),
            ..cpu_hw()
        }
    }

    fn report(backend: Backend, values: &[(&str, f64)]) -> ProfileReport {
        let map: BTreeMap<MetricId, f64> = values.iter().map(|(k, v)| (MetricId::known(k), *v)).collect();
        ProfileReport::build(backend, map, &Catalog::builtin()).unwrap()
    }

    #[test]
    fn high_backend_bound_is_labelled() {
        let p = report(
            Backend::Cpu,
            &[
                ("cpu.frontend_bound", 5.10),
                ("cpu.backend_bound", 61.76),
                ("cpu.bad_speculation", 1.0),
                ("cpu.retiring", 32.14),
            ],
        );
        let labels = classify_bottlenecks(&p, &cpu_hw());
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].label, Label::BackendCoreBound);
        assert_eq!(labels[0].evidence[0].value, 61.76);

        let with_llc = report(Backend::Cpu, &[("cpu.backend_bound", 61.76), ("cpu.llc_miss_rate", 35.0)]);
        let labels = classify_bottlenecks(&with_llc, &cpu_hw());
        assert_eq!(labels[0].label, Label::BackendMemoryBound);
        assert_eq!(labels[0].evidence.len(), 2);
    }

    #[test]
    fn healthy_gpu_has_no_labels() {
        let p = report(
            Backend::Gpu,
            &[
                ("gpu.occupancy", 90.0),
                ("gpu.registers_per_thread", 32.0),
                ("gpu.mem_throughput", 0.8 * 1000.0 * 1e9),
            ],
        );
        assert!(classify_bottlenecks(&p, &gpu_hw()).is_empty());
    }

    #[test]
    fn severity_orders_backend_before_frontend() {
        let p = report(Backend::Cpu, &[("cpu.frontend_bound", 21.0), ("cpu.backend_bound", 51.0)]);
        let labels = classify_bottlenecks(&p, &cpu_hw());
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0].label, Label::BackendCoreBound);
        assert_eq!(labels[1].label, Label::FrontendBound);
        // (51-50)/(100-50) and (21-20)/(100-20)
        assert!((labels[0].severity - 1.0 / 50.0).abs() < 1e-12);
        assert!((labels[1].severity - 1.0 / 80.0).abs() < 1e-12);
    }

    #[test]
    fn gpu_rules_fire_with_evidence() {
        let p = report(
            Backend::Gpu,
            &[
                ("gpu.occupancy", 20.0),
                ("gpu.registers_per_thread", 200.0),
                ("gpu.mem_throughput", 100.0e9),
                ("gpu.tensor_core_active_cycles", 0.0),
            ],
        );
        let t = RuleTable::builtin();
        let labels: Vec<Label> = t.classify(&p, &gpu_hw(), None).iter().map(|l| l.label).collect();
        assert_eq!(labels.len(), 3);
        assert!(!labels.contains(&Label::LowTensorCoreUtil));
        let with_tc = t.classify(&p, &gpu_hw(), Some(Category::Matmul));
        assert!(with_tc.iter().any(|l| l.label == Label::LowTensorCoreUtil));
        let mem = with_tc.iter().find(|l| l.label == Label::LowMemoryThroughput).unwrap();
        assert_eq!(mem.evidence[0].threshold, 300.0e9);
        assert!(with_tc.iter().all(|l| !l.evidence.is_empty()));
        // Bandwidth unknown: the relative rule cannot be evaluated.
        let mut hw = gpu_hw();
        hw.memory_bandwidth_gbps = None;
        assert!(t.classify(&p, &hw, None).iter().all(|l| l.label != Label::LowMemoryThroughput));
    }

    #[test]
    fn backend_mismatch_is_empty() {
        let p = report(Backend::Cpu, &[("cpu.backend_bound", 90.0)]);
        assert!(classify_bottlenecks(&p, &gpu_hw()).is_empty());
    }

    #[test]
    fn thresholds_are_configurable() {
        let text = r#"[{"metric":"cpu.frontend_bound","comparator":"gt","threshold":5,"label":"frontend_bound","backend":"cpu"}]"#;
        let t = RuleTable::from_json(text, &Catalog::builtin()).unwrap();
        let p = report(Backend::Cpu, &[("cpu.frontend_bound", 7.68)]);
        assert_eq!(t.classify(&p, &cpu_hw(), None)[0].label, Label::FrontendBound);
        assert!(RuleTable::from_json(
            r#"[{"metric":"cpu.bogus","comparator":"gt","threshold":5,"label":"other","backend":"cpu"}]"#,
            &Catalog::builtin()
        )
        .is_err());
        assert!(RuleTable::from_json(
            r#"[{"metric":"gpu.occupancy","comparator":"gt","threshold":5,"label":"other","backend":"cpu"}]"#,
            &Catalog::builtin()
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn raising_one_metric_keeps_unrelated_labels(
            fe in 0.0f64..100.0, be in 0.0f64..100.0, bs in 0.0f64..100.0, bump in 0.0f64..100.0,
        ) {
            let t = RuleTable::builtin();
            let base = report(Backend::Cpu, &[
                ("cpu.frontend_bound", fe), ("cpu.backend_bound", be), ("cpu.bad_speculation", bs),
            ]);
            let raised = report(Backend::Cpu, &[
                ("cpu.frontend_bound", (fe + bump).min(100.0)), ("cpu.backend_bound", be), ("cpu.bad_speculation", bs),
            ]);
            let before: Vec<Label> = t.classify(&base, &cpu_hw(), None).into_iter().map(|l| l.label).collect();
            let after: Vec<Label> = t.classify(&raised, &cpu_hw(), None).into_iter().map(|l| l.label).collect();
            for l in &before {
                prop_assert!(after.contains(l), "{l} disappeared");
            }
            prop_assert_eq!(&t.classify(&base, &cpu_hw(), None), &t.classify(&base, &cpu_hw(), None));
        }
    }
}
