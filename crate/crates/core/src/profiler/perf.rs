//! Linux `perf stat` adapter.
//!
//! Accepted input is what `perf stat -x, -o <file>` writes: one event per
//! line as `value,unit,event,run-time,pct-running[,metric-value,metric-unit]`,
//! plus metric-only lines (empty value and event fields) that carry
//! top-down percentages such as `,,,,,61.76,%  tma_backend_bound`. The
//! tabular layout printed by `perf stat --topdown` is also recognized.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::metrics::{Backend, Catalog, MetricId, Unit};

use super::{select_requested, ProfileRequest, ProfilerAdapter, ProfilerError, RawOutput, WrappedCommand};

const NOT_COUNTED: &[&str] = &["<not counted>", "<not supported>"];

/// Raw top-down slot events and the percentage metric each one feeds.
const TOPDOWN_SLOTS: [(&str, &str); 4] = [
    ("topdown_retiring", "cpu.retiring"),
    ("topdown_bad_spec", "cpu.bad_speculation"),
    ("topdown_fe_bound", "cpu.frontend_bound"),
    ("topdown_be_bound", "cpu.backend_bound"),
];

const TOPDOWN_COLUMNS: [(&str, &str); 4] = [
    ("retiring", "cpu.retiring"),
    ("bad speculation", "cpu.bad_speculation"),
    ("frontend bound", "cpu.frontend_bound"),
    ("backend bound", "cpu.backend_bound"),
];

/// perf events needed for each collectable metric. An empty list means the
/// metric comes from the `TopdownL1` metric group.
const EVENTS: &[(&str, &[&str])] = &[
    ("cpu.instructions_retired", &["instructions"]),
    ("cpu.cycles", &["cycles"]),
    ("cpu.ipc", &["instructions", "cycles"]),
    ("cpu.frontend_bound", &[]),
    ("cpu.backend_bound", &[]),
    ("cpu.bad_speculation", &[]),
    ("cpu.retiring", &[]),
    ("cpu.task_clock", &["task-clock"]),
    ("cpu.llc_references", &["LLC-loads"]),
    ("cpu.llc_misses", &["LLC-load-misses"]),
    ("cpu.llc_miss_rate", &["LLC-loads", "LLC-load-misses"]),
    ("cpu.cache_references", &["cache-references"]),
    ("cpu.cache_misses", &["cache-misses"]),
    ("cpu.branch_instructions", &["branches"]),
    ("cpu.branch_misses", &["branch-misses"]),
    ("cpu.branch_miss_rate", &["branches", "branch-misses"]),
    ("cpu.l1d_misses", &["L1-dcache-load-misses"]),
];

/// Wraps runner commands in `perf stat -x,`.
pub struct PerfAdapter {
    catalog: Arc<Catalog>,
    perf_binary: String,
    capabilities: BTreeSet<MetricId>,
}

impl PerfAdapter {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        let capabilities = perf_capabilities(&catalog);
        PerfAdapter {
            catalog,
            perf_binary: "perf".into(),
            capabilities,
        }
    }

    pub fn with_binary(mut self, binary: impl Into<String>) -> Self {
        self.perf_binary = binary.into();
        self
    }
}

pub(crate) fn perf_capabilities(catalog: &Catalog) -> BTreeSet<MetricId> {
    EVENTS
        .iter()
        .map(|(m, _)| MetricId::known(m))
        .filter(|m| catalog.contains(m))
        .collect()
}

impl ProfilerAdapter for PerfAdapter {
    fn name(&self) -> &str {
        "perf"
    }

    fn backend(&self) -> Backend {
        Backend::Cpu
    }

    fn capabilities(&self) -> &BTreeSet<MetricId> {
        &self.capabilities
    }

    fn wrap(&self, request: &ProfileRequest) -> WrappedCommand {
        let mut events: Vec<&str> = Vec::new();
        let mut topdown = false;
        for m in &request.metrics {
            if let Some((_, evs)) = EVENTS.iter().find(|(name, _)| *name == m.as_str()) {
                if evs.is_empty() {
                    topdown = true;
                }
                for e in *evs {
                    if !events.contains(e) {
                        events.push(e);
                    }
                }
            }
        }
        let mut argv = vec![
            self.perf_binary.clone(),
            "stat".into(),
            "-x,".into(),
            "-o".into(),
            request.raw_path.display().to_string(),
        ];
        if !events.is_empty() {
            argv.push("-e".into());
            argv.push(events.join(","));
        }
        if topdown {
            argv.push("-M".into());
            argv.push("TopdownL1".into());
        }
        argv.push("--".into());
        argv.extend(request.command.iter().cloned());
        WrappedCommand {
            argv,
            output: RawOutput::File,
        }
    }

    fn parse(
        &self,
        raw: &str,
        requested: &[MetricId],
    ) -> Result<crate::metrics::ProfileReport, ProfilerError> {
        perf_parse(raw, requested, &self.catalog)
    }
}

#[derive(Default)]
struct Parsed {
    values: BTreeMap<MetricId, f64>,
    slots: BTreeMap<&'static str, f64>,
    warnings: BTreeSet<String>,
    wall_time_ns: Option<f64>,
}

impl Parsed {
    fn add(&mut self, catalog: &Catalog, id: MetricId, value: f64) {
        let summable = matches!(
            catalog.get(&id).map(|d| d.unit),
            Some(Unit::Count | Unit::Cycles | Unit::Nanoseconds)
        );
        match self.values.get_mut(&id) {
            // Hybrid CPUs report the same event once per core type.
            Some(v) if summable => *v += value,
            Some(_) => {
                self.warnings
                    .insert(format!("{id}: reported more than once, keeping first value"));
            }
            None => {
                self.values.insert(id, value);
            }
        }
    }
}

/// Parses `perf stat` output into a report restricted to `requested`.
///
/// Counters are parsed as integers and are exact. `<not counted>` and
/// `<not supported>` entries become warnings.
pub fn perf_parse(
    raw: &str,
    requested: &[MetricId],
    catalog: &Catalog,
) -> Result<crate::metrics::ProfileReport, ProfilerError> {
    if raw.trim().is_empty() {
        return Err(ProfilerError::EmptyProfile);
    }
    let mut parsed = Parsed::default();
    let mut topdown_header: Option<Vec<&'static str>> = None;

    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if trimmed.starts_with("Performance counter stats for") {
            continue;
        }
        if let Some(secs) = trimmed.strip_suffix("seconds time elapsed") {
            let secs: f64 = secs.trim().parse().map_err(|_| parse_err(lineno, line, "bad elapsed time"))?;
            parsed.wall_time_ns = Some(secs * 1e9);
            continue;
        }
        if trimmed.ends_with("seconds user") || trimmed.ends_with("seconds sys") {
            continue;
        }
        if let Some(columns) = topdown_header.take() {
            parse_topdown_row(&mut parsed, catalog, &columns, lineno, line)?;
            continue;
        }
        if !trimmed.contains(',') {
            if let Some(columns) = topdown_columns(trimmed) {
                topdown_header = Some(columns);
                continue;
            }
            return Err(parse_err(lineno, line, "expected comma-separated perf stat fields"));
        }
        parse_csv_line(&mut parsed, catalog, lineno, line)?;
    }
    if topdown_header.is_some() {
        return Err(parse_err(
            raw.lines().count(),
            raw.lines().last().unwrap_or(""),
            "top-down header without a data row",
        ));
    }

    // Percentages from raw slot counts when perf did not print the metrics.
    let total: f64 = TOPDOWN_SLOTS
        .iter()
        .filter_map(|(ev, _)| parsed.slots.get(ev))
        .sum();
    if TOPDOWN_SLOTS.iter().all(|(ev, _)| parsed.slots.contains_key(ev)) && total > 0.0 {
        for (ev, metric) in TOPDOWN_SLOTS {
            let id = MetricId::known(metric);
            if !parsed.values.contains_key(&id) {
                parsed.values.insert(id, parsed.slots[ev] / total * 100.0);
            }
        }
    }

    let Parsed {
        values,
        warnings,
        wall_time_ns,
        ..
    } = parsed;
    let mut report = crate::metrics::ProfileReport::build(Backend::Cpu, values, catalog)?;
    if let Some(ns) = wall_time_ns.filter(|ns| *ns > 0.0) {
        report = report.with_wall_time(ns)?;
    }
    select_requested(report, requested, warnings)
}

fn parse_err(line: usize, text: &str, reason: &str) -> ProfilerError {
    ProfilerError::Parse {
        line,
        text: text.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_csv_line(
    parsed: &mut Parsed,
    catalog: &Catalog,
    lineno: usize,
    line: &str,
) -> Result<(), ProfilerError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 3 {
        return Err(parse_err(lineno, line, "expected at least 3 fields (value,unit,event)"));
    }
    let (value, unit, event) = (fields[0], fields[1], fields[2]);

    // Metric-only line: ",,,,,<value>,<unit text naming the metric>".
    if value.is_empty() && event.is_empty() {
        let (Some(mv), Some(mu)) = (fields.get(5), fields.get(6)) else {
            return Err(parse_err(lineno, line, "metric line without value and name"));
        };
        if mv.is_empty() {
            return Ok(());
        }
        let name = mu.trim_start_matches('%').trim();
        let v: f64 = mv
            .parse()
            .map_err(|_| parse_err(lineno, line, "metric value is not a number"))?;
        if let Some(desc) = catalog.resolve(name, Some(Backend::Cpu)) {
            parsed.add(catalog, desc.name.clone(), v);
        }
        return Ok(());
    }

    let event_name = normalize_event(event);
    if event_name.is_empty() {
        return Err(parse_err(lineno, line, "missing event name"));
    }
    if NOT_COUNTED.contains(&value) {
        let label = catalog
            .resolve(&event_name, Some(Backend::Cpu))
            .map(|d| d.name.to_string())
            .unwrap_or_else(|| event_name.clone());
        parsed.warnings.insert(format!("{label}: {value}"));
        return Ok(());
    }
    let number = parse_number(value).ok_or_else(|| parse_err(lineno, line, "counter value is not a number"))?;

    let key = crate::metrics::normalize_name(&event_name);
    if key == "duration_time" {
        parsed.wall_time_ns = Some(scale_time(number, unit));
        return Ok(());
    }
    if let Some((slot, _)) = TOPDOWN_SLOTS.iter().find(|(s, _)| *s == key) {
        *parsed.slots.entry(slot).or_insert(0.0) += number;
        return Ok(());
    }
    if let Some(desc) = catalog.resolve(&event_name, Some(Backend::Cpu)) {
        let v = if desc.unit == Unit::Nanoseconds {
            scale_time(number, unit)
        } else {
            number
        };
        parsed.add(catalog, desc.name.clone(), v);
    }

    // Trailing top-down annotation on an event line.
    if let (Some(mv), Some(mu)) = (fields.get(5), fields.get(6)) {
        let name = mu.trim_start_matches('%').trim();
        if let (Ok(v), Some(desc)) = (mv.parse::<f64>(), catalog.resolve(name, Some(Backend::Cpu))) {
            if desc.unit == Unit::Percent {
                parsed.add(catalog, desc.name.clone(), v);
            }
        }
    }
    Ok(())
}

/// Integer counters go through `u64` so they are exact; anything else as f64.
fn parse_number(s: &str) -> Option<f64> {
    if let Ok(n) = s.parse::<u64>() {
        return Some(n as f64);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn scale_time(value: f64, unit: &str) -> f64 {
    match unit {
        "msec" | "ms" => value * 1e6,
        "usec" | "us" => value * 1e3,
        "sec" | "s" => value * 1e9,
        _ => value,
    }
}

/// `cpu_core/instructions/u` -> `instructions`, `cycles:u` -> `cycles`.
fn normalize_event(event: &str) -> String {
    let mut e = event.trim();
    if let Some((pmu, rest)) = e.split_once('/') {
        if !pmu.is_empty() && rest.contains('/') {
            e = rest.split('/').next().unwrap_or(rest);
        }
    }
    if let Some((name, modifiers)) = e.rsplit_once(':') {
        if modifiers.chars().all(|c| "ukhGHpPS".contains(c)) {
            e = name;
        }
    }
    e.to_string()
}

fn topdown_columns(header: &str) -> Option<Vec<&'static str>> {
    let lower = header.to_ascii_lowercase();
    let mut found: Vec<(usize, &'static str)> = TOPDOWN_COLUMNS
        .iter()
        .filter_map(|(name, metric)| lower.find(name).map(|pos| (pos, *metric)))
        .collect();
    if found.len() != TOPDOWN_COLUMNS.len() {
        return None;
    }
    found.sort_by_key(|(pos, _)| *pos);
    Some(found.into_iter().map(|(_, m)| m).collect())
}

fn parse_topdown_row(
    parsed: &mut Parsed,
    catalog: &Catalog,
    columns: &[&'static str],
    lineno: usize,
    line: &str,
) -> Result<(), ProfilerError> {
    let percents: Vec<f64> = line
        .split_whitespace()
        .filter_map(|tok| tok.strip_suffix('%'))
        .map(|v| v.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| parse_err(lineno, line, "bad percentage in top-down row"))?;
    if percents.len() != columns.len() {
        return Err(parse_err(
            lineno,
            line,
            &format!("expected {} top-down percentages, found {}", columns.len(), percents.len()),
        ));
    }
    for (metric, v) in columns.iter().zip(percents) {
        parsed.add(catalog, MetricId::known(metric), v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use std::time::Duration;

    fn cat() -> Catalog {
        Catalog::builtin()
    }

    fn ids(names: &[&str]) -> Vec<MetricId> {
        names.iter().map(|n| MetricId::known(n)).collect()
    }

    #[test]
    fn instructions_count_is_exact() {
        let r = perf_parse("945000,,instructions\n", &ids(&["cpu.instructions_retired"]), &cat())
            .unwrap();
        assert_eq!(r.get("cpu.instructions_retired"), Some(945_000.0));
    }

    #[test]
    fn ipc_is_derived() {
        let raw = "242000,,cycles,1000,100.00\n136000,,instructions,1000,100.00,0.56,insn per cycle\n";
        let r = perf_parse(raw, &ids(&["cpu.ipc", "cpu.cycles"]), &cat()).unwrap();
        assert_eq!(r.get("cpu.ipc"), Some(136_000.0 / 242_000.0));
        assert!((r.get("cpu.ipc").unwrap() - 0.56).abs() < 0.005);
        // instructions was not requested
        assert_eq!(r.get("cpu.instructions_retired"), None);
    }

    #[test]
    fn empty_input_is_empty_profile() {
        assert!(matches!(
            perf_parse("", &ids(&["cpu.cycles"]), &cat()),
            Err(ProfilerError::EmptyProfile)
        ));
    }

    #[test]
    fn not_counted_becomes_warning() {
        let raw = "<not counted>,,cycles,0,0.00\n100,,instructions,10,100.00\n";
        let r = perf_parse(raw, &ids(&["cpu.cycles", "cpu.instructions_retired"]), &cat()).unwrap();
        assert_eq!(r.get("cpu.cycles"), None);
        assert!(r.warnings.contains("cpu.cycles: <not counted>"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let raw = "100,,instructions\ngarbage line here\n";
        match perf_parse(raw, &ids(&["cpu.instructions_retired"]), &cat()) {
            Err(ProfilerError::Parse { line, text, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(text, "garbage line here");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_counter_is_parse_error() {
        let raw = "12x4,,cycles\n";
        assert!(matches!(
            perf_parse(raw, &ids(&["cpu.cycles"]), &cat()),
            Err(ProfilerError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn topdown_metric_lines() {
        let raw = "\
1000,,instructions,5,100.00
,,,,,32.50,%  tma_retiring
,,,,,1.10,%  tma_bad_speculation
,,,,,5.10,%  tma_frontend_bound
,,,,,61.30,%  tma_backend_bound
";
        let r = perf_parse(
            raw,
            &ids(&["cpu.frontend_bound", "cpu.backend_bound", "cpu.bad_speculation"]),
            &cat(),
        )
        .unwrap();
        assert_eq!(r.get("cpu.backend_bound"), Some(61.30));
        assert_eq!(r.get("cpu.frontend_bound"), Some(5.10));
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn topdown_table_layout() {
        let raw = "
 Performance counter stats for 'system wide':

                    retiring      bad speculation       frontend bound        backend bound
S0-C0           2      32.3%                 1.1%                 5.1%                61.5%

       1.001 seconds time elapsed
";
        let r = perf_parse(raw, &ids(&["cpu.backend_bound", "cpu.retiring"]), &cat()).unwrap();
        assert_eq!(r.get("cpu.backend_bound"), Some(61.5));
        assert_eq!(r.get("cpu.retiring"), Some(32.3));
        approx::assert_relative_eq!(r.wall_time_ns.unwrap(), 1.001e9, max_relative = 1e-12);
    }

    #[test]
    fn slot_counts_become_percentages() {
        let raw = "\
400,,topdown-retiring
100,,topdown-bad-spec
100,,topdown-fe-bound
400,,topdown-be-bound
";
        let r = perf_parse(raw, &ids(&["cpu.backend_bound", "cpu.frontend_bound"]), &cat()).unwrap();
        assert_eq!(r.get("cpu.backend_bound"), Some(40.0));
        assert_eq!(r.get("cpu.frontend_bound"), Some(10.0));
    }

    #[test]
    fn hybrid_counts_are_summed_and_modifiers_stripped() {
        let raw = "100,,cpu_core/instructions/u,1,100.00\n50,,cpu_atom/instructions/u,1,100.00\n7,,cycles:u\n";
        let r = perf_parse(raw, &ids(&["cpu.instructions_retired", "cpu.cycles"]), &cat()).unwrap();
        assert_eq!(r.get("cpu.instructions_retired"), Some(150.0));
        assert_eq!(r.get("cpu.cycles"), Some(7.0));
    }

    #[test]
    fn task_clock_msec_is_scaled() {
        let raw = "12.5,msec,task-clock,12500000,100.00,0.98,CPUs utilized\n2000,ns,duration_time\n";
        let r = perf_parse(raw, &ids(&["cpu.task_clock"]), &cat()).unwrap();
        assert_eq!(r.get("cpu.task_clock"), Some(12_500_000.0));
        assert_eq!(r.wall_time_ns, Some(2000.0));
    }

    #[test]
    fn wrap_builds_perf_argv() {
        let adapter = PerfAdapter::new(Arc::new(cat()));
        let req = ProfileRequest {
            command: vec!["./runner".into(), "produce".into()],
            metrics: ids(&["cpu.ipc", "cpu.cycles", "cpu.backend_bound"]),
            timeout: Duration::from_secs(1),
            workdir: PathBuf::from("."),
            raw_path: PathBuf::from("/tmp/x/profile.raw"),
            env: Default::default(),
            iteration: 0,
        };
        let w = adapter.wrap(&req);
        assert_eq!(
            w.argv,
            vec![
                "perf", "stat", "-x,", "-o", "/tmp/x/profile.raw", "-e", "instructions,cycles",
                "-M", "TopdownL1", "--", "./runner", "produce"
            ]
        );
        assert_eq!(w.output, RawOutput::File);
    }

    #[test]
    fn capabilities_cover_cpu_defaults() {
        let catalog = cat();
        let caps = perf_capabilities(&catalog);
        for m in catalog.default_metric_set(Backend::Cpu) {
            assert!(caps.contains(&m), "{m}");
        }
    }
}
