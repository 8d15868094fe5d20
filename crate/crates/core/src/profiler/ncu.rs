//! NVIDIA Nsight Compute CSV ingestion.
//!
//! Two layouts are accepted:
//!
//! - the wide `--page raw` export: a header row of metric names, an optional
//!   units row, then one row per kernel launch;
//! - the long `--page details` export with `Metric Name`, `Metric Unit` and
//!   `Metric Value` columns, grouped into launches by `ID`.
//!
//! Columns are mapped to catalog metrics through an alias table. When a
//! task launches several kernels, percent-like metrics are weighted by each
//! launch's duration and counts are summed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::metrics::{Backend, Catalog, MetricId, ProfileReport, Unit};

use super::{select_requested, ProfileRequest, ProfilerAdapter, ProfilerError, RawOutput, WrappedCommand};

const BUILTIN_ALIASES: &str = include_str!("../../data/ncu_aliases.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasEntry {
    pub column: String,
    pub metric: MetricId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AliasFile {
    version: u32,
    aliases: Vec<AliasEntry>,
}

/// NCU column name -> catalog metric.
#[derive(Debug, Clone)]
pub struct NcuAliasTable {
    entries: Vec<AliasEntry>,
}

impl NcuAliasTable {
    pub fn builtin(catalog: &Catalog) -> Self {
        Self::from_json(BUILTIN_ALIASES, catalog).expect("builtin alias table is valid")
    }

    pub fn from_json(text: &str, catalog: &Catalog) -> Result<Self, ProfilerError> {
        let file: AliasFile =
            serde_json::from_str(text).map_err(|e| ProfilerError::AliasTable(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for e in &file.aliases {
            if !catalog.contains(&e.metric) {
                return Err(ProfilerError::AliasTable(format!(
                    "column {:?} maps to unknown metric {}",
                    e.column, e.metric
                )));
            }
            if !seen.insert(e.column.clone()) {
                return Err(ProfilerError::AliasTable(format!("duplicate column {:?}", e.column)));
            }
        }
        Ok(NcuAliasTable {
            entries: file.aliases,
        })
    }

    pub fn load(path: &Path, catalog: &Catalog) -> Result<Self, ProfilerError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProfilerError::io(path, e))?;
        Self::from_json(&text, catalog)
    }

    pub fn metric_for(&self, column: &str) -> Option<&MetricId> {
        let column = column.trim();
        self.entries
            .iter()
            .find(|e| e.column == column)
            .map(|e| &e.metric)
    }

    pub fn columns_for<'a>(&'a self, metric: &'a MetricId) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |e| &e.metric == metric)
            .map(|e| e.column.as_str())
    }

    /// Raw NCU metric name (as passed to `--metrics`) for a catalog metric.
    pub fn raw_metric_for(&self, metric: &MetricId) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| &e.metric == metric && e.column.contains("__"))
            .map(|e| e.column.as_str())
    }

    pub fn metrics(&self) -> BTreeSet<MetricId> {
        self.entries.iter().map(|e| e.metric.clone()).collect()
    }
}

/// Wraps runner commands in `ncu --csv --page raw`.
pub struct NcuAdapter {
    catalog: Arc<Catalog>,
    aliases: NcuAliasTable,
    ncu_binary: String,
    capabilities: BTreeSet<MetricId>,
}

impl NcuAdapter {
    pub fn new(catalog: Arc<Catalog>, aliases: NcuAliasTable) -> Self {
        let capabilities = aliases.metrics();
        NcuAdapter {
            catalog,
            aliases,
            ncu_binary: "ncu".into(),
            capabilities,
        }
    }

    pub fn with_binary(mut self, binary: impl Into<String>) -> Self {
        self.ncu_binary = binary.into();
        self
    }
}

impl ProfilerAdapter for NcuAdapter {
    fn name(&self) -> &str {
        "ncu"
    }

    fn backend(&self) -> Backend {
        Backend::Gpu
    }

    fn capabilities(&self) -> &BTreeSet<MetricId> {
        &self.capabilities
    }

    fn wrap(&self, request: &ProfileRequest) -> WrappedCommand {
        let raw_metrics: Vec<&str> = request
            .metrics
            .iter()
            .filter_map(|m| self.aliases.raw_metric_for(m))
            .collect();
        let mut argv = vec![
            self.ncu_binary.clone(),
            "--csv".into(),
            "--page".into(),
            "raw".into(),
        ];
        if !raw_metrics.is_empty() {
            argv.push("--metrics".into());
            argv.push(raw_metrics.join(","));
        }
        argv.push("--".into());
        argv.extend(request.command.iter().cloned());
        WrappedCommand {
            argv,
            output: RawOutput::Stdout,
        }
    }

    fn parse(&self, raw: &str, requested: &[MetricId]) -> Result<ProfileReport, ProfilerError> {
        ncu_parse(raw, requested, &self.catalog, &self.aliases)
    }
}

/// Parses an NCU CSV export into a report restricted to `requested`.
pub fn ncu_parse(
    raw_csv: &str,
    requested: &[MetricId],
    catalog: &Catalog,
    aliases: &NcuAliasTable,
) -> Result<ProfileReport, ProfilerError> {
    for m in requested {
        if aliases.columns_for(m).next().is_none() {
            let expected_column = catalog
                .get(m)
                .and_then(|d| d.aliases.iter().find(|a| a.contains("__")).cloned());
            return Err(ProfilerError::UnknownAlias {
                metric: m.clone(),
                expected_column,
            });
        }
    }

    // NCU interleaves its own `==PROF==` log lines with the CSV on stdout.
    let mut line_map = Vec::new();
    let mut body = String::new();
    for (i, line) in raw_csv.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with("==") {
            continue;
        }
        line_map.push(i + 1);
        body.push_str(line);
        body.push('\n');
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(body.as_bytes());
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = line_map.get(i).copied().unwrap_or(0);
        let rec = rec.map_err(|e| ProfilerError::Parse {
            line,
            text: raw_csv.lines().nth(line.saturating_sub(1)).unwrap_or("").to_string(),
            reason: e.to_string(),
        })?;
        records.push((line, rec.iter().map(|s| s.trim().to_string()).collect::<Vec<_>>()));
    }

    let Some((header_line, header)) = records.first() else {
        return Err(ProfilerError::Parse {
            line: 1,
            text: String::new(),
            reason: "missing header row".into(),
        });
    };
    if header.iter().all(|c| c.is_empty() || parse_number(c).is_some()) {
        return Err(ProfilerError::Parse {
            line: *header_line,
            text: header.join(","),
            reason: "missing header row".into(),
        });
    }

    let mut warnings = BTreeSet::new();
    let launches = if let (Some(name_col), Some(value_col)) = (
        header.iter().position(|c| c == "Metric Name"),
        header.iter().position(|c| c == "Metric Value"),
    ) {
        let unit_col = header.iter().position(|c| c == "Metric Unit");
        let id_col = header.iter().position(|c| c == "ID");
        long_launches(&records[1..], name_col, value_col, unit_col, id_col, catalog, aliases, &mut warnings)
    } else {
        wide_launches(header, &records[1..], catalog, aliases, &mut warnings)
    };

    let values = aggregate(&launches, catalog);
    let report = ProfileReport::build(Backend::Gpu, values, catalog)?;
    let report = match report.get("gpu.kernel_time") {
        Some(ns) if ns > 0.0 => report.with_wall_time(ns)?,
        _ => report,
    };
    select_requested(report, requested, warnings)
}

type Launch = BTreeMap<MetricId, f64>;

fn wide_launches(
    header: &[String],
    rows: &[(usize, Vec<String>)],
    catalog: &Catalog,
    aliases: &NcuAliasTable,
    warnings: &mut BTreeSet<String>,
) -> Vec<Launch> {
    // First column wins when several columns alias the same metric.
    let mut columns: Vec<(usize, MetricId)> = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if let Some(m) = aliases.metric_for(name) {
            if !columns.iter().any(|(_, seen)| seen == m) {
                columns.push((i, m.clone()));
            }
        }
    }
    let mut rows = rows;
    let mut units: Vec<String> = vec![String::new(); header.len()];
    if let Some((_, first)) = rows.first() {
        let is_units_row = !columns.is_empty()
            && columns.iter().all(|(i, _)| {
                first
                    .get(*i)
                    .map(|c| parse_number(c).is_none())
                    .unwrap_or(true)
            });
        if is_units_row {
            units = first.clone();
            units.resize(header.len(), String::new());
            rows = &rows[1..];
        }
    }
    rows.iter()
        .map(|(_, row)| {
            let mut launch = Launch::new();
            for (i, metric) in &columns {
                let cell = row.get(*i).map(String::as_str).unwrap_or("");
                if let Some(v) = convert(cell, &units[*i], metric, catalog, warnings) {
                    launch.insert(metric.clone(), v);
                }
            }
            launch
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn long_launches(
    rows: &[(usize, Vec<String>)],
    name_col: usize,
    value_col: usize,
    unit_col: Option<usize>,
    id_col: Option<usize>,
    catalog: &Catalog,
    aliases: &NcuAliasTable,
    warnings: &mut BTreeSet<String>,
) -> Vec<Launch> {
    let mut by_id: BTreeMap<String, Launch> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (_, row) in rows {
        let Some(metric) = row.get(name_col).and_then(|n| aliases.metric_for(n)) else {
            continue;
        };
        let id = id_col
            .and_then(|c| row.get(c))
            .cloned()
            .unwrap_or_default();
        let unit = unit_col.and_then(|c| row.get(c)).map(String::as_str).unwrap_or("");
        let cell = row.get(value_col).map(String::as_str).unwrap_or("");
        let Some(v) = convert(cell, unit, metric, catalog, warnings) else {
            continue;
        };
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id.entry(id).or_default().entry(metric.clone()).or_insert(v);
    }
    order
        .into_iter()
        .filter_map(|id| by_id.remove(&id))
        .collect()
}

fn convert(
    cell: &str,
    unit: &str,
    metric: &MetricId,
    catalog: &Catalog,
    warnings: &mut BTreeSet<String>,
) -> Option<f64> {
    let cleaned: String = cell.chars().filter(|c| *c != ',').collect();
    if cleaned.is_empty() {
        return None;
    }
    let Some(v) = parse_number(&cleaned) else {
        warnings.insert(format!("{metric}: unparseable value {cell:?}"));
        return None;
    };
    let target = catalog.get(metric).map(|d| d.unit)?;
    match unit_scale(unit.trim(), target) {
        Some(factor) => Some(v * factor),
        None => {
            warnings.insert(format!("{metric}: unsupported unit {unit:?}"));
            None
        }
    }
}

fn unit_scale(unit: &str, target: Unit) -> Option<f64> {
    if unit.is_empty() {
        return Some(1.0);
    }
    match target {
        Unit::Nanoseconds => match unit {
            "nsecond" | "ns" => Some(1.0),
            "usecond" | "us" => Some(1e3),
            "msecond" | "ms" => Some(1e6),
            "second" | "s" => Some(1e9),
            _ => None,
        },
        Unit::BytesPerSec => match unit {
            "byte/second" | "byte/s" | "B/s" => Some(1.0),
            "Kbyte/second" | "KB/s" => Some(1e3),
            "Mbyte/second" | "MB/s" => Some(1e6),
            "Gbyte/second" | "GB/s" => Some(1e9),
            "Tbyte/second" | "TB/s" => Some(1e12),
            _ => None,
        },
        Unit::Percent => (unit == "%").then_some(1.0),
        Unit::Count => match unit {
            "Kbyte" | "KB" => Some(1e3),
            "Mbyte" | "MB" => Some(1e6),
            "Gbyte" | "GB" => Some(1e9),
            "Tbyte" | "TB" => Some(1e12),
            _ => Some(1.0),
        },
        _ => Some(1.0),
    }
}

fn aggregate(launches: &[Launch], catalog: &Catalog) -> BTreeMap<MetricId, f64> {
    let time_id = MetricId::known("gpu.kernel_time");
    let times: Option<Vec<f64>> = launches.iter().map(|l| l.get(&time_id).copied()).collect();
    let weights: Vec<f64> = match times {
        Some(t) if t.iter().sum::<f64>() > 0.0 => t,
        _ => vec![1.0; launches.len()],
    };

    let mut metrics: BTreeSet<&MetricId> = BTreeSet::new();
    for l in launches {
        metrics.extend(l.keys());
    }
    let mut out = BTreeMap::new();
    for m in metrics {
        let samples: Vec<(f64, f64)> = launches
            .iter()
            .zip(&weights)
            .filter_map(|(l, w)| l.get(m).map(|v| (*v, *w)))
            .collect();
        let unit = catalog.get(m).map(|d| d.unit).unwrap_or(Unit::Dimensionless);
        let value = match unit {
            Unit::Count | Unit::Cycles | Unit::Nanoseconds => samples.iter().map(|(v, _)| v).sum(),
            Unit::Dimensionless => samples.iter().map(|(v, _)| *v).fold(f64::MIN, f64::max),
            Unit::Percent | Unit::Ratio | Unit::BytesPerSec => {
                let wsum: f64 = samples.iter().map(|(_, w)| w).sum();
                if wsum > 0.0 {
                    samples.iter().map(|(v, w)| v * w).sum::<f64>() / wsum
                } else {
                    samples.iter().map(|(v, _)| v).sum::<f64>() / samples.len() as f64
                }
            }
        };
        out.insert(m.clone(), value);
    }
    out
}

fn parse_number(s: &str) -> Option<f64> {
    if let Ok(n) = s.parse::<u64>() {
        return Some(n as f64);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Catalog, NcuAliasTable) {
        let c = Catalog::builtin();
        let a = NcuAliasTable::builtin(&c);
        (c, a)
    }

    fn ids(names: &[&str]) -> Vec<MetricId> {
        names.iter().map(|n| MetricId::known(n)).collect()
    }

    #[test]
    fn single_row_passes_through() {
        let (c, a) = setup();
        let csv = "\"ID\",\"Kernel Name\",\"sm__warps_active.avg.pct_of_peak_sustained_active\"\n\"0\",\"k\",\"48.2\"\n";
        let r = ncu_parse(csv, &ids(&["gpu.occupancy"]), &c, &a).unwrap();
        assert_eq!(r.get("gpu.occupancy"), Some(48.2));
    }

    #[test]
    fn occupancy_is_time_weighted() {
        let (c, a) = setup();
        let csv = "\
\"ID\",\"Kernel Name\",\"gpu__time_duration.sum\",\"sm__warps_active.avg.pct_of_peak_sustained_active\"
\"\",\"\",\"msecond\",\"%\"
\"0\",\"k1\",\"1\",\"40\"
\"1\",\"k2\",\"3\",\"80\"
";
        let r = ncu_parse(csv, &ids(&["gpu.occupancy", "gpu.kernel_time"]), &c, &a).unwrap();
        assert_eq!(r.get("gpu.occupancy"), Some(70.0));
        assert_eq!(r.get("gpu.kernel_time"), Some(4_000_000.0));
        assert_eq!(r.wall_time_ns, Some(4_000_000.0));
    }

    #[test]
    fn no_recognized_columns_is_empty_profile() {
        let (c, a) = setup();
        let csv = "\"ID\",\"Kernel Name\",\"foo\"\n\"0\",\"k\",\"1\"\n";
        assert!(matches!(
            ncu_parse(csv, &ids(&["gpu.occupancy"]), &c, &a),
            Err(ProfilerError::EmptyProfile)
        ));
    }

    #[test]
    fn missing_header_is_parse_error() {
        let (c, a) = setup();
        assert!(matches!(
            ncu_parse("", &ids(&["gpu.occupancy"]), &c, &a),
            Err(ProfilerError::Parse { .. })
        ));
        assert!(matches!(
            ncu_parse("1,2,3\n4,5,6\n", &ids(&["gpu.occupancy"]), &c, &a),
            Err(ProfilerError::Parse { .. })
        ));
    }

    #[test]
    fn unknown_alias_names_expected_column() {
        let c = Catalog::builtin();
        let a = NcuAliasTable::from_json(
            r#"{"version":1,"aliases":[{"column":"gpu__time_duration.sum","metric":"gpu.kernel_time"}]}"#,
            &c,
        )
        .unwrap();
        match ncu_parse("\"gpu__time_duration.sum\"\n\"5\"\n", &ids(&["gpu.occupancy"]), &c, &a) {
            Err(ProfilerError::UnknownAlias {
                metric,
                expected_column,
            }) => {
                assert_eq!(metric.as_str(), "gpu.occupancy");
                assert_eq!(
                    expected_column.as_deref(),
                    Some("sm__warps_active.avg.pct_of_peak_sustained_active")
                );
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn details_page_layout() {
        let (c, a) = setup();
        let csv = "\
==PROF== Connected to process 4242
\"ID\",\"Kernel Name\",\"Section Name\",\"Metric Name\",\"Metric Unit\",\"Metric Value\"
\"0\",\"k\",\"GPU Speed Of Light Throughput\",\"Duration\",\"usecond\",\"2.50\"
\"0\",\"k\",\"Occupancy\",\"Achieved Occupancy\",\"%\",\"62.5\"
\"0\",\"k\",\"Launch Statistics\",\"Registers Per Thread\",\"register/thread\",\"40\"
\"1\",\"k\",\"GPU Speed Of Light Throughput\",\"Duration\",\"usecond\",\"7.50\"
\"1\",\"k\",\"Occupancy\",\"Achieved Occupancy\",\"%\",\"30.5\"
\"1\",\"k\",\"Launch Statistics\",\"Registers Per Thread\",\"register/thread\",\"64\"
==PROF== Disconnected from process 4242
";
        let r = ncu_parse(
            csv,
            &ids(&["gpu.kernel_time", "gpu.occupancy", "gpu.registers_per_thread"]),
            &c,
            &a,
        )
        .unwrap();
        assert_eq!(r.get("gpu.kernel_time"), Some(10_000.0));
        // (2.5 * 62.5 + 7.5 * 30.5) / 10
        assert_eq!(r.get("gpu.occupancy"), Some(38.5));
        assert_eq!(r.get("gpu.registers_per_thread"), Some(64.0));
    }

    #[test]
    fn throughput_units_are_scaled() {
        let (c, a) = setup();
        let csv = "\"dram__bytes.sum.per_second\"\n\"Gbyte/second\"\n\"1,250.5\"\n";
        let r = ncu_parse(csv, &ids(&["gpu.mem_throughput"]), &c, &a).unwrap();
        assert_eq!(r.get("gpu.mem_throughput"), Some(1250.5e9));
    }

    #[test]
    fn alias_table_rejects_unknown_metrics() {
        let c = Catalog::builtin();
        let bad = r#"{"version":1,"aliases":[{"column":"x","metric":"gpu.bogus"}]}"#;
        assert!(matches!(
            NcuAliasTable::from_json(bad, &c),
            Err(ProfilerError::AliasTable(_))
        ));
    }

    #[test]
    fn capabilities_cover_gpu_defaults() {
        let (c, a) = setup();
        let adapter = NcuAdapter::new(Arc::new(c.clone()), a);
        for m in c.default_metric_set(Backend::Gpu) {
            assert!(adapter.capabilities().contains(&m), "{m}");
        }
    }
}
