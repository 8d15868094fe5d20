use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::metrics::Backend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheLevel {
    /// `L1d`, `L2`, ... as reported by the probe.
    pub level: String,
    /// Total size across all instances.
    pub size_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<u32>,
}

/// Machine parameters shown to the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub backend: Backend,
    /// Logical CPUs, or streaming multiprocessors on a GPU.
    pub core_or_sm_count: u32,
    #[serde(default)]
    pub cache_hierarchy: Vec<CacheLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_bandwidth_gbps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default)]
    pub notes: String,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.core_or_sm_count < 1 {
            return Err(AgentError::Hardware("core_or_sm_count must be at least 1".into()));
        }
        if let Some(bw) = self.memory_bandwidth_gbps {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err(AgentError::Hardware(format!("memory bandwidth must be positive, got {bw}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let spec: HardwareSpec =
            serde_json::from_str(text).map_err(|e| AgentError::Hardware(format!("invalid hardware JSON: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hardware spec serializes") + "\n"
    }

    /// Builds a CPU spec from `lscpu` output. Understands both the
    /// `10 MiB (8 instances)` form and the older bare `32K` form.
    pub fn from_lscpu(text: &str) -> Result<Self, AgentError> {
        let mut cores = None;
        let mut model = None;
        let mut caches = Vec::new();
        for line in text.lines() {
            let Some((key, value)) = line.split_once(':') else { continue };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "CPU(s)" => cores = value.parse::<u32>().ok(),
                "Model name" => model = Some(value.to_string()),
                _ => {
                    if let Some(level) = key.strip_suffix(" cache") {
                        let (size_bytes, instances) = parse_cache_size(value).ok_or_else(|| {
                            AgentError::Hardware(format!("cannot parse cache size {value:?} for {level}"))
                        })?;
                        caches.push(CacheLevel {
                            level: level.to_string(),
                            size_bytes,
                            instances,
                        });
                    }
                }
            }
        }
        let spec = HardwareSpec {
            backend: Backend::Cpu,
            core_or_sm_count: cores.ok_or_else(|| AgentError::Hardware("lscpu output has no CPU(s) line".into()))?,
            cache_hierarchy: caches,
            memory_bandwidth_gbps: None,
            model_name: model,
            notes: String::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Probes the local machine. Only CPU probing is automatic; GPU specs
    /// are read from a file.
    pub fn probe_host(backend: Backend) -> Result<Self, AgentError> {
        if backend != Backend::Cpu {
            return Err(AgentError::Hardware(
                "automatic probing supports cpu only; pass a hardware JSON file for gpu".into(),
            ));
        }
        let lscpu = Command::new("lscpu").env("LC_ALL", "C").output();
        match lscpu {
            Ok(out) if out.status.success() => Self::from_lscpu(&String::from_utf8_lossy(&out.stdout)),
            _ => {
                tracing::warn!("lscpu unavailable; falling back to the available parallelism");
                let n = std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1);
                Ok(HardwareSpec {
                    backend,
                    core_or_sm_count: n,
                    cache_hierarchy: Vec::new(),
                    memory_bandwidth_gbps: None,
                    model_name: None,
                    notes: "cache hierarchy unknown (lscpu unavailable)".into(),
                })
            }
        }
    }

    /// Plain-text block embedded in agent prompts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let unit = match self.backend {
            Backend::Cpu => "logical cores",
            Backend::Gpu => "SMs",
        };
        let _ = writeln!(out, "backend: {}", self.backend);
        if let Some(m) = &self.model_name {
            let _ = writeln!(out, "model: {m}");
        }
        let _ = writeln!(out, "{unit}: {}", self.core_or_sm_count);
        if self.cache_hierarchy.is_empty() {
            let _ = writeln!(out, "caches: unknown");
        } else {
            let caches: Vec<String> = self
                .cache_hierarchy
                .iter()
                .map(|c| match c.instances {
                    Some(n) => format!("{} {} ({n} instances)", c.level, format_bytes(c.size_bytes)),
                    None => format!("{} {}", c.level, format_bytes(c.size_bytes)),
                })
                .collect();
            let _ = writeln!(out, "caches: {}", caches.join(", "));
        }
        match self.memory_bandwidth_gbps {
            Some(bw) => {
                let _ = writeln!(out, "memory bandwidth: {bw} GB/s");
            }
            None => {
                let _ = writeln!(out, "memory bandwidth: unknown");
            }
        }
        if !self.notes.trim().is_empty() {
            let _ = writeln!(out, "notes: {}", self.notes.trim());
        }
        out.trim_end().to_string()
    }
}

fn parse_cache_size(value: &str) -> Option<(u64, Option<u32>)> {
    let (size, rest) = match value.find('(') {
        Some(i) => (value[..i].trim(), Some(&value[i + 1..])),
        None => (value.trim(), None),
    };
    let instances = rest.and_then(|r| r.split_whitespace().next()).and_then(|n| n.parse().ok());
    let split = size
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(size.len());
    let number: f64 = size[..split].trim().parse().ok()?;
    let multiplier: u64 = match size[split..].trim() {
        "" | "B" => 1,
        "K" | "KB" | "KiB" => 1 << 10,
        "M" | "MB" | "MiB" => 1 << 20,
        "G" | "GB" | "GiB" => 1 << 30,
        _ => return None,
    };
    Some(((number * multiplier as f64).round() as u64, instances))
}

fn format_bytes(n: u64) -> String {
    if n >= 1 << 20 && n.is_multiple_of(1 << 20) {
        format!("{} MiB", n >> 20)
    } else if n >= 1 << 10 && n.is_multiple_of(1 << 10) {
        format!("{} KiB", n >> 10)
    } else {
        format!("{n} B")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODERN: &str = "Architecture:            x86_64
CPU(s):                  16
Model name:              Intel(R) Core(TM) i7-10700 CPU @ 2.90GHz
L1d cache:               256 KiB (8 instances)
L1i cache:               256 KiB (8 instances)
L2 cache:                2 MiB (8 instances)
L3 cache:                16 MiB (1 instance)
";

    const LEGACY: &str = "CPU(s):              4\nL1d cache:           32K\nL2 cache:            256K\nL3 cache:            6144K\n";

    #[test]
    fn parses_modern_lscpu() {
        let hw = HardwareSpec::from_lscpu(MODERN).unwrap();
        assert_eq!(hw.core_or_sm_count, 16);
        assert_eq!(hw.cache_hierarchy.len(), 4);
        assert_eq!(hw.cache_hierarchy[2].level, "L2");
        assert_eq!(hw.cache_hierarchy[2].size_bytes, 2 * 1024 * 1024);
        assert_eq!(hw.cache_hierarchy[2].instances, Some(8));
        assert_eq!(hw.cache_hierarchy[3].instances, Some(1));
        assert!(hw.render().contains("L3 16 MiB (1 instances)"));
    }

    #[test]
    fn parses_legacy_lscpu() {
        let hw = HardwareSpec::from_lscpu(LEGACY).unwrap();
        assert_eq!(hw.core_or_sm_count, 4);
        assert_eq!(hw.cache_hierarchy[0].size_bytes, 32 * 1024);
        assert_eq!(hw.cache_hierarchy[2].size_bytes, 6144 * 1024);
        assert_eq!(hw.cache_hierarchy[2].instances, None);
    }

    #[test]
    fn rejects_zero_cores_and_garbage() {
        assert!(HardwareSpec::from_lscpu("CPU(s): 0\n").is_err());
        assert!(HardwareSpec::from_lscpu("L2 cache: lots\nCPU(s): 2\n").is_err());
        assert!(HardwareSpec::from_lscpu("nothing").is_err());
    }

    #[test]
    fn json_roundtrip_and_render() {
        let hw = HardwareSpec {
            backend: Backend::Gpu,
            core_or_sm_count: 108,
            cache_hierarchy: vec![CacheLevel {
                level: "L2".into(),
                size_bytes: 40 << 20,
                instances: None,
            }],
            memory_bandwidth_gbps: Some(1555.0),
            model_name: Some("A100".into()),
            notes: String::new(),
        };
        let back = HardwareSpec::from_json(&hw.to_json()).unwrap();
        assert_eq!(back, hw);
        let text = hw.render();
        assert!(text.contains("SMs: 108"));
        assert!(text.contains("memory bandwidth: 1555 GB/s"));
    }
}
