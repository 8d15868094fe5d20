use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::fsutil::sha256_hex;
use crate::metrics::Backend;

pub const DEFAULT_SEGMENT_BUDGET: usize = 4000;

/// One entry of a `sources.txt`: `[tool=]path-or-url`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub tool: String,
    pub location: String,
}

impl SourceRef {
    pub fn new(tool: impl Into<String>, location: impl Into<String>) -> Self {
        SourceRef {
            tool: tool.into(),
            location: location.into(),
        }
    }

    /// Backend whose metrics this tool documents, if any.
    pub fn backend(&self) -> Option<Backend> {
        tool_backend(&self.tool)
    }

    fn is_url(&self) -> bool {
        self.location.starts_with("http://") || self.location.starts_with("https://")
    }
}

pub(crate) fn tool_backend(tool: &str) -> Option<Backend> {
    match tool {
        "perf" => Some(Backend::Cpu),
        "ncu" | "nsight-compute" => Some(Backend::Gpu),
        _ => None,
    }
}

fn infer_tool(location: &str) -> &'static str {
    let l = location.to_ascii_lowercase();
    if l.contains("ncu") || l.contains("nsight") {
        "ncu"
    } else if l.contains("perf") {
        "perf"
    } else {
        "generic"
    }
}

/// Parses `sources.txt`: one source per line, `#` starts a comment.
pub fn parse_sources(text: &str) -> Vec<SourceRef> {
    text.lines()
        .map(|l| l.split_once('#').map_or(l, |(a, _)| a).trim())
        .filter(|l| !l.is_empty())
        .map(|l| match l.split_once('=') {
            Some((tool, loc)) if !tool.contains('/') && !tool.contains(':') => {
                SourceRef::new(tool.trim(), loc.trim())
            }
            _ => SourceRef::new(infer_tool(l), l),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSegment {
    /// Source location as listed in `sources.txt`.
    pub source: String,
    pub tool: String,
    /// Byte offset of `text` within the extracted document text.
    pub offset: usize,
    pub text: String,
    pub segment_id: String,
}

impl DocSegment {
    pub fn new(source: &str, tool: &str, offset: usize, text: &str) -> Self {
        let id = sha256_hex(&[source.as_bytes(), &(offset as u64).to_le_bytes()]);
        DocSegment {
            source: source.to_string(),
            tool: tool.to_string(),
            offset,
            text: text.to_string(),
            segment_id: format!("seg-{}", &id[..16]),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub segments: Vec<DocSegment>,
    /// Per-source problems (unreadable, empty); ingestion continues past them.
    pub warnings: Vec<String>,
}

fn decode_entity(entity: &str) -> Option<char> {
    Some(match entity {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" | "#39" => '\'',
        "nbsp" => ' ',
        _ => {
            let num = entity.strip_prefix('#')?;
            let code = match num.strip_prefix(['x', 'X']) {
                Some(hex) => u32::from_str_radix(hex, 16).ok()?,
                None => num.parse().ok()?,
            };
            char::from_u32(code)?
        }
    })
}

/// Reduces HTML to text. Headings become `#` lines so chunking can find
/// them; block elements become line breaks; `script`/`style` bodies drop.
pub fn strip_html(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let mut rest = html;
    let mut skip_until: Option<&str> = None;
    while !rest.is_empty() {
        if let Some(end_tag) = skip_until {
            match rest.to_ascii_lowercase().find(end_tag) {
                Some(i) => {
                    rest = &rest[i..];
                    skip_until = None;
                }
                None => break,
            }
            continue;
        }
        let c = rest.chars().next().unwrap();
        if c == '<' {
            let Some(close) = rest.find('>') else {
                out.push_str(rest);
                break;
            };
            let tag = rest[1..close].trim().to_ascii_lowercase();
            let name: String = tag
                .trim_start_matches('/')
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric())
                .collect();
            let closing = tag.starts_with('/');
            match name.as_str() {
                "script" | "style" if !closing => skip_until = Some(if name == "script" { "</script" } else { "</style" }),
                "h1" | "h2" | "h3" | "h4" | "h5" | "h6" => {
                    if closing {
                        out.push('\n');
                    } else {
                        let level = name[1..].parse::<usize>().unwrap_or(1);
                        if !out.is_empty() && !out.ends_with("\n\n") {
                            out.push_str(if out.ends_with('\n') { "\n" } else { "\n\n" });
                        }
                        out.push_str(&"#".repeat(level));
                        out.push(' ');
                    }
                }
                "p" | "div" | "section" | "table" | "ul" | "ol" | "pre" => {
                    if !out.ends_with("\n\n") && !out.is_empty() {
                        out.push_str(if out.ends_with('\n') { "\n" } else { "\n\n" });
                    }
                }
                "br" | "tr" | "li" | "dt" | "dd" => {
                    if !out.ends_with('\n') && !out.is_empty() {
                        out.push('\n');
                    }
                    if name == "li" && !closing {
                        out.push_str("- ");
                    }
                }
                "td" | "th" if closing => out.push_str(" | "),
                _ => {}
            }
            rest = &rest[close + 1..];
        } else if c == '&' {
            let end = rest[1..].find(';').map(|i| i + 1);
            match end.filter(|&e| e <= 10).and_then(|e| decode_entity(&rest[1..e]).map(|ch| (e, ch))) {
                Some((e, ch)) => {
                    out.push(ch);
                    rest = &rest[e + 1..];
                }
                None => {
                    out.push('&');
                    rest = &rest[1..];
                }
            }
        } else {
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    // Collapse runs of blank lines left by nested block tags.
    let mut cleaned = String::with_capacity(out.len());
    let mut blank_run = 0;
    for line in out.lines() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
            cleaned.push('\n');
        } else {
            blank_run = 0;
            cleaned.push_str(line.trim_start());
            cleaned.push('\n');
        }
    }
    cleaned.trim_matches('\n').to_string() + "\n"
}

fn floor_boundary(text: &str, mut i: usize) -> usize {
    while !text.is_char_boundary(i) {
        i -= 1;
    }
    i
}

/// Splits `text` into consecutive pieces of at most `budget` bytes whose
/// concatenation is `text`. Cuts prefer, in order: the start of a heading
/// line, a paragraph break, a line break, and finally any char boundary.
pub fn chunk(text: &str, budget: usize) -> Vec<(usize, &str)> {
    let budget = budget.max(4);
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        if text.len() - pos <= budget {
            out.push((pos, &text[pos..]));
            break;
        }
        let limit = floor_boundary(text, pos + budget);
        let window = &text[pos..limit];
        let heading = window
            .match_indices("\n#")
            .map(|(i, _)| i + 1)
            .filter(|&i| i > 0)
            .last();
        let cut = heading
            .or_else(|| window.rfind("\n\n").map(|i| i + 2))
            .or_else(|| window.rfind('\n').map(|i| i + 1))
            .filter(|&c| c > 0)
            .unwrap_or_else(|| {
                let c = window.len();
                if c == 0 {
                    // Budget smaller than one character.
                    text[pos..].chars().next().map_or(1, char::len_utf8)
                } else {
                    c
                }
            });
        out.push((pos, &text[pos..pos + cut]));
        pos += cut;
    }
    out
}

fn fetch(source: &SourceRef, base_dir: &Path) -> Result<String, String> {
    if source.is_url() {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        let mut resp = agent.get(&source.location).call().map_err(|e| e.to_string())?;
        return resp.body_mut().read_to_string().map_err(|e| e.to_string());
    }
    let path = base_dir.join(&source.location);
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn looks_like_html(location: &str, text: &str) -> bool {
    let l = location.to_ascii_lowercase();
    l.ends_with(".html") || l.ends_with(".htm") || text.trim_start().starts_with('<')
}

/// Reads every source (relative paths against `base_dir`) and splits it into
/// segments. Source failures become warnings.
pub fn ingest(sources: &[SourceRef], base_dir: &Path, budget: usize) -> Ingested {
    let mut result = Ingested::default();
    for source in sources {
        let raw = match fetch(source, base_dir) {
            Ok(t) => t,
            Err(e) => {
                result.warnings.push(format!("{}: unreachable: {e}", source.location));
                continue;
            }
        };
        let text = if looks_like_html(&source.location, &raw) {
            strip_html(&raw)
        } else {
            raw
        };
        if text.trim().is_empty() {
            result.warnings.push(format!("{}: empty document", source.location));
            continue;
        }
        for (offset, piece) in chunk(&text, budget) {
            result
                .segments
                .push(DocSegment::new(&source.location, &source.tool, offset, piece));
        }
    }
    result
}
