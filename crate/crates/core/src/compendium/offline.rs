use serde_json::{json, Value};

use crate::llm::{ChatRequest, FnProvider, ProviderError};

/// Deterministic stand-in for the summarizing LLM.
///
/// Answers the compendium prompts by pure text extraction. It understands
/// documentation sections laid out as a heading naming the metric, a
/// description paragraph, a `Measurement:` paragraph and a `Bottlenecks:`
/// line of `;`-separated phrases, which is how the bundled snapshots are
/// written. Merge prompts are answered by joining distinct descriptions.
pub fn extractive_provider() -> FnProvider {
    FnProvider::new("extractive", |req: &ChatRequest| {
        let prompt = &req.user_prompt;
        if let Some(i) = prompt.find("\nENTRIES:\n") {
            return Ok(merge_reply(&prompt[i + "\nENTRIES:\n".len()..]));
        }
        let text = prompt
            .find("\nSEGMENT ")
            .and_then(|i| prompt[i + 1..].find('\n').map(|j| &prompt[i + 1 + j + 1..]))
            .ok_or_else(|| ProviderError::Fatal("prompt has no SEGMENT block".into()))?;
        // Drop any retry note appended after the segment.
        let text = text.split("\n\nYour previous reply was rejected").next().unwrap_or(text);
        Ok(json!({ "entries": extract_sections(text) }).to_string())
    })
}

fn extract_sections(text: &str) -> Vec<Value> {
    let mut out = Vec::new();
    let mut heading: Option<String> = None;
    let mut body: Vec<&str> = Vec::new();
    let mut flush = |heading: &Option<String>, body: &[&str]| {
        if let Some(h) = heading {
            if let Some(v) = section(h, body) {
                out.push(v);
            }
        }
    };
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('#') {
            flush(&heading, &body);
            heading = Some(t.trim_start_matches('#').trim().trim_matches('`').to_string());
            body.clear();
        } else {
            body.push(line);
        }
    }
    flush(&heading, &body);
    out
}

fn section(name: &str, body: &[&str]) -> Option<Value> {
    let joined = body.join("\n");
    let paragraphs: Vec<String> = joined
        .split("\n\n")
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect();
    let bottlenecks = paragraphs.iter().find_map(|p| p.strip_prefix("Bottlenecks:"))?;
    let mechanism = paragraphs
        .iter()
        .find_map(|p| p.strip_prefix("Measurement:"))
        .unwrap_or("")
        .trim();
    let description = paragraphs
        .iter()
        .find(|p| !p.starts_with("Measurement:") && !p.starts_with("Bottlenecks:"))?;
    let bottlenecks: Vec<&str> = bottlenecks.split(';').map(str::trim).filter(|b| !b.is_empty()).collect();
    Some(json!({
        "metric": name,
        "description": description,
        "mechanism": mechanism,
        "bottlenecks": bottlenecks,
    }))
}

fn merge_reply(listing: &str) -> String {
    let entries: Vec<Value> = serde_json::from_str(listing.trim()).unwrap_or_default();
    let mut descriptions: Vec<&str> = Vec::new();
    for e in &entries {
        if let Some(d) = e["description"].as_str() {
            if !descriptions.contains(&d) {
                descriptions.push(d);
            }
        }
    }
    let mechanism = entries
        .iter()
        .filter_map(|e| e["mechanism"].as_str())
        .find(|m| !m.is_empty())
        .unwrap_or("");
    json!({
        "description": descriptions.join(" "),
        "mechanism": mechanism,
        "conflict": false,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LlmProvider, PromptTag};

    #[test]
    fn extracts_structured_sections() {
        let prompt = "intro\nSEGMENT seg-1:\n# Title\nno metric here\n\n## cycles\n\nCore cycles.\n\nMeasurement: fixed counter.\n\nBottlenecks: stalls; throttling\n";
        let resp = extractive_provider()
            .send(&ChatRequest::new(PromptTag::Compendium, "s", prompt))
            .unwrap();
        let v: Value = serde_json::from_str(&resp.text).unwrap();
        let entries = v["entries"].as_array().unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0]["metric"], "cycles");
        assert_eq!(entries[0]["mechanism"], "fixed counter.");
        assert_eq!(entries[0]["bottlenecks"], json!(["stalls", "throttling"]));
    }

    #[test]
    fn merges_descriptions() {
        let prompt = "merge\n\nENTRIES:\n[{\"description\":\"a\",\"mechanism\":\"\"},{\"description\":\"b\",\"mechanism\":\"m\"}]";
        let resp = extractive_provider()
            .send(&ChatRequest::new(PromptTag::Compendium, "s", prompt))
            .unwrap();
        let v: Value = serde_json::from_str(&resp.text).unwrap();
        assert_eq!(v["description"], "a b");
        assert_eq!(v["mechanism"], "m");
    }
}
