use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("response contains no code")]
    NoCodeFound,
}

struct Fence<'a> {
    lang: String,
    body: Vec<&'a str>,
}

fn canonical_lang(lang: &str) -> String {
    let l = lang.trim().to_ascii_lowercase();
    match l.as_str() {
        "c++" | "cxx" | "cc" | "hpp" | "h++" => "cpp".into(),
        "py" | "python3" => "python".into(),
        "cu" => "cuda".into(),
        "bash" | "shell" | "zsh" => "sh".into(),
        _ => l,
    }
}

fn fence_marker(line: &str) -> Option<(&'static str, &str)> {
    let t = line.trim_start();
    for m in ["```", "~~~"] {
        if let Some(rest) = t.strip_prefix(m) {
            return Some((m, rest));
        }
    }
    None
}

fn fences(text: &str) -> Vec<Fence<'_>> {
    let mut out = Vec::new();
    let mut open: Option<(&str, Fence)> = None;
    for line in text.lines() {
        match open.take() {
            None => {
                if let Some((marker, info)) = fence_marker(line) {
                    let lang = info.split_whitespace().next().unwrap_or("");
                    let lang = lang.trim_start_matches('{').trim_start_matches('.');
                    open = Some((marker, Fence { lang: canonical_lang(lang), body: Vec::new() }));
                }
            }
            Some((marker, mut fence)) => {
                let t = line.trim();
                if t.starts_with(marker) && t.trim_start_matches(marker.chars().next().unwrap()).is_empty() {
                    out.push(fence);
                } else {
                    fence.body.push(line);
                    open = Some((marker, fence));
                }
            }
        }
    }
    // An unterminated final fence still counts (truncated responses).
    if let Some((_, fence)) = open {
        out.push(fence);
    }
    out
}

fn trim_blank_lines(lines: &[&str]) -> String {
    let start = lines.iter().position(|l| !l.trim().is_empty());
    let end = lines.iter().rposition(|l| !l.trim().is_empty());
    match (start, end) {
        (Some(s), Some(e)) => lines[s..=e]
            .iter()
            .map(|l| l.trim_end_matches('\r'))
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

/// Pulls kernel source out of a model response.
///
/// Picks the last fenced block tagged with `language_hint`, else the last
/// fenced block of any language, else the whole response. Leading and
/// trailing blank lines are dropped.
pub fn extract_code(text: &str, language_hint: &str) -> Result<String, ExtractError> {
    let blocks = fences(text);
    let want = canonical_lang(language_hint);
    let chosen = blocks
        .iter()
        .rev()
        .find(|f| !want.is_empty() && f.lang == want)
        .or_else(|| blocks.last());
    let code = match chosen {
        Some(f) => trim_blank_lines(&f.body),
        None => trim_blank_lines(&text.lines().collect::<Vec<_>>()),
    };
    if code.trim().is_empty() {
        Err(ExtractError::NoCodeFound)
    } else {
        Ok(code)
    }
}

/// Parses a JSON object out of a model reply: the fenced ```json block if
/// any, else the outermost `{...}` span.
pub fn parse_json_reply<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, String> {
    let mut last_err = String::from("no JSON object found");
    if let Ok(code) = extract_code(text, "json") {
        match serde_json::from_str(&code) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = e.to_string(),
        }
    }
    if let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) {
        if start < end {
            match serde_json::from_str(&text[start..=end]) {
                Ok(v) => return Ok(v),
                Err(e) => last_err = e.to_string(),
            }
        }
    }
    Err(last_err)
}
