use super::MetricKnowledgeEntry;

/// Ranks compendium entries against a free-text query. Scores of zero or
/// below mean "not relevant".
pub trait RelevanceScorer: Send + Sync {
    fn score(&self, entry: &MetricKnowledgeEntry, query: &str) -> f64;
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Damped term frequency with field boosts: metric name, then
/// bottlenecks, then description and mechanism. A query that spells the
/// metric's short name exactly gets an extra bonus.
#[derive(Debug, Clone, Copy)]
pub struct LexicalScorer {
    pub name_weight: f64,
    pub bottleneck_weight: f64,
    pub description_weight: f64,
    pub exact_name_bonus: f64,
}

impl Default for LexicalScorer {
    fn default() -> Self {
        LexicalScorer {
            name_weight: 5.0,
            bottleneck_weight: 2.0,
            description_weight: 1.0,
            exact_name_bonus: 10.0,
        }
    }
}

fn field_score(field: &[String], terms: &[String]) -> f64 {
    terms
        .iter()
        .map(|t| {
            let tf = field.iter().filter(|w| *w == t).count();
            if tf == 0 {
                0.0
            } else {
                1.0 + (tf as f64).ln()
            }
        })
        .sum()
}

impl RelevanceScorer for LexicalScorer {
    fn score(&self, entry: &MetricKnowledgeEntry, query: &str) -> f64 {
        let terms = tokenize(query);
        if terms.is_empty() {
            return 0.0;
        }
        let name = tokenize(&entry.metric);
        let bottlenecks = tokenize(&entry.bottlenecks.join(" "));
        let description = tokenize(&format!("{} {}", entry.description, entry.mechanism));
        let mut score = self.name_weight * field_score(&name, &terms)
            + self.bottleneck_weight * field_score(&bottlenecks, &terms)
            + self.description_weight * field_score(&description, &terms);
        let short = entry.metric.rsplit('.').next().unwrap_or(&entry.metric);
        if score > 0.0 && (tokenize(short) == terms || tokenize(&entry.metric) == terms) {
            score += self.exact_name_bonus;
        }
        score
    }
}
