use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ChatMessage;

/// Marker line in a template file separating the body from each demonstration.
pub const DEMO_SEPARATOR: &str = "=== demonstration ===";
/// Token in a body replaced by the demonstrations.
pub const EXAMPLES_MARKER: &str = "<examples>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    DisclosureSelection,
    ProbabilityOrdering,
    ConditionalDependencies,
    PopulationQuery,
    ProbabilityQuery,
    QueryEstimation,
    GeneralizationSubquery,
    DiscreteSubquery,
    EvaluateAnswer,
    SimplifyQuery,
    BaselineFewShot,
    BaselineCot,
    BaselinePot,
}

impl TemplateId {
    pub const ALL: [TemplateId; 13] = [
        TemplateId::DisclosureSelection,
        TemplateId::ProbabilityOrdering,
        TemplateId::ConditionalDependencies,
        TemplateId::PopulationQuery,
        TemplateId::ProbabilityQuery,
        TemplateId::QueryEstimation,
        TemplateId::GeneralizationSubquery,
        TemplateId::DiscreteSubquery,
        TemplateId::EvaluateAnswer,
        TemplateId::SimplifyQuery,
        TemplateId::BaselineFewShot,
        TemplateId::BaselineCot,
        TemplateId::BaselinePot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::DisclosureSelection => "disclosure_selection",
            TemplateId::ProbabilityOrdering => "probability_ordering",
            TemplateId::ConditionalDependencies => "conditional_dependencies",
            TemplateId::PopulationQuery => "population_query",
            TemplateId::ProbabilityQuery => "probability_query",
            TemplateId::QueryEstimation => "query_estimation",
            TemplateId::GeneralizationSubquery => "generalization_subquery",
            TemplateId::DiscreteSubquery => "discrete_subquery",
            TemplateId::EvaluateAnswer => "evaluate_answer",
            TemplateId::SimplifyQuery => "simplify_query",
            TemplateId::BaselineFewShot => "baseline_few_shot",
            TemplateId::BaselineCot => "baseline_cot",
            TemplateId::BaselinePot => "baseline_pot",
        }
    }

    /// Placeholders the pipeline binds when rendering this template.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::DisclosureSelection | TemplateId::ProbabilityOrdering => {
                &["reddit_post", "self_disclosure_list", "subreddit"]
            }
            TemplateId::ConditionalDependencies => &["reddit_post", "prior_disclosure_list", "self_disclosure_span"],
            TemplateId::PopulationQuery => &["self_disclosure_list", "subreddit"],
            TemplateId::ProbabilityQuery => &[
                "prior_disclosure_list",
                "self_disclosure_span",
                "span_category",
                "subreddit",
                "query_history",
            ],
            TemplateId::QueryEstimation => &["search_query"],
            TemplateId::GeneralizationSubquery | TemplateId::DiscreteSubquery | TemplateId::SimplifyQuery => &["query"],
            TemplateId::EvaluateAnswer => &["query", "answer"],
            TemplateId::BaselineFewShot | TemplateId::BaselineCot | TemplateId::BaselinePot => {
                &["reddit_post", "self_disclosure_list", "subreddit", "default_population"]
            }
        }
    }

    fn builtin_source(self) -> &'static str {
        match self {
            TemplateId::DisclosureSelection => include_str!("../../templates/disclosure_selection.txt"),
            TemplateId::ProbabilityOrdering => include_str!("../../templates/probability_ordering.txt"),
            TemplateId::ConditionalDependencies => include_str!("../../templates/conditional_dependencies.txt"),
            TemplateId::PopulationQuery => include_str!("../../templates/population_query.txt"),
            TemplateId::ProbabilityQuery => include_str!("../../templates/probability_query.txt"),
            TemplateId::QueryEstimation => include_str!("../../templates/query_estimation.txt"),
            TemplateId::GeneralizationSubquery => include_str!("../../templates/generalization_subquery.txt"),
            TemplateId::DiscreteSubquery => include_str!("../../templates/discrete_subquery.txt"),
            TemplateId::EvaluateAnswer => include_str!("../../templates/evaluate_answer.txt"),
            TemplateId::SimplifyQuery => include_str!("../../templates/simplify_query.txt"),
            TemplateId::BaselineFewShot => include_str!("../../templates/baseline_few_shot.txt"),
            TemplateId::BaselineCot => include_str!("../../templates/baseline_cot.txt"),
            TemplateId::BaselinePot => include_str!("../../templates/baseline_pot.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbound placeholder `{{{0}}}`")]
    Unbound(String),
    #[error("template `{template}` lacks placeholder `{{{placeholder}}}`")]
    MissingPlaceholder { template: TemplateId, placeholder: String },
    #[error("unknown template id `{0}`")]
    UnknownTemplate(String),
    #[error("cannot read template `{template}`: {message}")]
    Io { template: TemplateId, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    pub demonstrations: Vec<String>,
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

/// Splits `text` into literal runs and `{identifier}` placeholders.
fn scan(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                out.push(Piece::Text(&rest[..open]));
                out.push(Piece::Slot(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push(Piece::Text(&rest[..open + 1]));
                rest = after;
            }
        }
    }
    out.push(Piece::Text(rest));
    out
}

impl PromptTemplate {
    /// Parses the on-disk format: a body, then demonstrations each introduced
    /// by a [`DEMO_SEPARATOR`] line.
    pub fn parse(id: TemplateId, source: &str) -> Self {
        let mut parts = Vec::new();
        let mut current = String::new();
        for line in source.lines() {
            if line.trim() == DEMO_SEPARATOR {
                parts.push(std::mem::take(&mut current));
            } else {
                current.push_str(line);
                current.push('\n');
            }
        }
        parts.push(current);
        let mut parts = parts.into_iter().map(|p| p.trim().to_string());
        let body = parts.next().unwrap_or_default();
        PromptTemplate {
            id,
            body,
            demonstrations: parts.filter(|d| !d.is_empty()).collect(),
        }
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        scan(&self.body)
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name),
                Piece::Text(_) => None,
            })
            .collect()
    }

    pub fn check_placeholders(&self) -> Result<(), TemplateError> {
        let present = self.placeholders();
        for p in self.id.required_placeholders() {
            if !present.contains(p) {
                return Err(TemplateError::MissingPlaceholder {
                    template: self.id,
                    placeholder: p.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Renders `template` into chat messages.
///
/// Substitution is a single literal pass over the body, so bound values
/// containing braces are never re-expanded. The `<examples>` line receives the
/// first `demonstrations` entries and disappears entirely when that is zero.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &[(&str, &str)],
    demonstrations: usize,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let lookup: HashMap<&str, &str> = bindings.iter().copied().collect();
    let mut out = String::with_capacity(template.body.len() * 2);
    for piece in scan(&template.body) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => out.push_str(lookup.get(name).ok_or_else(|| TemplateError::Unbound(name.into()))?),
        }
    }
    let examples: Vec<&str> = template
        .demonstrations
        .iter()
        .take(demonstrations)
        .map(String::as_str)
        .collect();
    let content = if examples.is_empty() {
        out.lines()
            .filter(|l| l.trim() != EXAMPLES_MARKER)
            .collect::<Vec<_>>()
            .join("\n")
    } else {
        let block = format!("Examples:\n\n{}", examples.join("\n\n"));
        out.lines()
            .map(|l| if l.trim() == EXAMPLES_MARKER { block.as_str() } else { l })
            .collect::<Vec<_>>()
            .join("\n")
    };
    Ok(vec![ChatMessage::user(content)])
}

/// The full set of prompt templates used by a run.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: HashMap<TemplateId, PromptTemplate>,
}

impl PromptLibrary {
    /// Templates compiled into the crate from `templates/*.txt`.
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| (id, PromptTemplate::parse(id, id.builtin_source())))
            .collect();
        PromptLibrary { templates }
    }

    /// Loads `<id>.txt` from `dir` for each template, using the builtin copy
    /// for any file that is absent.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let mut lib = PromptLibrary::builtin();
        for id in TemplateId::ALL {
            let path = dir.as_ref().join(format!("{id}.txt"));
            if !path.exists() {
                continue;
            }
            let source = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                template: id,
                message: e.to_string(),
            })?;
            let t = PromptTemplate::parse(id, &source);
            t.check_placeholders()?;
            lib.templates.insert(id, t);
        }
        Ok(lib)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }
}

impl Default for PromptLibrary {
    fn default() -> Self {
        PromptLibrary::builtin()
    }
}
