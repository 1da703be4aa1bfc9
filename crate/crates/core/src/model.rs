//! Domain types shared by every stage of the estimator.
//!
//! A [`DocumentContext`] holds a document and its labelled disclosures. The
//! pipeline elicits a [`BayesNetwork`] over a subset of those disclosures,
//! turns each factor into a [`QueryNode`], answers it with an [`Answer`], and
//! recombines everything into an [`EstimateResult`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Identifier of a disclosure, unique within one document.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DisclosureId(pub String);

impl DisclosureId {
    pub fn new(id: impl Into<String>) -> Self {
        DisclosureId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DisclosureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DisclosureId {
    fn from(s: &str) -> Self {
        DisclosureId(s.to_string())
    }
}

/// The closed set of personal disclosure categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DisclosureCategory {
    Location,
    Age,
    RelationshipStatus,
    Gender,
    Pet,
    Appearance,
    RaceNationality,
    SexualOrientation,
    Health,
    Family,
    Occupation,
    MentalHealth,
    Emotions,
    ReproductiveHealth,
    Finance,
    Education,
    Crime,
    Events,
    OtherPeople,
    Pii,
}

impl DisclosureCategory {
    pub const ALL: [DisclosureCategory; 20] = [
        DisclosureCategory::Location,
        DisclosureCategory::Age,
        DisclosureCategory::RelationshipStatus,
        DisclosureCategory::Gender,
        DisclosureCategory::Pet,
        DisclosureCategory::Appearance,
        DisclosureCategory::RaceNationality,
        DisclosureCategory::SexualOrientation,
        DisclosureCategory::Health,
        DisclosureCategory::Family,
        DisclosureCategory::Occupation,
        DisclosureCategory::MentalHealth,
        DisclosureCategory::Emotions,
        DisclosureCategory::ReproductiveHealth,
        DisclosureCategory::Finance,
        DisclosureCategory::Education,
        DisclosureCategory::Crime,
        DisclosureCategory::Events,
        DisclosureCategory::OtherPeople,
        DisclosureCategory::Pii,
    ];

    /// Canonical label used in the interchange format and in prompts.
    pub fn label(self) -> &'static str {
        match self {
            DisclosureCategory::Location => "location",
            DisclosureCategory::Age => "age",
            DisclosureCategory::RelationshipStatus => "relationship status",
            DisclosureCategory::Gender => "gender",
            DisclosureCategory::Pet => "pet",
            DisclosureCategory::Appearance => "appearance",
            DisclosureCategory::RaceNationality => "race/nationality",
            DisclosureCategory::SexualOrientation => "sexual orientation",
            DisclosureCategory::Health => "health",
            DisclosureCategory::Family => "family",
            DisclosureCategory::Occupation => "occupation",
            DisclosureCategory::MentalHealth => "mental health",
            DisclosureCategory::Emotions => "emotions",
            DisclosureCategory::ReproductiveHealth => "reproductive health",
            DisclosureCategory::Finance => "finance",
            DisclosureCategory::Education => "education",
            DisclosureCategory::Crime => "crime",
            DisclosureCategory::Events => "events",
            DisclosureCategory::OtherPeople => "disclosure of other people",
            DisclosureCategory::Pii => "pii",
        }
    }
}

impl fmt::Display for DisclosureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DisclosureCategory {
    type Err = CoreError;

    /// Case-insensitive; `_` and `-` are read as spaces.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| match c {
                '_' | '-' => ' ',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        let alias = match norm.as_str() {
            "race" | "nationality" | "race nationality" => Some(DisclosureCategory::RaceNationality),
            "personally identifiable information" => Some(DisclosureCategory::Pii),
            "other people" => Some(DisclosureCategory::OtherPeople),
            "relationship" => Some(DisclosureCategory::RelationshipStatus),
            _ => None,
        };
        alias
            .or_else(|| DisclosureCategory::ALL.into_iter().find(|c| c.label() == norm))
            .ok_or_else(|| CoreError::UnknownCategory(s.to_string()))
    }
}

impl Serialize for DisclosureCategory {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for DisclosureCategory {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One attribute=value pair. Query semantics are conjunctions of these.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub attribute: String,
    pub value: String,
}

impl Fact {
    pub fn new(attribute: impl Into<String>, value: impl Into<String>) -> Self {
        Fact {
            attribute: attribute.into(),
            value: value.into(),
        }
    }
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.attribute, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disclosure {
    pub id: DisclosureId,
    pub span: String,
    pub category: DisclosureCategory,
    /// Structured attribute name. When absent the category label is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

impl Disclosure {
    pub fn new(id: impl Into<String>, span: impl Into<String>, category: DisclosureCategory) -> Self {
        Disclosure {
            id: DisclosureId::new(id),
            span: span.into(),
            category,
            attribute: None,
        }
    }

    pub fn with_attribute(mut self, attribute: impl Into<String>) -> Self {
        self.attribute = Some(attribute.into());
        self
    }

    /// The attribute=value pair this disclosure asserts about its author.
    pub fn fact(&self) -> Fact {
        let attribute = self
            .attribute
            .clone()
            .unwrap_or_else(|| self.category.label().to_string());
        Fact {
            attribute,
            value: self.span.clone(),
        }
    }
}

#[derive(Deserialize)]
struct RawContext {
    document_id: String,
    text: String,
    #[serde(default)]
    community: Option<String>,
    disclosures: Vec<Disclosure>,
}

/// A document together with its labelled disclosure spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawContext")]
pub struct DocumentContext {
    pub document_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub community: Option<String>,
    pub disclosures: Vec<Disclosure>,
}

impl TryFrom<RawContext> for DocumentContext {
    type Error = CoreError;

    fn try_from(raw: RawContext) -> Result<Self, Self::Error> {
        DocumentContext::new(raw.document_id, raw.text, raw.community, raw.disclosures)
    }
}

impl DocumentContext {
    pub fn new(
        document_id: impl Into<String>,
        text: impl Into<String>,
        community: Option<String>,
        disclosures: Vec<Disclosure>,
    ) -> Result<Self, CoreError> {
        let ctx = DocumentContext {
            document_id: document_id.into(),
            text: text.into(),
            community,
            disclosures,
        };
        if let Some(problem) = ctx.problems().into_iter().next() {
            return Err(CoreError::InvalidContext(problem));
        }
        Ok(ctx)
    }

    /// Every violated context invariant, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.text.trim().is_empty() {
            out.push("document text is empty".to_string());
        }
        let mut seen = BTreeSet::new();
        for d in &self.disclosures {
            if !seen.insert(&d.id) {
                out.push(format!("duplicate disclosure id `{}`", d.id));
            }
            if d.span.is_empty() {
                out.push(format!("disclosure `{}` has an empty span", d.id));
            } else if !self.text.contains(&d.span) && self.community.as_deref() != Some(d.span.as_str()) {
                out.push(format!("span of disclosure `{}` does not occur in the document", d.id));
            }
        }
        out
    }

    pub fn disclosure(&self, id: &DisclosureId) -> Option<&Disclosure> {
        self.disclosures.iter().find(|d| &d.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &DisclosureId> {
        self.disclosures.iter().map(|d| &d.id)
    }

    /// A copy holding only the listed disclosures, in document order.
    pub fn restricted_to(&self, keep: &BTreeSet<DisclosureId>) -> DocumentContext {
        DocumentContext {
            document_id: self.document_id.clone(),
            text: self.text.clone(),
            community: self.community.clone(),
            disclosures: self
                .disclosures
                .iter()
                .filter(|d| keep.contains(&d.id))
                .cloned()
                .collect(),
        }
    }
}

/// An ordering of disclosures with a parent set for each node.
///
/// Nodes missing from `parents` have no parents.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BayesNetwork {
    pub ordering: Vec<DisclosureId>,
    pub parents: BTreeMap<DisclosureId, BTreeSet<DisclosureId>>,
}

impl BayesNetwork {
    pub fn new(ordering: Vec<DisclosureId>, parents: BTreeMap<DisclosureId, BTreeSet<DisclosureId>>) -> Self {
        BayesNetwork { ordering, parents }
    }

    /// Every node conditioned on all earlier nodes.
    pub fn fully_connected(ordering: Vec<DisclosureId>) -> Self {
        let parents = ordering
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), ordering[..i].iter().cloned().collect()))
            .collect();
        BayesNetwork { ordering, parents }
    }

    /// Every node independent of every other.
    pub fn fully_disjoint(ordering: Vec<DisclosureId>) -> Self {
        let parents = ordering.iter().map(|id| (id.clone(), BTreeSet::new())).collect();
        BayesNetwork { ordering, parents }
    }

    pub fn parents_of(&self, id: &DisclosureId) -> BTreeSet<DisclosureId> {
        self.parents.get(id).cloned().unwrap_or_default()
    }

    pub fn position(&self, id: &DisclosureId) -> Option<usize> {
        self.ordering.iter().position(|x| x == id)
    }

    /// Directed edges `(parent, child)`.
    pub fn edges(&self) -> BTreeSet<(DisclosureId, DisclosureId)> {
        self.parents
            .iter()
            .flat_map(|(child, ps)| ps.iter().map(move |p| (p.clone(), child.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum NetworkViolation {
    UnknownDisclosure { id: DisclosureId },
    DuplicateInOrdering { id: DisclosureId },
    ParentNotPrior { child: DisclosureId, parent: DisclosureId },
    ParentsForUnorderedNode { id: DisclosureId },
}

impl fmt::Display for NetworkViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetworkViolation::UnknownDisclosure { id } => write!(f, "unknown disclosure `{id}`"),
            NetworkViolation::DuplicateInOrdering { id } => {
                write!(f, "disclosure `{id}` appears twice in the ordering")
            }
            NetworkViolation::ParentNotPrior { child, parent } => {
                write!(f, "parent not prior: `{parent}` is not ordered before `{child}`")
            }
            NetworkViolation::ParentsForUnorderedNode { id } => {
                write!(f, "parent set given for `{id}`, which is not in the ordering")
            }
        }
    }
}

/// Checks every network invariant against the document's disclosure ids.
/// An empty report means the network is valid.
pub fn validate_network(network: &BayesNetwork, ctx: &DocumentContext) -> Vec<NetworkViolation> {
    let known: BTreeSet<&DisclosureId> = ctx.ids().collect();
    validate_network_ids(network, &known)
}

pub(crate) fn validate_network_ids(network: &BayesNetwork, known: &BTreeSet<&DisclosureId>) -> Vec<NetworkViolation> {
    let mut report = Vec::new();
    let mut position = BTreeMap::new();
    for (i, id) in network.ordering.iter().enumerate() {
        if !known.contains(id) {
            report.push(NetworkViolation::UnknownDisclosure { id: id.clone() });
        }
        if position.insert(id, i).is_some() {
            report.push(NetworkViolation::DuplicateInOrdering { id: id.clone() });
        }
    }
    for (child, ps) in &network.parents {
        let Some(&child_pos) = position.get(child) else {
            if !ps.is_empty() {
                report.push(NetworkViolation::ParentsForUnorderedNode { id: child.clone() });
            }
            continue;
        };
        for p in ps {
            match position.get(p) {
                Some(&pp) if pp < child_pos => {}
                _ => report.push(NetworkViolation::ParentNotPrior {
                    child: child.clone(),
                    parent: p.clone(),
                }),
            }
        }
    }
    report
}

/// Rounds half away from zero and clamps to at least one person.
pub fn normalize_k(raw: f64) -> Result<u64, CoreError> {
    if !raw.is_finite() || raw < 0.0 {
        return Err(CoreError::InvalidK(raw));
    }
    if raw >= u64::MAX as f64 {
        return Err(CoreError::InvalidK(raw));
    }
    Ok((raw.round() as u64).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Percentage,
    Population,
}

impl QueryKind {
    /// Whether `value` is admissible for an answer of this kind.
    pub fn admits(self, value: f64) -> bool {
        match self {
            QueryKind::Percentage => value > 0.0 && value <= 1.0,
            QueryKind::Population => value >= 1.0 && value.is_finite(),
        }
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryKind::Percentage => "percentage",
            QueryKind::Population => "population",
        })
    }
}

/// Structured meaning of a query, used by the synthetic oracle.
///
/// A population query counts people matching `target` and `conditions`; a
/// percentage query asks what share of people matching `conditions` also
/// match `target`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuerySemantics {
    pub target: Vec<Fact>,
    #[serde(default)]
    pub conditions: Vec<Fact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryNode {
    pub target: DisclosureId,
    pub kind: QueryKind,
    pub text: String,
    #[serde(default)]
    pub semantics: QuerySemantics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subqueries: Vec<QueryNode>,
    /// Combine expression over slots `s1..sn`, one per subquery.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combine: Option<String>,
}

impl QueryNode {
    pub fn leaf(target: DisclosureId, kind: QueryKind, text: impl Into<String>, semantics: QuerySemantics) -> Self {
        QueryNode {
            target,
            kind,
            text: text.into(),
            semantics,
            subqueries: Vec::new(),
            combine: None,
        }
    }

    pub fn is_decomposed(&self) -> bool {
        !self.subqueries.is_empty()
    }

    /// Slot name bound to the `i`-th subquery (zero-based).
    pub fn slot_name(i: usize) -> String {
        format!("s{}", i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub value: f64,
    pub kind: QueryKind,
    pub confidence: f64,
    pub provenance: String,
    #[serde(default)]
    pub simplified: bool,
}

impl Answer {
    pub fn new(value: f64, kind: QueryKind, confidence: f64, provenance: impl Into<String>) -> Result<Self, CoreError> {
        if !kind.admits(value) {
            return Err(CoreError::AnswerOutOfBounds { value, kind });
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(CoreError::InvalidConfidence(confidence));
        }
        Ok(Answer {
            value,
            kind,
            confidence,
            provenance: provenance.into(),
            simplified: false,
        })
    }
}

/// Answers for one top-level query: a single leaf, or one per subquery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryAnswer {
    Leaf(Answer),
    Parts(Vec<Answer>),
}

impl QueryAnswer {
    pub fn leaves(&self) -> &[Answer] {
        match self {
            QueryAnswer::Leaf(a) => std::slice::from_ref(a),
            QueryAnswer::Parts(parts) => parts,
        }
    }
}

/// One completed backend exchange within a stage, retries included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTranscript {
    pub stage: String,
    pub prompt_digest: String,
    pub raw_completion: String,
    pub parsed: serde_json::Value,
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub completion: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub k_hat: u64,
    pub raw_k: f64,
    pub equation: String,
    pub queries: Vec<QueryNode>,
    pub answers: Vec<QueryAnswer>,
    pub network: BayesNetwork,
    pub transcript: Vec<StageTranscript>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Branch,
    FewShot,
    Cot,
    Pot,
}

impl FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "branch" => Ok(Strategy::Branch),
            "few-shot" | "fewshot" => Ok(Strategy::FewShot),
            "cot" => Ok(Strategy::Cot),
            "pot" => Ok(Strategy::Pot),
            _ => Err(CoreError::InvalidConfig(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Simplification {
    None,
    Evaluator,
    ConfidenceThreshold { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkMode {
    Elicited,
    FullyDisjoint,
    FullyConnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub model: String,
    pub temperature: f64,
    pub demonstrations: usize,
    pub simplification: Simplification,
    pub max_simplify_iterations: u32,
    pub query_history: bool,
    pub discrete_subqueries: bool,
    pub network_mode: NetworkMode,
    pub default_population: f64,
    pub retry_limit: u32,
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategy: Strategy::Branch,
            model: "gpt-4o".to_string(),
            temperature: 0.7,
            demonstrations: 3,
            simplification: Simplification::ConfidenceThreshold { threshold: 0.55 },
            max_simplify_iterations: 1,
            query_history: false,
            discrete_subqueries: true,
            network_mode: NetworkMode::Elicited,
            default_population: 5.0e8,
            retry_limit: 3,
            concurrency: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if let Simplification::ConfidenceThreshold { threshold } = self.simplification {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CoreError::InvalidConfig(format!(
                    "confidence threshold {threshold} outside [0, 1]"
                )));
            }
        }
        if self.retry_limit < 1 {
            return Err(CoreError::InvalidConfig("retry_limit must be at least 1".into()));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(CoreError::InvalidConfig("temperature must be non-negative".into()));
        }
        if self.default_population.is_nan() || self.default_population < 1.0 {
            return Err(CoreError::InvalidConfig("default population must be at least 1".into()));
        }
        Ok(())
    }
}
