use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, NoBindings};
use crate::metrics::EvalPair;
use crate::model::{
    normalize_k, BayesNetwork, Disclosure, DisclosureId, DocumentContext, EstimateResult, QueryAnswer, QueryKind,
    QueryNode,
};
use crate::uncertainty::{KInterval, RunEnsemble};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("{path}: cannot read file: {message}")]
    Io { path: String, message: String },
    #[error("document is empty")]
    Empty,
    #[error("line {line}, column {column}, at `{field}`: {message}")]
    Parse {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("post `{0}` appears in more than one split")]
    Overlap(String),
    #[error("unknown post `{0}` in split specification")]
    UnknownPost(String),
    #[error("invalid split specification: {0}")]
    InvalidSplit(String),
    #[error("no prediction for post `{0}`")]
    MissingPrediction(String),
    #[error("post `{0}` has no gold orderings")]
    NoGold(String),
    #[error("post `{post}`: {message}")]
    InvalidPost { post: String, message: String },
}

/// Source-reliability flag on a gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reliability {
    Reliable,
    Unreliable,
}

/// A gold or predicted query with its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub target: DisclosureId,
    pub kind: QueryKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subqueries: Vec<QueryRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combine: Option<String>,
    /// Optional on decomposed queries, where it follows from the parts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliability: Option<Reliability>,
    /// Annotator label such as feasible or infeasible; carried through as is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibility: Option<String>,
}

/// One annotator's network, queries, equation and k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedOrdering {
    pub order: Vec<DisclosureId>,
    pub parents: BTreeMap<DisclosureId, Vec<DisclosureId>>,
    pub queries: Vec<QueryRecord>,
    pub equation: String,
    pub k: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPost {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub disclosures: Vec<Disclosure>,
    pub orderings: Vec<AnnotatedOrdering>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub posts: Vec<AnnotatedPost>,
}

fn network_of(order: &[DisclosureId], parents: &BTreeMap<DisclosureId, Vec<DisclosureId>>) -> BayesNetwork {
    BayesNetwork::new(
        order.to_vec(),
        parents
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
            .collect(),
    )
}

impl AnnotatedOrdering {
    pub fn network(&self) -> BayesNetwork {
        network_of(&self.order, &self.parents)
    }
}

impl AnnotatedPost {
    /// The post as a pipeline input. The domain tag doubles as the community.
    pub fn context(&self) -> Result<DocumentContext, DatasetError> {
        DocumentContext::new(
            self.id.clone(),
            self.text.clone(),
            self.domain.clone(),
            self.disclosures.clone(),
        )
        .map_err(|e| DatasetError::InvalidPost {
            post: self.id.clone(),
            message: e.to_string(),
        })
    }
}

fn parse_err(e: serde_path_to_error::Error<serde_json::Error>) -> DatasetError {
    let field = e.path().to_string();
    let inner = e.into_inner();
    DatasetError::Parse {
        line: inner.line(),
        column: inner.column(),
        field,
        message: inner.to_string(),
    }
}

/// Parses an interchange document from JSON text.
pub fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, DatasetError> {
    if text.trim().is_empty() {
        return Err(DatasetError::Empty);
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(de).map_err(parse_err)?;
    Ok(value)
}

fn read(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    from_json_str(&read(path.as_ref())?)
}

pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(dataset).expect("dataset serializes");
    std::fs::write(path, text + "\n").map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// One validation finding, located by a JSON-style path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

struct Issues {
    out: Vec<Issue>,
}

impl Issues {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.out.push(Issue {
            path: path.into(),
            message: message.into(),
        });
    }
}

pub const K_TOLERANCE: f64 = 0.5;
/// Relative slack between the equation and the product of the stored answers.
pub const ANSWER_TOLERANCE: f64 = 0.01;

fn close_value(a: f64, b: f64) -> bool {
    (a - b).abs() <= ANSWER_TOLERANCE * a.abs().max(b.abs())
}

fn close_k(a: f64, b: f64) -> bool {
    close_value(a, b) || (a - b).abs() <= K_TOLERANCE
}

/// Checks one query and returns its value when it can be computed.
fn check_query(q: &QueryRecord, path: &str, issues: &mut Issues) -> Option<f64> {
    if let Some(c) = q.confidence {
        if !(0.0..=1.0).contains(&c) {
            issues.push(format!("{path}.confidence"), format!("confidence {c} outside [0, 1]"));
        }
    }
    if let Some(a) = q.answer {
        if !q.kind.admits(a) {
            issues.push(
                format!("{path}.answer"),
                format!("{} answer {a} is out of bounds", q.kind),
            );
        }
    }
    if q.subqueries.is_empty() {
        if q.combine.is_some() {
            issues.push(format!("{path}.combine"), "combine expression without subqueries");
        }
        if q.answer.is_none() {
            issues.push(format!("{path}.answer"), "leaf query has no answer");
        }
        return q.answer;
    }
    let mut bindings = BTreeMap::new();
    let mut complete = true;
    for (i, s) in q.subqueries.iter().enumerate() {
        let sp = format!("{path}.subqueries[{i}]");
        if s.target != q.target {
            issues.push(
                format!("{sp}.target"),
                format!("subquery target `{}` differs from `{}`", s.target, q.target),
            );
        }
        match check_query(s, &sp, issues) {
            Some(v) => {
                bindings.insert(QueryNode::slot_name(i), v);
            }
            None => complete = false,
        }
    }
    let Some(combine) = &q.combine else {
        issues.push(format!("{path}.combine"), "subqueries without a combine expression");
        return q.answer;
    };
    let expr = match Expr::parse(combine) {
        Ok(e) => e,
        Err(e) => {
            issues.push(format!("{path}.combine"), format!("cannot parse `{combine}`: {e}"));
            return q.answer;
        }
    };
    let allowed: BTreeSet<String> = (0..q.subqueries.len()).map(QueryNode::slot_name).collect();
    let used: BTreeSet<String> = expr.slots().into_iter().map(str::to_string).collect();
    for s in used.difference(&allowed) {
        issues.push(format!("{path}.combine"), format!("unknown slot `{s}`"));
    }
    for s in allowed.difference(&used) {
        issues.push(format!("{path}.combine"), format!("subquery `{s}` is not used"));
    }
    if !complete || used != allowed {
        return q.answer;
    }
    match expr.evaluate(&bindings) {
        Ok(v) => {
            if !q.kind.admits(v) {
                issues.push(
                    format!("{path}.combine"),
                    format!("combined {} value {v} is out of bounds", q.kind),
                );
            }
            if let Some(a) = q.answer {
                if !close_value(a, v) {
                    issues.push(
                        format!("{path}.answer"),
                        format!("answer {a} disagrees with combined value {v}"),
                    );
                }
            }
            Some(v)
        }
        Err(e) => {
            issues.push(format!("{path}.combine"), e.to_string());
            q.answer
        }
    }
}

fn check_ordering(post: &AnnotatedPost, o: &AnnotatedOrdering, path: &str, issues: &mut Issues) {
    let known: BTreeSet<&DisclosureId> = post.disclosures.iter().map(|d| &d.id).collect();
    let mut seen = BTreeSet::new();
    for (i, id) in o.order.iter().enumerate() {
        if !known.contains(id) {
            issues.push(format!("{path}.order[{i}]"), format!("unknown disclosure `{id}`"));
        }
        if !seen.insert(id) {
            issues.push(format!("{path}.order[{i}]"), format!("`{id}` appears twice"));
        }
    }
    for id in known.iter().filter(|id| !seen.contains(*id)) {
        issues.push(
            format!("{path}.order"),
            format!("disclosure `{id}` is missing from the order"),
        );
    }
    for (child, ps) in &o.parents {
        let Some(pos) = o.order.iter().position(|x| x == child) else {
            issues.push(
                format!("{path}.parents.{child}"),
                format!("`{child}` is not in the order"),
            );
            continue;
        };
        let mut dup = BTreeSet::new();
        for (j, p) in ps.iter().enumerate() {
            if !o.order[..pos].contains(p) {
                issues.push(
                    format!("{path}.parents.{child}[{j}]"),
                    format!("`{p}` does not precede `{child}`"),
                );
            }
            if !dup.insert(p) {
                issues.push(format!("{path}.parents.{child}[{j}]"), format!("`{p}` listed twice"));
            }
        }
    }
    if o.queries.len() != o.order.len() {
        issues.push(
            format!("{path}.queries"),
            format!("{} queries for {} ordered disclosures", o.queries.len(), o.order.len()),
        );
    }
    let mut values = Vec::new();
    for (i, q) in o.queries.iter().enumerate() {
        let qp = format!("{path}.queries[{i}]");
        if let Some(id) = o.order.get(i) {
            if &q.target != id {
                issues.push(
                    format!("{qp}.target"),
                    format!("expected target `{id}`, found `{}`", q.target),
                );
            }
        }
        let want = if i == 0 {
            QueryKind::Population
        } else {
            QueryKind::Percentage
        };
        if q.kind != want {
            issues.push(format!("{qp}.kind"), format!("query {i} must be a {want} query"));
        }
        values.push(check_query(q, &qp, issues));
    }
    if o.k < 1 {
        issues.push(format!("{path}.k"), "k must be at least 1");
    }
    let expr = match Expr::parse(&o.equation) {
        Ok(e) => e,
        Err(e) => {
            issues.push(
                format!("{path}.equation"),
                format!("cannot parse `{}`: {e}", o.equation),
            );
            return;
        }
    };
    if !expr.slots().is_empty() {
        issues.push(format!("{path}.equation"), "equation may only contain numbers");
        return;
    }
    let value = match expr.evaluate(&NoBindings) {
        Ok(v) => v,
        Err(e) => {
            issues.push(format!("{path}.equation"), e.to_string());
            return;
        }
    };
    match normalize_k(value) {
        Ok(k) if (k as f64 - o.k as f64).abs() <= K_TOLERANCE => {}
        Ok(k) => issues.push(format!("{path}.k"), format!("equation gives {k} but k is {}", o.k)),
        Err(e) => issues.push(format!("{path}.equation"), e.to_string()),
    }
    if !values.is_empty() && values.iter().all(Option::is_some) {
        let product: f64 = values.iter().flatten().product();
        if !close_k(product, value) {
            issues.push(
                format!("{path}.queries"),
                format!("answers multiply to {product} but the equation gives {value}"),
            );
        }
    }
}

/// Every invariant violation in one post; empty when clean. Paths are
/// relative to the post.
pub fn validate(post: &AnnotatedPost) -> Vec<Issue> {
    let mut issues = Issues { out: Vec::new() };
    if post.id.trim().is_empty() {
        issues.push("id", "post id is empty");
    }
    let ctx = DocumentContext {
        document_id: post.id.clone(),
        text: post.text.clone(),
        community: post.domain.clone(),
        disclosures: post.disclosures.clone(),
    };
    for p in ctx.problems() {
        issues.push("disclosures", p);
    }
    if post.orderings.is_empty() {
        issues.push("orderings", "post has no annotated orderings");
    }
    for (i, o) in post.orderings.iter().enumerate() {
        check_ordering(post, o, &format!("orderings[{i}]"), &mut issues);
    }
    issues.out
}

/// Validates every post, with paths rooted at the document.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Issue> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, post) in dataset.posts.iter().enumerate() {
        if !ids.insert(post.id.as_str()) {
            out.push(Issue {
                path: format!("posts[{i}].id"),
                message: format!("duplicate post id `{}`", post.id),
            });
        }
        out.extend(validate(post).into_iter().map(|is| Issue {
            path: format!("posts[{i}].{}", is.path),
            ..is
        }));
    }
    out
}

/// `[min k, max k]` over the post's orderings.
pub fn gold_interval(post: &AnnotatedPost) -> Result<KInterval, DatasetError> {
    let ks: Vec<f64> = post.orderings.iter().map(|o| o.k as f64).collect();
    if ks.is_empty() {
        return Err(DatasetError::NoGold(post.id.clone()));
    }
    let lo = ks.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    KInterval::new(lo, hi).map_err(|e| DatasetError::InvalidPost {
        post: post.id.clone(),
        message: e.to_string(),
    })
}

/// Single gold k for a post: the geometric mean of its orderings' k values,
/// rounded.
pub fn gold_k(post: &AnnotatedPost) -> Result<u64, DatasetError> {
    if post.orderings.is_empty() {
        return Err(DatasetError::NoGold(post.id.clone()));
    }
    if post.orderings.iter().any(|o| o.k < 1) {
        return Err(DatasetError::InvalidPost {
            post: post.id.clone(),
            message: "gold k below 1".into(),
        });
    }
    let mean_log = post.orderings.iter().map(|o| (o.k as f64).ln()).sum::<f64>() / post.orderings.len() as f64;
    Ok((mean_log.exp().round() as u64).max(1))
}

/// How to partition posts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Named fractions summing to one, applied after a seeded shuffle.
    Fractions { seed: u64, parts: Vec<(String, f64)> },
    /// Named id lists. Posts not listed land in `unassigned`.
    Explicit(BTreeMap<String, Vec<String>>),
}

pub const UNASSIGNED: &str = "unassigned";

/// Disjoint, exhaustive named splits of `posts`, each in input order.
pub fn split<'a>(
    posts: &'a [AnnotatedPost],
    spec: &SplitSpec,
) -> Result<BTreeMap<String, Vec<&'a AnnotatedPost>>, DatasetError> {
    let mut assignment: BTreeMap<&str, String> = BTreeMap::new();
    match spec {
        SplitSpec::Explicit(lists) => {
            let known: BTreeSet<&str> = posts.iter().map(|p| p.id.as_str()).collect();
            for (name, ids) in lists {
                for id in ids {
                    let id = known
                        .get(id.as_str())
                        .ok_or_else(|| DatasetError::UnknownPost(id.clone()))?;
                    if assignment.insert(id, name.clone()).is_some() {
                        return Err(DatasetError::Overlap(id.to_string()));
                    }
                }
            }
        }
        SplitSpec::Fractions { seed, parts } => {
            if parts.is_empty() || parts.iter().any(|(_, f)| f.is_nan() || *f < 0.0) {
                return Err(DatasetError::InvalidSplit("fractions must be non-negative".into()));
            }
            let total: f64 = parts.iter().map(|(_, f)| f).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(DatasetError::InvalidSplit(format!("fractions sum to {total}")));
            }
            let names: BTreeSet<&str> = parts.iter().map(|(n, _)| n.as_str()).collect();
            if names.len() != parts.len() {
                return Err(DatasetError::InvalidSplit("split names repeat".into()));
            }
            let mut ids: Vec<&str> = posts.iter().map(|p| p.id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            // Largest remainder, ties broken by listing order.
            let n = ids.len();
            let quotas: Vec<f64> = parts.iter().map(|(_, f)| f * n as f64).collect();
            let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
            let mut order: Vec<usize> = (0..parts.len()).collect();
            order.sort_by(|&a, &b| {
                (quotas[b] - quotas[b].floor())
                    .total_cmp(&(quotas[a] - quotas[a].floor()))
                    .then(a.cmp(&b))
            });
            let mut left = n - counts.iter().sum::<usize>();
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                counts[i] += 1;
                left -= 1;
            }
            let mut rest = ids.into_iter();
            for ((name, _), count) in parts.iter().zip(counts) {
                for id in rest.by_ref().take(count) {
                    assignment.insert(id, name.clone());
                }
            }
        }
    }
    let mut out: BTreeMap<String, Vec<&AnnotatedPost>> = match spec {
        SplitSpec::Explicit(lists) => lists.keys().map(|k| (k.clone(), Vec::new())).collect(),
        SplitSpec::Fractions { parts, .. } => parts.iter().map(|(k, _)| (k.clone(), Vec::new())).collect(),
    };
    for p in posts {
        let name = assignment
            .get(p.id.as_str())
            .cloned()
            .unwrap_or_else(|| UNASSIGNED.to_string());
        out.entry(name).or_default().push(p);
    }
    Ok(out)
}

/// A predicted ordering. Same layout as a gold ordering, with `k_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedOrdering {
    #[serde(default)]
    pub order: Vec<DisclosureId>,
    #[serde(default)]
    pub parents: BTreeMap<DisclosureId, Vec<DisclosureId>>,
    #[serde(default)]
    pub queries: Vec<QueryRecord>,
    pub equation: String,
    pub k_hat: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_k: Option<f64>,
}

impl PredictedOrdering {
    pub fn network(&self) -> BayesNetwork {
        network_of(&self.order, &self.parents)
    }
}

fn record(q: &QueryNode, a: &QueryAnswer) -> QueryRecord {
    let leaves = a.leaves();
    let (answer, confidence, subqueries) = if q.is_decomposed() {
        let value = crate::pipeline::query_value_expr(q, a)
            .ok()
            .and_then(|e| e.evaluate(&NoBindings).ok());
        let subs = q
            .subqueries
            .iter()
            .zip(leaves)
            .map(|(s, l)| record(s, &QueryAnswer::Leaf(l.clone())))
            .collect();
        (value, None, subs)
    } else {
        (
            leaves.first().map(|l| l.value),
            leaves.first().map(|l| l.confidence),
            Vec::new(),
        )
    };
    QueryRecord {
        target: q.target.clone(),
        kind: q.kind,
        text: q.text.clone(),
        subqueries,
        combine: q.combine.clone(),
        answer,
        confidence,
        reliability: None,
        feasibility: None,
    }
}

impl From<&EstimateResult> for PredictedOrdering {
    fn from(r: &EstimateResult) -> Self {
        let parents = r
            .network
            .ordering
            .iter()
            .map(|id| (id.clone(), r.network.parents_of(id).into_iter().collect()))
            .collect();
        PredictedOrdering {
            order: r.network.ordering.clone(),
            parents,
            queries: r.queries.iter().zip(&r.answers).map(|(q, a)| record(q, a)).collect(),
            equation: r.equation.clone(),
            k_hat: r.k_hat,
            raw_k: Some(r.raw_k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedPost {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default)]
    pub disclosures: Vec<Disclosure>,
    pub orderings: Vec<PredictedOrdering>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<RunEnsemble>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<KInterval>,
}

impl PredictedPost {
    pub fn from_result(ctx: &DocumentContext, result: &EstimateResult) -> Self {
        PredictedPost {
            id: ctx.document_id.clone(),
            text: ctx.text.clone(),
            domain: ctx.community.clone(),
            disclosures: ctx.disclosures.clone(),
            orderings: vec![result.into()],
            ensemble: None,
            interval: None,
        }
    }

    /// The post's headline prediction: its first ordering's `k_hat`.
    pub fn k_hat(&self) -> Option<u64> {
        self.orderings.first().map(|o| o.k_hat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub posts: Vec<PredictedPost>,
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionSet, DatasetError> {
    from_json_str(&read(path.as_ref())?)
}

/// Pairs every gold post with its prediction.
pub fn eval_pairs(dataset: &Dataset, predictions: &PredictionSet) -> Result<Vec<EvalPair>, DatasetError> {
    let by_id: BTreeMap<&str, &PredictedPost> = predictions.posts.iter().map(|p| (p.id.as_str(), p)).collect();
    dataset
        .posts
        .iter()
        .map(|post| {
            let pred = by_id
                .get(post.id.as_str())
                .ok_or_else(|| DatasetError::MissingPrediction(post.id.clone()))?;
            let k_hat = pred
                .k_hat()
                .ok_or_else(|| DatasetError::MissingPrediction(post.id.clone()))?
                .max(1);
            Ok(EvalPair {
                post_id: post.id.clone(),
                domain: post.domain.clone(),
                k_hat,
                k_star: gold_k(post)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = include_str!("../fixtures/sample_dataset.json");

    fn fixture() -> Dataset {
        from_json_str(FIXTURE).unwrap()
    }

    #[test]
    fn fixture_loads_clean() {
        let ds = fixture();
        assert_eq!(ds.posts.len(), 3);
        assert_eq!(validate_dataset(&ds), vec![]);
        for p in &ds.posts {
            p.context().unwrap();
        }
    }

    #[test]
    fn round_trip() {
        let ds = fixture();
        let text = serde_json::to_string(&ds).unwrap();
        assert_eq!(from_json_str::<Dataset>(&text).unwrap(), ds);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);
    }

    #[test]
    fn load_errors_name_the_field() {
        let bad = FIXTURE.replacen("\"location\"", "\"hometown\"", 1);
        match from_json_str::<Dataset>(&bad) {
            Err(DatasetError::Parse { field, .. }) => assert_eq!(field, "posts[0].disclosures[0].category"),
            other => panic!("{other:?}"),
        }
        assert_eq!(from_json_str::<Dataset>("  \n"), Err(DatasetError::Empty));
        assert!(matches!(load("/nonexistent/d.json"), Err(DatasetError::Io { .. })));
    }

    #[test]
    fn bound_and_consistency_issues() {
        let mut ds = fixture();
        ds.posts[0].orderings[0].queries[1].answer = Some(1.5);
        let issues = validate(&ds.posts[0]);
        assert!(issues
            .iter()
            .any(|i| i.path == "orderings[0].queries[1].answer" && i.message.contains("out of bounds")));
        let mut ds = fixture();
        ds.posts[0].orderings[0].k *= 2;
        let issues = validate(&ds.posts[0]);
        assert!(issues.iter().any(|i| i.path == "orderings[0].k"));
        let mut ds = fixture();
        let o = &mut ds.posts[0].orderings[0];
        o.parents.insert(o.order[0].clone(), vec![o.order[2].clone()]);
        assert!(validate(&ds.posts[0])
            .iter()
            .any(|i| i.message.contains("does not precede")));
    }

    #[test]
    fn gold_intervals() {
        let ds = fixture();
        let hand: Vec<(f64, f64)> = ds
            .posts
            .iter()
            .map(|p| {
                let ks: Vec<u64> = p.orderings.iter().map(|o| o.k).collect();
                (*ks.iter().min().unwrap() as f64, *ks.iter().max().unwrap() as f64)
            })
            .collect();
        for (p, (lo, hi)) in ds.posts.iter().zip(hand) {
            assert_eq!(gold_interval(p).unwrap(), KInterval { lo, hi });
        }
        let mut two = ds.posts[0].clone();
        two.orderings[0].k = 100;
        two.orderings[1].k = 250;
        assert_eq!(gold_interval(&two).unwrap(), KInterval { lo: 100.0, hi: 250.0 });
        assert_eq!(gold_k(&two).unwrap(), 158);
        let mut one = ds.posts[2].clone();
        one.orderings.truncate(1);
        one.orderings[0].k = 7;
        assert_eq!(gold_interval(&one).unwrap(), KInterval { lo: 7.0, hi: 7.0 });
    }

    fn posts(n: usize) -> Vec<AnnotatedPost> {
        let base = fixture().posts[0].clone();
        (0..n)
            .map(|i| AnnotatedPost {
                id: format!("p{i}"),
                ..base.clone()
            })
            .collect()
    }

    fn ids(split: &[&AnnotatedPost]) -> Vec<String> {
        split.iter().map(|p| p.id.clone()).collect()
    }

    #[test]
    fn explicit_splits() {
        let ps = posts(4);
        let spec = SplitSpec::Explicit(BTreeMap::from([
            ("train".to_string(), vec!["p0".to_string(), "p2".to_string()]),
            ("test".to_string(), vec!["p1".to_string()]),
        ]));
        let s = split(&ps, &spec).unwrap();
        assert_eq!(ids(&s["train"]), vec!["p0", "p2"]);
        assert_eq!(ids(&s["test"]), vec!["p1"]);
        assert_eq!(ids(&s[UNASSIGNED]), vec!["p3"]);
        let overlap = SplitSpec::Explicit(BTreeMap::from([
            ("a".to_string(), vec!["p0".to_string()]),
            ("b".to_string(), vec!["p0".to_string()]),
        ]));
        assert_eq!(split(&ps, &overlap), Err(DatasetError::Overlap("p0".into())));
    }

    #[test]
    fn fraction_splits_are_stable() {
        let ps = posts(10);
        let spec = SplitSpec::Fractions {
            seed: 4,
            parts: vec![("train".into(), 0.6), ("test".into(), 0.3), ("validation".into(), 0.1)],
        };
        let a = split(&ps, &spec).unwrap();
        let b = split(&ps, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a["train"].len(), 6);
        assert_eq!(a["test"].len(), 3);
        assert_eq!(a["validation"].len(), 1);
        let all: BTreeSet<String> = a.values().flat_map(|v| ids(v)).collect();
        assert_eq!(all.len(), 10);
        let bad = SplitSpec::Fractions {
            seed: 1,
            parts: vec![("x".into(), 0.5)],
        };
        assert!(matches!(split(&ps, &bad), Err(DatasetError::InvalidSplit(_))));
    }

    #[test]
    fn predictions_pair_with_gold() {
        let ds = fixture();
        let preds = PredictionSet {
            system: Some("s".into()),
            posts: ds
                .posts
                .iter()
                .map(|p| PredictedPost {
                    id: p.id.clone(),
                    text: String::new(),
                    domain: None,
                    disclosures: vec![],
                    orderings: vec![PredictedOrdering {
                        order: vec![],
                        parents: BTreeMap::new(),
                        queries: vec![],
                        equation: "10".into(),
                        k_hat: 10,
                        raw_k: None,
                    }],
                    ensemble: None,
                    interval: None,
                })
                .collect(),
        };
        let pairs = eval_pairs(&ds, &preds).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.k_hat == 10));
        let mut short = preds.clone();
        short.posts.pop();
        assert!(matches!(
            eval_pairs(&ds, &short),
            Err(DatasetError::MissingPrediction(_))
        ));
    }
}
