//! The staged estimator: selection, ordering, parent assignment, query
//! generation, subquery decomposition, estimation, review and recombination,
//! plus the single-prompt baseline strategies.
//!
//! Every model exchange goes through one guarded loop. A completion that
//! fails its stage's guard is answered with feedback and re-requested, up to
//! [`RunConfig::retry_limit`] times, and the full exchange is kept in the
//! transcript.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use serde::Serialize;
use thiserror::Error;

use crate::error::CoreError;
use crate::expr::{EvalError, Expr};
use crate::llm::{
    digest_messages, extract_list, extract_tagged, parse_numeric, render_prompt, BackendError, ChatBackend,
    ChatMessage, CompletionParams, CompletionRequest, ExtractError, PromptLibrary, TaskHint, TemplateError, TemplateId,
};
use crate::model::{
    normalize_k, Answer, BayesNetwork, Disclosure, DisclosureId, DocumentContext, EstimateResult, NetworkMode,
    QueryAnswer, QueryKind, QueryNode, QuerySemantics, Rejection, RunConfig, Simplification, StageTranscript, Strategy,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("stage `{stage}` gave up after {attempts} attempts: {reason}")]
    Exhausted {
        stage: String,
        attempts: u32,
        reason: String,
    },
    #[error("stage `{stage}`: {source}")]
    Backend {
        stage: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("recombination failed: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// A failed run together with everything exchanged before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub error: PipelineError,
    pub transcript: Vec<StageTranscript>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} exchanges recorded)", self.error, self.transcript.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Called with every transcript entry as soon as its exchange settles.
pub type Observer<'a> = dyn Fn(&StageTranscript) + Send + Sync + 'a;

/// The elicited structure and queries of a run, before any estimation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Elicitation {
    pub network: BayesNetwork,
    pub queries: Vec<QueryNode>,
}

struct Attempt<'r> {
    last: bool,
    rejected: &'r [Rejection],
}

fn builtin_prompts() -> &'static PromptLibrary {
    static LIB: OnceLock<PromptLibrary> = OnceLock::new();
    LIB.get_or_init(PromptLibrary::builtin)
}

fn describe(d: &Disclosure) -> String {
    format!("{} ({})", d.span, d.category)
}

fn describe_all<'a>(ds: impl IntoIterator<Item = &'a Disclosure>) -> String {
    let parts: Vec<String> = ds.into_iter().map(describe).collect();
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join("; ")
    }
}

fn reason(e: ExtractError) -> String {
    e.to_string()
}

/// Why `text` cannot serve as a query of `kind`, if it cannot.
pub fn query_kind_problem(text: &str, kind: QueryKind) -> Option<String> {
    let lower = text.to_lowercase();
    match kind {
        QueryKind::Population if lower.contains("percent") => {
            Some("a population query must not ask for a percentage".into())
        }
        QueryKind::Population if !(lower.contains("population") || lower.contains("number")) => {
            Some("a population query must ask for a population or number of people".into())
        }
        QueryKind::Percentage if !lower.contains("percent") => {
            Some("a percentage query must ask for a percentage".into())
        }
        _ => None,
    }
}

fn subquery_kind(tag: Option<&str>) -> Result<QueryKind, String> {
    match tag.map(|t| t.to_lowercase()) {
        None => Ok(QueryKind::Percentage),
        Some(t) if t == "percentage" || t == "percent" => Ok(QueryKind::Percentage),
        Some(t) if t == "number" || t == "population" || t == "count" => Ok(QueryKind::Population),
        Some(t) => Err(format!("unknown subquery type `{t}`")),
    }
}

/// Drives one document through the stages against a chat backend.
#[derive(Clone)]
pub struct Pipeline<'a> {
    backend: &'a dyn ChatBackend,
    config: RunConfig,
    prompts: &'a PromptLibrary,
    observer: Option<&'a Observer<'a>>,
    sample: u32,
}

impl<'a> Pipeline<'a> {
    pub fn new(backend: &'a dyn ChatBackend, config: RunConfig) -> Self {
        Pipeline {
            backend,
            config,
            prompts: builtin_prompts(),
            observer: None,
            sample: 0,
        }
    }

    pub fn with_prompts(mut self, prompts: &'a PromptLibrary) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_observer(mut self, observer: &'a Observer<'a>) -> Self {
        self.observer = Some(observer);
        self
    }

    /// Draw index sent with every request, so repeated runs can be told apart.
    pub fn with_sample(mut self, sample: u32) -> Self {
        self.sample = sample;
        self
    }

    pub fn sample(&self) -> u32 {
        self.sample
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn concurrency(&self) -> usize {
        self.config.concurrency.min(self.backend.max_concurrency()).max(1)
    }

    fn record(&self, tx: &mut Vec<StageTranscript>, entry: StageTranscript) {
        if let Some(obs) = self.observer {
            obs(&entry);
        }
        tx.push(entry);
    }

    #[allow(clippy::too_many_arguments)]
    fn exchange<T: Serialize>(
        &self,
        stage: String,
        template: TemplateId,
        bindings: &[(&str, &str)],
        hint: TaskHint,
        sample: u32,
        tx: &mut Vec<StageTranscript>,
        parse: impl Fn(&str, &Attempt) -> Result<T, String>,
    ) -> Result<T, PipelineError> {
        let base = render_prompt(self.prompts.get(template), bindings, self.config.demonstrations)?;
        let params = CompletionParams {
            model: self.config.model.clone(),
            temperature: self.config.temperature,
            max_tokens: None,
        };
        let mut rejected: Vec<Rejection> = Vec::new();
        for attempt in 0..=self.config.retry_limit {
            let mut messages = base.clone();
            for (i, r) in rejected.iter().enumerate() {
                let shown = if r.completion.trim().is_empty() {
                    "(empty reply)"
                } else {
                    r.completion.as_str()
                };
                messages.push(ChatMessage::assistant(shown));
                messages.push(ChatMessage::user(format!(
                    "That reply could not be used: {}. Answer again using the required tags. (attempt {})",
                    r.reason,
                    i + 2
                )));
            }
            let request = CompletionRequest {
                template,
                messages,
                params: params.clone(),
                sample,
                hint: hint.clone(),
            };
            let completion = self
                .backend
                .complete(&request)
                .map_err(|source| PipelineError::Backend {
                    stage: stage.clone(),
                    source,
                })?;
            let info = Attempt {
                last: attempt == self.config.retry_limit,
                rejected: &rejected,
            };
            match parse(&completion, &info) {
                Ok(value) => {
                    let parsed = serde_json::to_value(&value).unwrap_or(serde_json::Value::Null);
                    self.record(
                        tx,
                        StageTranscript {
                            stage,
                            prompt_digest: digest_messages(&request.messages),
                            raw_completion: completion,
                            parsed,
                            retries: attempt,
                            rejected,
                        },
                    );
                    return Ok(value);
                }
                Err(reason) => {
                    log::debug!("{stage}: rejected attempt {}: {reason}", attempt + 1);
                    rejected.push(Rejection { completion, reason });
                }
            }
        }
        let last = rejected.last().cloned().expect("at least one attempt");
        self.record(
            tx,
            StageTranscript {
                stage: stage.clone(),
                prompt_digest: digest_messages(&base),
                raw_completion: last.completion,
                parsed: serde_json::Value::Null,
                retries: self.config.retry_limit,
                rejected,
            },
        );
        Err(PipelineError::Exhausted {
            stage,
            attempts: self.config.retry_limit + 1,
            reason: last.reason,
        })
    }

    fn community(ctx: &DocumentContext) -> &str {
        ctx.community.as_deref().unwrap_or("none")
    }

    /// Disclosures worth estimating, in document order.
    pub fn select_disclosures(
        &self,
        ctx: &DocumentContext,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<Vec<DisclosureId>, PipelineError> {
        if ctx.disclosures.is_empty() {
            return Err(PipelineError::Precondition("document has no disclosures".into()));
        }
        let list = describe_all(&ctx.disclosures);
        let bindings = [
            ("reddit_post", ctx.text.as_str()),
            ("self_disclosure_list", list.as_str()),
            ("subreddit", Self::community(ctx)),
        ];
        let hint = TaskHint::Selection {
            candidates: ctx.disclosures.clone(),
        };
        self.exchange(
            "selection".into(),
            TemplateId::DisclosureSelection,
            &bindings,
            hint,
            self.sample,
            tx,
            |text, _| {
                let items = extract_list(text).map_err(reason)?;
                let mut keep = BTreeSet::new();
                for item in &items {
                    let matched: Vec<&Disclosure> = ctx.disclosures.iter().filter(|d| d.span == item.answer).collect();
                    if matched.is_empty() {
                        return Err(format!("`{}` is not one of the provided disclosure spans", item.answer));
                    }
                    keep.extend(matched.into_iter().map(|d| d.id.clone()));
                }
                if keep.is_empty() {
                    return Err("no disclosures were selected".into());
                }
                Ok(ctx.ids().filter(|id| keep.contains(*id)).cloned().collect::<Vec<_>>())
            },
        )
    }

    /// A permutation of `subset` chosen by the model.
    pub fn order_disclosures(
        &self,
        ctx: &DocumentContext,
        subset: &[DisclosureId],
        tx: &mut Vec<StageTranscript>,
    ) -> Result<Vec<DisclosureId>, PipelineError> {
        let members: Vec<&Disclosure> = subset
            .iter()
            .map(|id| {
                ctx.disclosure(id)
                    .ok_or_else(|| PipelineError::Precondition(format!("unknown disclosure `{id}`")))
            })
            .collect::<Result<_, _>>()?;
        match members.len() {
            0 => return Err(PipelineError::Precondition("nothing to order".into())),
            1 => return Ok(subset.to_vec()),
            _ => {}
        }
        let list = describe_all(members.iter().copied());
        let bindings = [
            ("reddit_post", ctx.text.as_str()),
            ("self_disclosure_list", list.as_str()),
            ("subreddit", Self::community(ctx)),
        ];
        let hint = TaskHint::Ordering {
            subset: members.iter().map(|d| (*d).clone()).collect(),
        };
        self.exchange(
            "ordering".into(),
            TemplateId::ProbabilityOrdering,
            &bindings,
            hint,
            self.sample,
            tx,
            |text, _| {
                let items = extract_list(text).map_err(reason)?;
                let mut used = vec![false; members.len()];
                let mut order = Vec::with_capacity(members.len());
                for item in &items {
                    let slot = members
                        .iter()
                        .enumerate()
                        .position(|(i, d)| !used[i] && d.span == item.answer)
                        .ok_or_else(|| {
                            if members.iter().any(|d| d.span == item.answer) {
                                format!("`{}` appears more than once", item.answer)
                            } else {
                                format!("`{}` is not one of the disclosures to order", item.answer)
                            }
                        })?;
                    used[slot] = true;
                    order.push(members[slot].id.clone());
                }
                if order.len() != members.len() {
                    return Err(format!(
                        "expected all {} disclosures, got {}",
                        members.len(),
                        order.len()
                    ));
                }
                Ok(order)
            },
        )
    }

    /// Parent sets for each position of `ordering`, according to the
    /// configured network mode.
    pub fn assign_parents(
        &self,
        ctx: &DocumentContext,
        ordering: &[DisclosureId],
        tx: &mut Vec<StageTranscript>,
    ) -> Result<BayesNetwork, PipelineError> {
        match self.config.network_mode {
            NetworkMode::FullyConnected => return Ok(BayesNetwork::fully_connected(ordering.to_vec())),
            NetworkMode::FullyDisjoint => return Ok(BayesNetwork::fully_disjoint(ordering.to_vec())),
            NetworkMode::Elicited => {}
        }
        let nodes: Vec<&Disclosure> = ordering
            .iter()
            .map(|id| {
                ctx.disclosure(id)
                    .ok_or_else(|| PipelineError::Precondition(format!("unknown disclosure `{id}`")))
            })
            .collect::<Result<_, _>>()?;
        let mut parents = BTreeMap::new();
        for (i, target) in nodes.iter().enumerate().skip(1) {
            let priors = &nodes[..i];
            let prior_list = describe_all(priors.iter().copied());
            let current = describe(target);
            let bindings = [
                ("reddit_post", ctx.text.as_str()),
                ("prior_disclosure_list", prior_list.as_str()),
                ("self_disclosure_span", current.as_str()),
            ];
            let hint = TaskHint::Dependencies {
                target: (*target).clone(),
                priors: priors.iter().map(|d| (*d).clone()).collect(),
            };
            let stage = format!("dependencies:{}", target.id);
            let set = self.exchange(
                stage,
                TemplateId::ConditionalDependencies,
                &bindings,
                hint,
                self.sample,
                tx,
                |text, _| {
                    let items = extract_list(text).map_err(reason)?;
                    let mut set = BTreeSet::new();
                    for item in &items {
                        let found = priors
                            .iter()
                            .find(|d| d.span == item.answer)
                            .ok_or_else(|| format!("`{}` is not one of the prior disclosures", item.answer))?;
                        set.insert(found.id.clone());
                    }
                    Ok(set)
                },
            )?;
            if !set.is_empty() {
                parents.insert(target.id.clone(), set);
            }
        }
        Ok(BayesNetwork::new(ordering.to_vec(), parents))
    }

    /// One query per network node: a population query for the first and
    /// conditional percentage queries for the rest.
    pub fn generate_queries(
        &self,
        ctx: &DocumentContext,
        network: &BayesNetwork,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<Vec<QueryNode>, PipelineError> {
        let mut queries: Vec<QueryNode> = Vec::with_capacity(network.ordering.len());
        for (i, id) in network.ordering.iter().enumerate() {
            let target = ctx
                .disclosure(id)
                .ok_or_else(|| PipelineError::Precondition(format!("unknown disclosure `{id}`")))?;
            let (kind, semantics, template, stage, owned): (_, _, _, _, Vec<(&str, String)>) = if i == 0 {
                let semantics = QuerySemantics {
                    target: vec![target.fact()],
                    conditions: Vec::new(),
                };
                let bindings = vec![
                    ("self_disclosure_list", describe(target)),
                    ("subreddit", Self::community(ctx).to_string()),
                ];
                (
                    QueryKind::Population,
                    semantics,
                    TemplateId::PopulationQuery,
                    format!("query:{id}"),
                    bindings,
                )
            } else {
                let parents: Vec<&Disclosure> = network
                    .ordering
                    .iter()
                    .filter(|p| network.parents_of(id).contains(*p))
                    .filter_map(|p| ctx.disclosure(p))
                    .collect();
                let semantics = QuerySemantics {
                    target: vec![target.fact()],
                    conditions: parents.iter().map(|d| d.fact()).collect(),
                };
                let history = if self.config.query_history && !queries.is_empty() {
                    queries
                        .iter()
                        .map(|q| format!("- {}", q.text))
                        .collect::<Vec<_>>()
                        .join("\n")
                } else {
                    "none".to_string()
                };
                let bindings = vec![
                    ("prior_disclosure_list", describe_all(parents.iter().copied())),
                    ("self_disclosure_span", describe(target)),
                    ("span_category", target.category.label().to_string()),
                    ("subreddit", Self::community(ctx).to_string()),
                    ("query_history", history),
                ];
                (
                    QueryKind::Percentage,
                    semantics,
                    TemplateId::ProbabilityQuery,
                    format!("query:{id}"),
                    bindings,
                )
            };
            let bindings: Vec<(&str, &str)> = owned.iter().map(|(k, v)| (*k, v.as_str())).collect();
            let hint = TaskHint::QueryGeneration {
                kind,
                semantics: semantics.clone(),
            };
            let text = self.exchange(stage, template, &bindings, hint, self.sample, tx, |text, _| {
                let q = extract_tagged(text, "query").map_err(reason)?;
                if q.is_empty() {
                    return Err("the query is empty".into());
                }
                if let Some(problem) = query_kind_problem(&q, kind) {
                    return Err(problem);
                }
                Ok(q)
            })?;
            queries.push(QueryNode::leaf(id.clone(), kind, text, semantics));
        }
        Ok(queries)
    }

    fn try_decompose(
        &self,
        q: &QueryNode,
        template: TemplateId,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<Option<(Vec<QueryNode>, String)>, PipelineError> {
        let label = if template == TemplateId::GeneralizationSubquery {
            "generalization"
        } else {
            "discrete"
        };
        let hint = TaskHint::Decomposition {
            semantics: q.semantics.clone(),
        };
        let stage = format!("decompose:{label}:{}", q.target);
        self.exchange(
            stage,
            template,
            &[("query", q.text.as_str())],
            hint,
            self.sample,
            tx,
            |text, _| {
                let math = match extract_tagged(text, "math") {
                    Ok(m) => m,
                    Err(ExtractError::Missing(_)) => {
                        if text.contains("<query>") || text.contains("<list>") {
                            return Ok(None);
                        }
                        return Err("expected <math> with a <list> of subqueries, or the original query".into());
                    }
                    Err(e) => return Err(reason(e)),
                };
                let items = extract_list(text).map_err(reason)?;
                if items.is_empty() {
                    return Err("a decomposition needs at least one subquery".into());
                }
                let expr = Expr::parse(&math).map_err(|e| format!("combine expression `{math}`: {e}"))?;
                let mut slots = expr.slots();
                slots.sort_unstable();
                let mut expected: Vec<String> = (0..items.len()).map(QueryNode::slot_name).collect();
                expected.sort_unstable();
                if slots != expected.iter().map(String::as_str).collect::<Vec<_>>() {
                    return Err(format!(
                        "combine expression must use each of {} exactly once",
                        (0..items.len())
                            .map(QueryNode::slot_name)
                            .collect::<Vec<_>>()
                            .join(", ")
                    ));
                }
                let mut subs = Vec::with_capacity(items.len());
                for item in &items {
                    let kind = subquery_kind(item.kind.as_deref())?;
                    if let Some(problem) = query_kind_problem(&item.answer, kind) {
                        return Err(format!("subquery `{}`: {problem}", item.answer));
                    }
                    subs.push(QueryNode::leaf(
                        q.target.clone(),
                        kind,
                        item.answer.clone(),
                        q.semantics.clone(),
                    ));
                }
                Ok(Some((subs, expr.render())))
            },
        )
    }

    /// Splits a percentage query into subqueries with a combine expression
    /// when the model finds a range or an exclusive alternative.
    pub fn decompose_subqueries(
        &self,
        q: &QueryNode,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<QueryNode, PipelineError> {
        if q.kind != QueryKind::Percentage {
            return Err(PipelineError::Precondition(
                "only percentage queries are decomposed".into(),
            ));
        }
        let mut templates = vec![TemplateId::GeneralizationSubquery];
        if self.config.discrete_subqueries {
            templates.push(TemplateId::DiscreteSubquery);
        }
        for template in templates {
            if let Some((subqueries, combine)) = self.try_decompose(q, template, tx)? {
                let mut out = q.clone();
                out.subqueries = subqueries;
                out.combine = Some(combine);
                return Ok(out);
            }
        }
        Ok(q.clone())
    }

    fn estimate_with(
        &self,
        q: &QueryNode,
        stage: &str,
        sample: u32,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<Answer, PipelineError> {
        if q.is_decomposed() {
            return Err(PipelineError::Precondition(format!(
                "query `{}` still has subqueries",
                q.text
            )));
        }
        let kind = q.kind;
        let wants_score = matches!(self.config.simplification, Simplification::ConfidenceThreshold { .. });
        let hint = TaskHint::Estimation {
            kind,
            semantics: q.semantics.clone(),
        };
        let bindings = [("search_query", q.text.as_str())];
        let (value, confidence) = self.exchange(
            stage.to_string(),
            TemplateId::QueryEstimation,
            &bindings,
            hint,
            sample,
            tx,
            |text, at| {
                let raw = extract_tagged(text, "answer").map_err(reason)?;
                let value = parse_numeric(&raw, kind).map_err(reason)?;
                let score = extract_tagged(text, "score").ok().and_then(|s| s.parse::<f64>().ok());
                match score {
                    Some(s) if (0.0..=1.0).contains(&s) => Ok((value, s)),
                    _ => {
                        let asked = at.rejected.iter().any(|r| r.reason.starts_with("missing <score>"));
                        if wants_score && !asked && !at.last {
                            return Err("missing <score> confidence between 0 and 1".into());
                        }
                        log::warn!("{stage}: no usable <score>, assuming confidence 1");
                        Ok((value, 1.0))
                    }
                }
            },
        )?;
        let digest = tx.last().map(|t| t.prompt_digest.clone()).unwrap_or_default();
        Ok(Answer::new(value, kind, confidence, format!("{stage}@{digest}"))?)
    }

    /// Estimates one leaf query.
    pub fn estimate_answer(&self, q: &QueryNode, tx: &mut Vec<StageTranscript>) -> Result<Answer, PipelineError> {
        self.estimate_with(q, &format!("estimate:{}", q.target), self.sample, tx)
    }

    fn review_with(
        &self,
        q: &QueryNode,
        a: Answer,
        label: &str,
        sample: u32,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<(QueryNode, Answer), PipelineError> {
        let mut q = q.clone();
        let mut a = a;
        for _ in 0..self.config.max_simplify_iterations {
            let simplify = match self.config.simplification {
                Simplification::None => false,
                Simplification::ConfidenceThreshold { threshold } => a.confidence < threshold,
                Simplification::Evaluator => {
                    let shown = a.value.to_string();
                    let bindings = [("query", q.text.as_str()), ("answer", shown.as_str())];
                    let hint = TaskHint::Review {
                        kind: q.kind,
                        semantics: q.semantics.clone(),
                    };
                    let verdict = self.exchange(
                        format!("review:{label}"),
                        TemplateId::EvaluateAnswer,
                        &bindings,
                        hint,
                        sample,
                        tx,
                        |text, _| {
                            let v = extract_tagged(text, "answer").map_err(reason)?;
                            match v.trim_end_matches('.').to_lowercase().as_str() {
                                "yes" => Ok(true),
                                "no" => Ok(false),
                                _ => Err(format!("expected Yes or No, got `{v}`")),
                            }
                        },
                    )?;
                    !verdict
                }
            };
            if !simplify {
                break;
            }
            let kind = q.kind;
            let hint = TaskHint::Simplify {
                kind: q.kind,
                semantics: q.semantics.clone(),
            };
            let text = self.exchange(
                format!("simplify:{label}"),
                TemplateId::SimplifyQuery,
                &[("query", q.text.as_str())],
                hint,
                sample,
                tx,
                |text, _| {
                    let s = extract_tagged(text, "query").map_err(reason)?;
                    if s.is_empty() {
                        return Err("the query is empty".into());
                    }
                    if let Some(problem) = query_kind_problem(&s, kind) {
                        return Err(problem);
                    }
                    Ok(s)
                },
            )?;
            q.text = text;
            a = self.estimate_with(&q, &format!("estimate:{label}"), sample, tx)?;
            a.simplified = true;
        }
        Ok((q, a))
    }

    /// Applies the configured review strategy to one estimated leaf.
    pub fn review_and_simplify(
        &self,
        q: &QueryNode,
        a: Answer,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<(QueryNode, Answer), PipelineError> {
        self.review_with(q, a, q.target.as_str(), self.sample, tx)
    }

    /// Runs selection through decomposition.
    pub fn elicit(&self, ctx: &DocumentContext, tx: &mut Vec<StageTranscript>) -> Result<Elicitation, PipelineError> {
        let selected = self.select_disclosures(ctx, tx)?;
        let ordering = self.order_disclosures(ctx, &selected, tx)?;
        let network = self.assign_parents(ctx, &ordering, tx)?;
        let mut queries = self.generate_queries(ctx, &network, tx)?;
        for q in queries.iter_mut().skip(1) {
            *q = self.decompose_subqueries(q, tx)?;
        }
        Ok(Elicitation { network, queries })
    }

    /// Estimates and reviews every leaf, fanning out across the backend's
    /// concurrency. The transcript is appended in query order regardless of
    /// completion order.
    pub fn answer_queries(
        &self,
        queries: &[QueryNode],
        sample: u32,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<(Vec<QueryNode>, Vec<QueryAnswer>), PipelineError> {
        let jobs: Vec<(usize, Option<usize>)> = queries
            .iter()
            .enumerate()
            .flat_map(|(i, q)| {
                if q.is_decomposed() {
                    (0..q.subqueries.len()).map(|j| (i, Some(j))).collect::<Vec<_>>()
                } else {
                    vec![(i, None)]
                }
            })
            .collect();
        type Slot = Mutex<Option<(Result<(QueryNode, Answer), PipelineError>, Vec<StageTranscript>)>>;
        let results: Vec<Slot> = jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let work = || loop {
            let n = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(i, sub)) = jobs.get(n) else { break };
            let (leaf, label) = match sub {
                Some(j) => (
                    &queries[i].subqueries[j],
                    format!("{}/{}", queries[i].target, QueryNode::slot_name(j)),
                ),
                None => (&queries[i], queries[i].target.to_string()),
            };
            let mut local = Vec::new();
            let out = self
                .estimate_with(leaf, &format!("estimate:{label}"), sample, &mut local)
                .and_then(|a| self.review_with(leaf, a, &label, sample, &mut local));
            *results[n].lock().unwrap() = Some((out, local));
        };
        let workers = self.concurrency().min(jobs.len()).max(1);
        if workers == 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(work);
                }
            });
        }
        let mut updated = queries.to_vec();
        let mut leaves: Vec<Vec<Answer>> = queries.iter().map(|_| Vec::new()).collect();
        let mut first_error = None;
        for (slot, &(i, sub)) in results.into_iter().zip(&jobs) {
            let (out, local) = slot.into_inner().unwrap().expect("every job ran");
            tx.extend(local);
            match out {
                Ok((node, answer)) => {
                    match sub {
                        Some(j) => updated[i].subqueries[j] = node,
                        None => updated[i] = node,
                    }
                    leaves[i].push(answer);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        let answers = updated
            .iter()
            .zip(leaves)
            .map(|(q, mut a)| {
                if q.is_decomposed() {
                    QueryAnswer::Parts(a)
                } else {
                    QueryAnswer::Leaf(a.remove(0))
                }
            })
            .collect();
        Ok((updated, answers))
    }

    /// Full staged run.
    pub fn run(&self, ctx: &DocumentContext) -> Result<EstimateResult, RunFailure> {
        let mut tx = Vec::new();
        match self.run_inner(ctx, &mut tx) {
            Ok((network, queries, answers)) => match recombine(&network, &queries, &answers) {
                Ok((equation, raw_k)) => match normalize_k(raw_k) {
                    Ok(k_hat) => Ok(EstimateResult {
                        k_hat,
                        raw_k,
                        equation: equation.render(),
                        queries,
                        answers,
                        network,
                        transcript: tx,
                    }),
                    Err(e) => Err(RunFailure {
                        error: e.into(),
                        transcript: tx,
                    }),
                },
                Err(error) => Err(RunFailure { error, transcript: tx }),
            },
            Err(error) => Err(RunFailure { error, transcript: tx }),
        }
    }

    fn run_inner(
        &self,
        ctx: &DocumentContext,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<(BayesNetwork, Vec<QueryNode>, Vec<QueryAnswer>), PipelineError> {
        if self.config.strategy != Strategy::Branch {
            return Err(PipelineError::Precondition(
                "run needs the branch strategy; use run_baseline".into(),
            ));
        }
        self.config.validate()?;
        let el = self.elicit(ctx, tx)?;
        let (queries, answers) = self.answer_queries(&el.queries, self.sample, tx)?;
        Ok((el.network, queries, answers))
    }

    /// One-prompt estimate with the few-shot, chain-of-thought or
    /// program-of-thought strategy.
    pub fn run_baseline(&self, ctx: &DocumentContext) -> Result<EstimateResult, RunFailure> {
        let mut tx = Vec::new();
        match self.baseline_inner(ctx, &mut tx) {
            Ok((equation, raw_k, k_hat)) => Ok(EstimateResult {
                k_hat,
                raw_k,
                equation,
                queries: Vec::new(),
                answers: Vec::new(),
                network: BayesNetwork::default(),
                transcript: tx,
            }),
            Err(error) => Err(RunFailure { error, transcript: tx }),
        }
    }

    fn baseline_inner(
        &self,
        ctx: &DocumentContext,
        tx: &mut Vec<StageTranscript>,
    ) -> Result<(String, f64, u64), PipelineError> {
        self.config.validate()?;
        let template = match self.config.strategy {
            Strategy::FewShot => TemplateId::BaselineFewShot,
            Strategy::Cot => TemplateId::BaselineCot,
            Strategy::Pot => TemplateId::BaselinePot,
            Strategy::Branch => {
                return Err(PipelineError::Precondition(
                    "run_baseline needs a baseline strategy".into(),
                ));
            }
        };
        if ctx.disclosures.is_empty() {
            return Err(PipelineError::Precondition("document has no disclosures".into()));
        }
        let list = describe_all(&ctx.disclosures);
        let population = format!("{}", self.config.default_population.round());
        let bindings = [
            ("reddit_post", ctx.text.as_str()),
            ("self_disclosure_list", list.as_str()),
            ("subreddit", Self::community(ctx)),
            ("default_population", population.as_str()),
        ];
        let hint = TaskHint::Baseline {
            disclosures: ctx.disclosures.clone(),
        };
        let pot = template == TemplateId::BaselinePot;
        let (equation, raw) = self.exchange(
            "baseline".into(),
            template,
            &bindings,
            hint,
            self.sample,
            tx,
            |text, _| {
                if pot {
                    let math = extract_tagged(text, "math").map_err(reason)?;
                    let expr = Expr::parse(&math).map_err(|e| format!("equation `{math}`: {e}"))?;
                    if !expr.slots().is_empty() {
                        return Err("the equation may only contain numbers".into());
                    }
                    let v = expr.evaluate(&crate::expr::NoBindings).map_err(|e| e.to_string())?;
                    if !v.is_finite() || v < 0.0 {
                        return Err(format!("the equation evaluates to {v}"));
                    }
                    Ok((expr.render(), v))
                } else {
                    let raw = extract_tagged(text, "answer").map_err(reason)?;
                    let v = parse_numeric(&raw, QueryKind::Population).map_err(reason)?;
                    Ok((Expr::num(v).render(), v))
                }
            },
        )?;
        let k_hat = normalize_k(raw)?;
        Ok((equation, raw, k_hat))
    }
}

/// Value expression of one top-level query: its answer, or its combine
/// expression with the subquery answers substituted.
pub fn query_value_expr(q: &QueryNode, a: &QueryAnswer) -> Result<Expr, PipelineError> {
    match (q.is_decomposed(), a) {
        (false, QueryAnswer::Leaf(ans)) => Ok(Expr::num(ans.value)),
        (true, QueryAnswer::Parts(parts)) if parts.len() == q.subqueries.len() => {
            let combine = q.combine.as_deref().ok_or_else(|| {
                PipelineError::Precondition(format!("query `{}` has subqueries but no combine expression", q.text))
            })?;
            let expr = Expr::parse(combine)
                .map_err(|e| PipelineError::Precondition(format!("combine expression `{combine}`: {e}")))?;
            let with = parts
                .iter()
                .enumerate()
                .map(|(i, p)| (QueryNode::slot_name(i), Expr::num(p.value)))
                .collect();
            Ok(expr.substitute(&with))
        }
        _ => Err(PipelineError::Precondition(format!(
            "answers do not match the shape of query `{}`",
            q.text
        ))),
    }
}

/// Builds the chain-rule equation, population times the product of the
/// remaining factors, and evaluates it.
pub fn recombine(
    network: &BayesNetwork,
    queries: &[QueryNode],
    answers: &[QueryAnswer],
) -> Result<(Expr, f64), PipelineError> {
    if queries.is_empty() || queries.len() != answers.len() {
        return Err(PipelineError::Precondition(format!(
            "{} queries but {} answers",
            queries.len(),
            answers.len()
        )));
    }
    if !network.ordering.is_empty() && network.ordering.len() != queries.len() {
        return Err(PipelineError::Precondition(
            "one query per network node is required".into(),
        ));
    }
    let factors: Vec<Expr> = queries
        .iter()
        .zip(answers)
        .map(|(q, a)| query_value_expr(q, a))
        .collect::<Result<_, _>>()?;
    let mut factors = factors.into_iter();
    let population = factors.next().expect("non-empty");
    let equation = match Expr::product(factors) {
        Some(rest) => Expr::mul(population, rest),
        None => population,
    };
    let raw_k = equation.evaluate(&crate::expr::NoBindings)?;
    Ok((equation, raw_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{FnBackend, ScriptedBackend, ScriptedFixture};
    use crate::model::{validate_network, DisclosureCategory as Cat};

    fn ctx3() -> DocumentContext {
        DocumentContext::new(
            "p1",
            "I live in Townsbridge, I work in tech and I am a woman.",
            Some("Townsbridge".into()),
            vec![
                Disclosure::new("loc", "Townsbridge", Cat::Location),
                Disclosure::new("job", "work in tech", Cat::Occupation),
                Disclosure::new("gender", "woman", Cat::Gender),
            ],
        )
        .unwrap()
    }

    fn list(spans: &[&str]) -> String {
        let inner: String = spans.iter().map(|s| format!("<answer>{s}</answer>")).collect();
        format!("<list>{inner}</list>")
    }

    /// Responder keyed on template and the hint, answering every stage.
    fn happy(req: &CompletionRequest) -> Result<String, BackendError> {
        Ok(match (&req.template, &req.hint) {
            (TemplateId::DisclosureSelection, TaskHint::Selection { candidates }) => {
                list(&candidates.iter().map(|d| d.span.as_str()).collect::<Vec<_>>())
            }
            (TemplateId::ProbabilityOrdering, TaskHint::Ordering { subset }) => {
                list(&subset.iter().map(|d| d.span.as_str()).collect::<Vec<_>>())
            }
            (TemplateId::ConditionalDependencies, TaskHint::Dependencies { target, priors }) => {
                if target.span == "woman" {
                    list(&["work in tech"])
                } else {
                    list(&[priors[0].span.as_str()])
                }
            }
            (TemplateId::PopulationQuery, _) => "<query>population of Townsbridge</query>".into(),
            (TemplateId::ProbabilityQuery, TaskHint::QueryGeneration { semantics, .. }) => {
                format!("<query>percentage of people THAT {}</query>", semantics.target[0].value)
            }
            (TemplateId::GeneralizationSubquery, _) => "<query>same</query>".into(),
            (TemplateId::DiscreteSubquery, _) => "<list><answer>same</answer></list>".into(),
            (
                TemplateId::QueryEstimation,
                TaskHint::Estimation {
                    kind: QueryKind::Population,
                    ..
                },
            ) => "<answer>10000</answer><score>0.9</score>".into(),
            (TemplateId::QueryEstimation, TaskHint::Estimation { semantics, .. }) => {
                if semantics.target[0].value == "woman" {
                    "<answer>0.2</answer><score>0.9</score>".into()
                } else {
                    "<answer>0.5</answer><score>0.9</score>".into()
                }
            }
            other => panic!("unexpected request {other:?}"),
        })
    }

    fn cfg() -> RunConfig {
        RunConfig::default()
    }

    #[test]
    fn happy_path_run() {
        let backend = FnBackend::new(happy);
        let result = Pipeline::new(&backend, cfg()).run(&ctx3()).unwrap();
        assert_eq!(result.k_hat, 1000);
        assert_eq!(result.equation, "(10000 * (0.5 * 0.2))");
        assert_eq!(result.network.parents_of(&"gender".into()), ["job".into()].into());
        assert!(validate_network(&result.network, &ctx3()).is_empty());
        let reparsed = Expr::parse(&result.equation)
            .unwrap()
            .evaluate(&crate::expr::NoBindings)
            .unwrap();
        assert_eq!(reparsed, result.raw_k);
        assert_eq!(
            result.queries[2].semantics.conditions,
            vec![ctx3().disclosures[1].fact()]
        );
    }

    #[test]
    fn selection_retries_after_hallucinated_span() {
        let backend = FnBackend::new(|req| {
            Ok(if req.messages.len() == 1 {
                list(&["Townsbridge", "a dog"])
            } else {
                list(&["Townsbridge"])
            })
        });
        let p = Pipeline::new(&backend, cfg());
        let mut tx = Vec::new();
        let ids = p.select_disclosures(&ctx3(), &mut tx).unwrap();
        assert_eq!(ids, vec![DisclosureId::from("loc")]);
        assert_eq!(tx[0].retries, 1);
        assert!(tx[0].rejected[0].reason.contains("a dog"));
    }

    #[test]
    fn selection_of_empty_context_is_precondition() {
        let ctx = DocumentContext::new("x", "text", None, vec![]).unwrap();
        let backend = FnBackend::constant("<list></list>");
        let err = Pipeline::new(&backend, cfg())
            .select_disclosures(&ctx, &mut Vec::new())
            .unwrap_err();
        assert!(matches!(err, PipelineError::Precondition(_)));
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn empty_selection_is_stage_error() {
        let backend = FnBackend::constant("<list></list>");
        let err = Pipeline::new(&backend, cfg()).run(&ctx3()).unwrap_err();
        assert!(matches!(err.error, PipelineError::Exhausted { ref stage, attempts: 4, .. } if stage == "selection"));
        assert_eq!(err.transcript.len(), 1);
        assert_eq!(err.transcript[0].retries, 3);
    }

    #[test]
    fn ordering_follows_completion() {
        let backend = FnBackend::constant(list(&["woman", "Townsbridge", "work in tech"]));
        let ids: Vec<DisclosureId> = ["loc", "job", "gender"].map(DisclosureId::from).to_vec();
        let order = Pipeline::new(&backend, cfg())
            .order_disclosures(&ctx3(), &ids, &mut Vec::new())
            .unwrap();
        assert_eq!(order, ["gender", "loc", "job"].map(DisclosureId::from).to_vec());
    }

    #[test]
    fn singleton_ordering_needs_no_call() {
        let backend = FnBackend::constant("unused");
        let order = Pipeline::new(&backend, cfg())
            .order_disclosures(&ctx3(), &["job".into()], &mut Vec::new())
            .unwrap();
        assert_eq!(order, vec![DisclosureId::from("job")]);
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn duplicate_ordering_is_retried_then_fails() {
        let backend = FnBackend::constant(list(&["woman", "woman", "Townsbridge"]));
        let ids: Vec<DisclosureId> = ["loc", "job", "gender"].map(DisclosureId::from).to_vec();
        let mut tx = Vec::new();
        let err = Pipeline::new(&backend, cfg())
            .order_disclosures(&ctx3(), &ids, &mut tx)
            .unwrap_err();
        assert!(matches!(err, PipelineError::Exhausted { .. }));
        assert_eq!(backend.calls(), 4);
        assert!(tx[0].rejected.iter().all(|r| r.reason.contains("more than once")));
    }

    #[test]
    fn structural_modes_skip_backend() {
        let backend = FnBackend::constant("unused");
        let ids: Vec<DisclosureId> = ["loc", "job", "gender"].map(DisclosureId::from).to_vec();
        let mut c = cfg();
        c.network_mode = NetworkMode::FullyConnected;
        let net = Pipeline::new(&backend, c.clone())
            .assign_parents(&ctx3(), &ids, &mut Vec::new())
            .unwrap();
        assert_eq!(net.parents_of(&"gender".into()), ["loc".into(), "job".into()].into());
        assert_eq!(net.parents_of(&"job".into()), ["loc".into()].into());
        c.network_mode = NetworkMode::FullyDisjoint;
        let net = Pipeline::new(&backend, c)
            .assign_parents(&ctx3(), &ids, &mut Vec::new())
            .unwrap();
        assert!(ids.iter().all(|id| net.parents_of(id).is_empty()));
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn non_prior_parent_is_rejected() {
        let backend = FnBackend::new(|req| {
            Ok(if req.messages.len() == 1 {
                list(&["woman"])
            } else {
                list(&["Townsbridge"])
            })
        });
        let ids: Vec<DisclosureId> = ["loc", "job"].map(DisclosureId::from).to_vec();
        let mut tx = Vec::new();
        let net = Pipeline::new(&backend, cfg())
            .assign_parents(&ctx3(), &ids, &mut tx)
            .unwrap();
        assert_eq!(net.parents_of(&"job".into()), ["loc".into()].into());
        assert!(tx[0].rejected[0].reason.contains("not one of the prior"));
    }

    #[test]
    fn population_query_kind_is_guarded() {
        let backend = FnBackend::new(|req| {
            Ok(if req.messages.len() == 1 {
                "<query>percentage of people in Townsbridge</query>".into()
            } else {
                "<query>population of Townsbridge</query>".into()
            })
        });
        let net = BayesNetwork::new(vec!["loc".into()], BTreeMap::new());
        let mut tx = Vec::new();
        let qs = Pipeline::new(&backend, cfg())
            .generate_queries(&ctx3(), &net, &mut tx)
            .unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].kind, QueryKind::Population);
        assert_eq!(tx[0].retries, 1);
    }

    #[test]
    fn query_history_is_passed_along() {
        let backend = FnBackend::new(|req| {
            Ok(match req.template {
                TemplateId::PopulationQuery => "<query>population of Townsbridge</query>".into(),
                _ => {
                    assert!(req.last_user_content().contains("- population of Townsbridge"));
                    "<query>percentage of Townsbridge residents THAT work in tech</query>".into()
                }
            })
        });
        let mut c = cfg();
        c.query_history = true;
        let net = BayesNetwork::new(vec!["loc".into(), "job".into()], BTreeMap::new());
        let qs = Pipeline::new(&backend, c)
            .generate_queries(&ctx3(), &net, &mut Vec::new())
            .unwrap();
        assert_eq!(qs[1].text, "percentage of Townsbridge residents THAT work in tech");
    }

    fn pct(text: &str) -> QueryNode {
        QueryNode::leaf("d".into(), QueryKind::Percentage, text, QuerySemantics::default())
    }

    #[test]
    fn age_range_decomposition() {
        let backend = FnBackend::constant(
            "<list><answer>percentage of people THAT are 25 to 29 years old</answer><type>percentage</type></list>\
             <math>s1 / 5</math>",
        );
        let q = Pipeline::new(&backend, cfg())
            .decompose_subqueries(&pct("percentage of people THAT are 26 years old"), &mut Vec::new())
            .unwrap();
        assert_eq!(q.combine.as_deref(), Some("(s1 / 5)"));
        assert_eq!(q.subqueries.len(), 1);
    }

    #[test]
    fn discrete_decomposition_after_generalization_declines() {
        let backend = FnBackend::new(|req| {
            Ok(match req.template {
                TemplateId::GeneralizationSubquery => "<query>unchanged</query>".into(),
                _ => "<list><answer>percentage of renters THAT own property</answer><type>percentage</type>\
                      <answer>percentage of renters THAT live with parents</answer><type>percentage</type></list>\
                      <math>s1 + s2</math>"
                    .into(),
            })
        });
        let q = Pipeline::new(&backend, cfg())
            .decompose_subqueries(
                &pct("percentage of renters THAT own property OR live with parents"),
                &mut Vec::new(),
            )
            .unwrap();
        assert_eq!(q.combine.as_deref(), Some("(s1 + s2)"));
        assert_eq!(q.subqueries.len(), 2);
    }

    #[test]
    fn declined_decomposition_is_unchanged() {
        let backend = FnBackend::new(|req| {
            Ok(match req.template {
                TemplateId::GeneralizationSubquery => "<query>x</query>".into(),
                _ => "<list><answer>x</answer></list>".into(),
            })
        });
        let q = pct("percentage of nurses THAT work nights");
        assert_eq!(
            Pipeline::new(&backend, cfg())
                .decompose_subqueries(&q, &mut Vec::new())
                .unwrap(),
            q
        );
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn bad_combine_is_retried() {
        let backend = FnBackend::new(|req| {
            Ok(if req.messages.len() == 1 {
                "<list><answer>percentage of a</answer></list><math>((s1 / 5</math>".into()
            } else if req.messages.len() == 3 {
                "<list><answer>percentage of a</answer></list><math>s1 + s2</math>".into()
            } else {
                "<list><answer>percentage of a</answer></list><math>s1 / 5</math>".into()
            })
        });
        let mut tx = Vec::new();
        let q = Pipeline::new(&backend, cfg())
            .decompose_subqueries(&pct("percentage of b"), &mut tx)
            .unwrap();
        assert_eq!(q.combine.as_deref(), Some("(s1 / 5)"));
        assert_eq!(tx[0].retries, 2);
    }

    #[test]
    fn estimate_examples() {
        let backend = FnBackend::constant("<answer>0.25</answer><score>0.9</score>");
        let a = Pipeline::new(&backend, cfg())
            .estimate_answer(&pct("percentage of a"), &mut Vec::new())
            .unwrap();
        assert_eq!((a.value, a.confidence), (0.25, 0.9));

        let backend = FnBackend::new(|req| {
            Ok(if req.messages.len() == 1 {
                "<answer>3.5</answer>".into()
            } else {
                "<answer>0.35</answer><score>1</score>".into()
            })
        });
        let mut tx = Vec::new();
        let a = Pipeline::new(&backend, cfg())
            .estimate_answer(&pct("percentage of a"), &mut tx)
            .unwrap();
        assert_eq!(a.value, 0.35);
        assert!(tx[0].rejected[0].reason.contains("out of bounds"));

        let mut c = cfg();
        c.simplification = Simplification::None;
        let backend = FnBackend::constant("<answer>120000</answer>");
        let q = QueryNode::leaf(
            "d".into(),
            QueryKind::Population,
            "population of x",
            QuerySemantics::default(),
        );
        let a = Pipeline::new(&backend, c).estimate_answer(&q, &mut Vec::new()).unwrap();
        assert_eq!((a.value, a.confidence), (120000.0, 1.0));
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn missing_score_reprompts_once_under_threshold() {
        let backend = FnBackend::constant("<answer>0.4</answer>");
        let mut tx = Vec::new();
        let a = Pipeline::new(&backend, cfg())
            .estimate_answer(&pct("percentage of a"), &mut tx)
            .unwrap();
        assert_eq!(a.confidence, 1.0);
        assert_eq!(backend.calls(), 2);
        assert_eq!(tx[0].retries, 1);
    }

    #[test]
    fn threshold_review() {
        let a = Answer::new(0.3, QueryKind::Percentage, 0.9, "x").unwrap();
        let backend = FnBackend::constant("unused");
        let (q, b) = Pipeline::new(&backend, cfg())
            .review_and_simplify(&pct("percentage of a"), a.clone(), &mut Vec::new())
            .unwrap();
        assert_eq!((q.text.as_str(), &b), ("percentage of a", &a));
        assert_eq!(backend.calls(), 0);

        let low = Answer::new(0.3, QueryKind::Percentage, 0.4, "x").unwrap();
        let backend = FnBackend::new(|req| {
            Ok(match req.template {
                TemplateId::SimplifyQuery => "<query>percentage of people THAT are nurses</query>".into(),
                _ => "<answer>0.1</answer><score>0.8</score>".into(),
            })
        });
        let (q, b) = Pipeline::new(&backend, cfg())
            .review_and_simplify(&pct("percentage of a"), low, &mut Vec::new())
            .unwrap();
        assert_eq!(q.text, "percentage of people THAT are nurses");
        assert_eq!((b.value, b.confidence, b.simplified), (0.1, 0.8, true));
    }

    #[test]
    fn simplification_rounds_are_capped() {
        let low = Answer::new(0.3, QueryKind::Percentage, 0.1, "x").unwrap();
        let backend = FnBackend::new(|req| {
            Ok(match req.template {
                TemplateId::SimplifyQuery => "<query>percentage of b</query>".into(),
                _ => "<answer>0.2</answer><score>0.1</score>".into(),
            })
        });
        let (_, b) = Pipeline::new(&backend, cfg())
            .review_and_simplify(&pct("percentage of a"), low, &mut Vec::new())
            .unwrap();
        assert_eq!(backend.calls(), 2);
        assert!(b.simplified && b.confidence == 0.1);
    }

    #[test]
    fn evaluator_review() {
        let mut c = cfg();
        c.simplification = Simplification::Evaluator;
        let a = Answer::new(0.3, QueryKind::Percentage, 0.2, "x").unwrap();
        let backend = FnBackend::constant("Looks fine. <answer>Yes</answer>");
        let (_, b) = Pipeline::new(&backend, c.clone())
            .review_and_simplify(&pct("percentage of a"), a.clone(), &mut Vec::new())
            .unwrap();
        assert_eq!(b, a);

        let backend = FnBackend::new(|req| {
            Ok(match req.template {
                TemplateId::EvaluateAnswer => "<answer>No</answer>".into(),
                TemplateId::SimplifyQuery => "<query>percentage of b</query>".into(),
                _ => "<answer>0.5</answer>".into(),
            })
        });
        let (q, b) = Pipeline::new(&backend, c)
            .review_and_simplify(&pct("percentage of a"), a, &mut Vec::new())
            .unwrap();
        assert_eq!((q.text.as_str(), b.value, b.simplified), ("percentage of b", 0.5, true));
    }

    fn leaf(v: f64, kind: QueryKind) -> QueryAnswer {
        QueryAnswer::Leaf(Answer::new(v, kind, 1.0, "t").unwrap())
    }

    #[test]
    fn recombine_examples() {
        let pop = QueryNode::leaf(
            "a".into(),
            QueryKind::Population,
            "population",
            QuerySemantics::default(),
        );
        let qs = vec![pop.clone(), pct("percentage of b"), pct("percentage of c")];
        let ans = vec![
            leaf(10000.0, QueryKind::Population),
            leaf(0.5, QueryKind::Percentage),
            leaf(0.2, QueryKind::Percentage),
        ];
        let (eq, raw) = recombine(&BayesNetwork::default(), &qs, &ans).unwrap();
        assert_eq!(eq.render(), "(10000 * (0.5 * 0.2))");
        assert!((raw - 1000.0).abs() < 1e-9);

        let mut split = pct("percentage of age");
        split.subqueries = vec![pct("percentage of band")];
        split.combine = Some("(s1 / 5)".into());
        let qs = vec![pop, split, pct("percentage of c")];
        let ans = vec![
            leaf(1000.0, QueryKind::Population),
            QueryAnswer::Parts(vec![Answer::new(0.25, QueryKind::Percentage, 1.0, "t").unwrap()]),
            leaf(0.5, QueryKind::Percentage),
        ];
        let (eq, raw) = recombine(&BayesNetwork::default(), &qs, &ans).unwrap();
        assert!((raw - 25.0).abs() < 1e-9);
        assert_eq!(
            Expr::parse(&eq.render())
                .unwrap()
                .evaluate(&crate::expr::NoBindings)
                .unwrap(),
            raw
        );
    }

    #[test]
    fn recombine_division_by_zero() {
        let pop = QueryNode::leaf(
            "a".into(),
            QueryKind::Population,
            "population",
            QuerySemantics::default(),
        );
        let mut split = pct("percentage of x");
        split.subqueries = vec![pct("percentage of y"), pct("percentage of z")];
        split.combine = Some("s1 / (s2 - s2)".into());
        let parts = QueryAnswer::Parts(vec![
            Answer::new(0.5, QueryKind::Percentage, 1.0, "t").unwrap(),
            Answer::new(0.5, QueryKind::Percentage, 1.0, "t").unwrap(),
        ]);
        let err = recombine(
            &BayesNetwork::default(),
            &[pop, split],
            &[leaf(10.0, QueryKind::Population), parts],
        )
        .unwrap_err();
        assert_eq!(err, PipelineError::Eval(EvalError::DivisionByZero));
    }

    #[test]
    fn baselines() {
        let mut c = cfg();
        c.strategy = Strategy::Cot;
        let backend = FnBackend::constant("Step by step... <answer>1200</answer>");
        assert_eq!(
            Pipeline::new(&backend, c.clone()).run_baseline(&ctx3()).unwrap().k_hat,
            1200
        );

        c.strategy = Strategy::Pot;
        let backend = FnBackend::constant("<math>500000000 * 0.001 * 0.01</math>");
        let r = Pipeline::new(&backend, c.clone()).run_baseline(&ctx3()).unwrap();
        assert_eq!(r.k_hat, 5000);
        assert!(r.network.ordering.is_empty() && r.queries.is_empty());

        c.strategy = Strategy::FewShot;
        let backend = FnBackend::constant("about a thousand");
        let err = Pipeline::new(&backend, c).run_baseline(&ctx3()).unwrap_err();
        assert!(matches!(err.error, PipelineError::Exhausted { .. }));
        assert_eq!(backend.calls(), 4);
    }

    #[test]
    fn run_rejects_baseline_strategy() {
        let mut c = cfg();
        c.strategy = Strategy::Pot;
        let backend = FnBackend::constant("x");
        assert!(matches!(
            Pipeline::new(&backend, c).run(&ctx3()).unwrap_err().error,
            PipelineError::Precondition(_)
        ));
    }

    #[test]
    fn concurrency_does_not_change_result() {
        let recorder = FnBackend::new(happy);
        let first = Pipeline::new(&recorder, cfg()).run(&ctx3()).unwrap();
        let scripted = ScriptedBackend::new(recorder.recorded(false));
        for n in [1, 2, 8] {
            let mut c = cfg();
            c.concurrency = n;
            assert_eq!(Pipeline::new(&scripted, c).run(&ctx3()).unwrap(), first);
        }
        let empty = ScriptedBackend::new(ScriptedFixture::default());
        assert!(matches!(
            Pipeline::new(&empty, cfg()).run(&ctx3()).unwrap_err().error,
            PipelineError::Backend {
                source: BackendError::FixtureMiss { .. },
                ..
            }
        ));
    }

    #[test]
    fn observer_sees_every_entry() {
        let seen = Mutex::new(Vec::new());
        let obs = |t: &StageTranscript| seen.lock().unwrap().push(t.stage.clone());
        let backend = FnBackend::new(happy);
        let r = Pipeline::new(&backend, cfg()).with_observer(&obs).run(&ctx3()).unwrap();
        let mut seen = seen.into_inner().unwrap();
        let mut stages: Vec<String> = r.transcript.iter().map(|t| t.stage.clone()).collect();
        seen.sort();
        stages.sort();
        assert_eq!(seen, stages);
    }
}
