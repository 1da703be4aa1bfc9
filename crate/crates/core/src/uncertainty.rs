use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{range_hit, EvalPair, MetricsError};
use crate::model::{
    normalize_k, Answer, BayesNetwork, DocumentContext, EstimateResult, QueryAnswer, QueryKind, QueryNode,
    StageTranscript, Strategy,
};
use crate::pipeline::{query_value_expr, recombine, Pipeline, PipelineError, RunFailure};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UncertaintyError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sample k values must be finite and at least 1, got {0}")]
    InvalidSample(f64),
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("{} of the runs failed: {}", .0.len(), describe_failures(.0))]
    RunsFailed(Vec<(u32, String)>),
    #[error("sample {sample}: {source}")]
    Sample {
        sample: u32,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("post ids differ: {0}")]
    IdMismatch(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn describe_failures(fs: &[(u32, String)]) -> String {
    fs.iter()
        .map(|(r, e)| format!("run {r}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Mean that is exact when every sample is equal.
pub(crate) fn stable_mean(xs: &[f64]) -> f64 {
    let first = xs[0];
    first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64
}

/// Unbiased (n - 1) sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = stable_mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Repeated k estimates for one post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEnsemble {
    pub post_id: String,
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub sd: f64,
    pub cv: f64,
}

impl RunEnsemble {
    pub fn from_samples(post_id: impl Into<String>, samples: Vec<f64>) -> Result<Self, UncertaintyError> {
        if samples.len() < 2 {
            return Err(UncertaintyError::TooFewSamples {
                needed: 2,
                got: samples.len(),
            });
        }
        if let Some(&bad) = samples.iter().find(|k| !(k.is_finite() && **k >= 1.0)) {
            return Err(UncertaintyError::InvalidSample(bad));
        }
        let mean = stable_mean(&samples);
        let sd = sample_variance(&samples).sqrt();
        Ok(RunEnsemble {
            post_id: post_id.into(),
            samples,
            mean,
            sd,
            cv: sd / mean,
        })
    }
}

/// A closed real interval of plausible k values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KInterval {
    pub lo: f64,
    pub hi: f64,
}

impl KInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, UncertaintyError> {
        if !(lo.is_finite() && hi.is_finite() && lo >= 1.0 && hi >= lo) {
            return Err(UncertaintyError::InvalidInterval { lo, hi });
        }
        Ok(KInterval { lo, hi })
    }

    pub fn contains(&self, k: f64) -> bool {
        self.lo <= k && k <= self.hi
    }

    /// Number of integers inside the interval.
    pub fn integer_count(&self) -> u64 {
        integers_between(self.lo, self.hi)
    }
}

fn integers_between(lo: f64, hi: f64) -> u64 {
    let (a, b) = (lo.ceil(), hi.floor());
    if b < a {
        0
    } else {
        (b - a) as u64 + 1
    }
}

/// `[max(1, mean - 2 sd), mean + 2 sd]`.
pub fn k_interval(ensemble: &RunEnsemble) -> KInterval {
    let lo = (ensemble.mean - 2.0 * ensemble.sd).max(1.0);
    KInterval {
        lo,
        hi: ensemble.mean + 2.0 * ensemble.sd,
    }
}

/// An ensemble along with the runs it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reevaluation {
    pub ensemble: RunEnsemble,
    pub interval: KInterval,
    pub runs: Vec<EstimateResult>,
}

/// Runs the full pipeline `runs` times, run `r` drawing sample index `r`.
pub fn reevaluate(pipeline: &Pipeline<'_>, ctx: &DocumentContext, runs: u32) -> Result<Reevaluation, UncertaintyError> {
    if runs < 2 {
        return Err(UncertaintyError::TooFewSamples {
            needed: 2,
            got: runs as usize,
        });
    }
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for r in 0..runs {
        let p = pipeline.clone().with_sample(r);
        let out: Result<EstimateResult, RunFailure> = if p.config().strategy == Strategy::Branch {
            p.run(ctx)
        } else {
            p.run_baseline(ctx)
        };
        match out {
            Ok(res) => results.push(res),
            Err(f) => failures.push((r, f.error.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(UncertaintyError::RunsFailed(failures));
    }
    let ks = results.iter().map(|r| r.k_hat as f64).collect();
    let ensemble = RunEnsemble::from_samples(ctx.document_id.clone(), ks)?;
    let interval = k_interval(&ensemble);
    Ok(Reevaluation {
        ensemble,
        interval,
        runs: results,
    })
}

/// Per-query statistics over estimation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySamples {
    pub target: String,
    pub kind: QueryKind,
    /// Each leaf's sampled answers, outer index = leaf.
    pub leaf_samples: Vec<Vec<f64>>,
    pub leaf_means: Vec<f64>,
    pub leaf_variances: Vec<f64>,
    /// The query's combined value in each sample.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistency {
    pub post_id: String,
    pub samples: u32,
    /// k recombined from the per-leaf mean answers, before rounding.
    pub k_bar: f64,
    pub k_hat: u64,
    pub equation: String,
    pub network: BayesNetwork,
    pub queries: Vec<QueryNode>,
    /// Per-leaf mean answers, aligned with `queries`.
    pub answers: Vec<QueryAnswer>,
    pub per_query: Vec<QuerySamples>,
    /// Sum of the per-leaf sample variances.
    pub total_variance: f64,
    pub bounds: QueryBounds,
    pub transcript: Vec<StageTranscript>,
}

fn mean_answer(leaves: &[&Answer], m: usize) -> Result<Answer, PipelineError> {
    let values: Vec<f64> = leaves.iter().map(|a| a.value).collect();
    let conf: Vec<f64> = leaves.iter().map(|a| a.confidence).collect();
    let kind = leaves[0].kind;
    let mut a = Answer::new(
        stable_mean(&values),
        kind,
        stable_mean(&conf).clamp(0.0, 1.0),
        format!("mean of {m}"),
    )?;
    a.simplified = leaves.iter().any(|l| l.simplified);
    Ok(a)
}

/// Combines sampled answer sets for fixed queries: the per-leaf means are
/// recombined into k, and each query's per-sample values feed its bounds.
pub fn aggregate_samples(
    network: &BayesNetwork,
    queries: &[QueryNode],
    samples: &[Vec<QueryAnswer>],
) -> Result<(f64, String, Vec<QuerySamples>, Vec<QueryAnswer>), UncertaintyError> {
    if samples.len() < 2 {
        return Err(UncertaintyError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let m = samples.len();
    let mut per_query = Vec::new();
    let mut means = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let answers: Vec<&QueryAnswer> = samples
            .iter()
            .map(|s| {
                s.get(qi)
                    .ok_or_else(|| PipelineError::Precondition(format!("sample lacks an answer for `{}`", q.text)))
            })
            .collect::<Result<_, _>>()?;
        let leaves = answers[0].leaves().len();
        let mut leaf_samples = vec![Vec::with_capacity(m); leaves];
        let mut mean_leaves = Vec::with_capacity(leaves);
        for (j, slot) in leaf_samples.iter_mut().enumerate() {
            let column: Vec<&Answer> = answers
                .iter()
                .map(|a| {
                    a.leaves().get(j).ok_or_else(|| {
                        PipelineError::Precondition(format!("samples disagree on the shape of `{}`", q.text))
                    })
                })
                .collect::<Result<_, _>>()?;
            slot.extend(column.iter().map(|a| a.value));
            mean_leaves.push(mean_answer(&column, m)?);
        }
        let values = answers
            .iter()
            .map(|a| {
                Ok(query_value_expr(q, a)?
                    .evaluate(&crate::expr::NoBindings)
                    .map_err(PipelineError::from)?)
            })
            .collect::<Result<Vec<f64>, UncertaintyError>>()?;
        means.push(if q.is_decomposed() {
            QueryAnswer::Parts(mean_leaves)
        } else {
            QueryAnswer::Leaf(mean_leaves.remove(0))
        });
        per_query.push(QuerySamples {
            target: q.target.to_string(),
            kind: q.kind,
            leaf_means: leaf_samples.iter().map(|s| stable_mean(s)).collect(),
            leaf_variances: leaf_samples.iter().map(|s| sample_variance(s)).collect(),
            leaf_samples,
            values,
        });
    }
    let (equation, k_bar) = recombine(network, queries, &means)?;
    Ok((k_bar, equation.render(), per_query, means))
}

/// One elicitation pass, then `m` independent draws of the estimation and
/// review stages, recombined over per-leaf means.
pub fn self_consistency(
    pipeline: &Pipeline<'_>,
    ctx: &DocumentContext,
    m: u32,
) -> Result<SelfConsistency, UncertaintyError> {
    if m < 2 {
        return Err(UncertaintyError::TooFewSamples {
            needed: 2,
            got: m as usize,
        });
    }
    if pipeline.config().strategy != Strategy::Branch {
        return Err(PipelineError::Precondition("self-consistency needs the branch strategy".into()).into());
    }
    pipeline.config().validate().map_err(PipelineError::from)?;
    let mut tx = Vec::new();
    let el = pipeline.elicit(ctx, &mut tx)?;
    let mut queries = None;
    let mut samples = Vec::new();
    for s in 0..m {
        let (updated, answers) = pipeline
            .answer_queries(&el.queries, s, &mut tx)
            .map_err(|source| UncertaintyError::Sample { sample: s, source })?;
        queries.get_or_insert(updated);
        samples.push(answers);
    }
    let queries = queries.expect("m >= 2");
    let (k_bar, equation, per_query, answers) = aggregate_samples(&el.network, &queries, &samples)?;
    let total_variance = per_query.iter().flat_map(|q| q.leaf_variances.iter()).sum();
    let bounds = query_interval_bounds(&per_query.iter().map(|q| (q.kind, q.values.clone())).collect::<Vec<_>>())?;
    Ok(SelfConsistency {
        post_id: ctx.document_id.clone(),
        samples: m,
        k_bar,
        k_hat: normalize_k(k_bar).map_err(PipelineError::from)?,
        equation,
        network: el.network,
        queries,
        answers,
        per_query,
        total_variance,
        bounds,
        transcript: tx,
    })
}

impl SelfConsistency {
    /// The aggregate as a single estimate over the mean answers.
    pub fn estimate(&self) -> EstimateResult {
        EstimateResult {
            k_hat: self.k_hat,
            raw_k: self.k_bar,
            equation: self.equation.clone(),
            queries: self.queries.clone(),
            answers: self.answers.clone(),
            network: self.network.clone(),
            transcript: self.transcript.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueBounds {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBounds {
    pub per_query: Vec<ValueBounds>,
    pub k_lo: f64,
    pub k_hi: f64,
}

/// Bounds for one query from its mean and sample variance.
///
/// The lower bound falls back to the smallest sample when `mean - 2 sqrt(var)`
/// is not positive; percentage upper bounds are capped at 1.
pub fn value_bounds(kind: QueryKind, mean: f64, variance: f64, min_sample: f64) -> ValueBounds {
    let spread = 2.0 * variance.sqrt();
    let lower = mean - spread;
    let lo = if lower > 0.0 { lower } else { min_sample };
    let hi = match kind {
        QueryKind::Percentage => (mean + spread).min(1.0),
        QueryKind::Population => mean + spread,
    };
    ValueBounds { lo, hi }
}

/// Per-query bounds from sampled values and their products as k bounds.
pub fn query_interval_bounds(samples: &[(QueryKind, Vec<f64>)]) -> Result<QueryBounds, UncertaintyError> {
    let mut per_query = Vec::with_capacity(samples.len());
    for (kind, xs) in samples {
        if xs.len() < 2 {
            return Err(UncertaintyError::TooFewSamples {
                needed: 2,
                got: xs.len(),
            });
        }
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        per_query.push(value_bounds(*kind, stable_mean(xs), sample_variance(xs), min));
    }
    let k_lo = per_query.iter().map(|b| b.lo).product();
    let k_hi = per_query.iter().map(|b| b.hi).product();
    Ok(QueryBounds { per_query, k_lo, k_hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of the integers in `pred` against those in
/// `gold`, by counting rather than enumerating.
///
/// Two intervals that both hold no integer score 1 when they overlap and 0
/// otherwise.
pub fn interval_prf(pred: &KInterval, gold: &KInterval) -> Prf {
    let np = pred.integer_count();
    let ng = gold.integer_count();
    let (lo, hi) = (pred.lo.max(gold.lo), pred.hi.min(gold.hi));
    if np == 0 && ng == 0 {
        let v = if lo <= hi { 1.0 } else { 0.0 };
        return Prf {
            precision: v,
            recall: v,
            f1: v,
        };
    }
    let tp = if lo <= hi { integers_between(lo, hi) } else { 0 };
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Prf {
        precision: ratio(tp, np),
        recall: ratio(tp, ng),
        f1: ratio(2 * tp, np + ng),
    }
}

/// Mean per-post F1.
pub fn macro_f1(pairs: &[(KInterval, KInterval)]) -> Result<f64, UncertaintyError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    Ok(pairs.iter().map(|(p, g)| interval_prf(p, g).f1).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub posts: Vec<String>,
    /// `None` when the stratum is empty.
    pub range_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub mean_cv: f64,
    pub low: Stratum,
    pub high: Stratum,
}

/// Splits posts at the mean CV, posts exactly at the mean going low, and
/// reports range accuracy at `a` within each side.
pub fn stratify_by_variance(
    ensembles: &[RunEnsemble],
    pairs: &[EvalPair],
    a: f64,
) -> Result<Stratification, UncertaintyError> {
    if ensembles.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let by_id: BTreeMap<&str, &EvalPair> = pairs.iter().map(|p| (p.post_id.as_str(), p)).collect();
    if by_id.len() != pairs.len() || by_id.len() != ensembles.len() {
        return Err(UncertaintyError::IdMismatch(
            "ensembles and pairs must cover the same posts once".into(),
        ));
    }
    let mean_cv = ensembles.iter().map(|e| e.cv).sum::<f64>() / ensembles.len() as f64;
    let mut low = (Vec::new(), 0usize);
    let mut high = (Vec::new(), 0usize);
    for e in ensembles {
        let p = by_id
            .get(e.post_id.as_str())
            .ok_or_else(|| UncertaintyError::IdMismatch(format!("no pair for `{}`", e.post_id)))?;
        let hit = range_hit(p.k_hat as f64, p.k_star as f64, a)?;
        let side = if e.cv <= mean_cv { &mut low } else { &mut high };
        side.0.push(e.post_id.clone());
        side.1 += hit as usize;
    }
    let finish = |(posts, hits): (Vec<String>, usize)| {
        let range_accuracy = if posts.is_empty() {
            None
        } else {
            Some(hits as f64 / posts.len() as f64)
        };
        Stratum { posts, range_accuracy }
    };
    Ok(Stratification {
        mean_cv,
        low: finish(low),
        high: finish(high),
    })
}
