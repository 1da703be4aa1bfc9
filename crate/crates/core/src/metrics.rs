use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BayesNetwork, DisclosureId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("k values must be at least 1, got {0}")]
    InvalidK(f64),
    #[error("range hyperparameter must exceed 1, got {0}")]
    InvalidRange(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("correlation undefined: zero variance after ranking")]
    ZeroVariance,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("reference value must be positive, got {0}")]
    NonPositiveTruth(f64),
    #[error("post ids differ between systems: {0}")]
    IdMismatch(String),
    #[error("bootstrap needs at least one iteration")]
    ZeroIterations,
    #[error("no pairs to evaluate")]
    Empty,
}

/// A prediction paired with its gold value for one post.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub post_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub k_hat: u64,
    pub k_star: u64,
}

impl EvalPair {
    pub fn new(post_id: impl Into<String>, k_hat: u64, k_star: u64) -> Result<Self, MetricsError> {
        for k in [k_hat, k_star] {
            if k < 1 {
                return Err(MetricsError::InvalidK(k as f64));
            }
        }
        Ok(EvalPair {
            post_id: post_id.into(),
            domain: None,
            k_hat,
            k_star,
        })
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }
}

fn check_k(k: f64) -> Result<(), MetricsError> {
    if k.is_finite() && k >= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidK(k))
    }
}

/// `|log2 k_hat - log2 k_star|`.
pub fn log_error(k_hat: f64, k_star: f64) -> Result<f64, MetricsError> {
    check_k(k_hat)?;
    check_k(k_star)?;
    Ok((k_hat.log2() - k_star.log2()).abs())
}

pub fn mean_log_error(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for p in pairs {
        total += log_error(p.k_hat as f64, p.k_star as f64)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Whether `k_hat / a <= k_star <= a * k_hat`, both ends inclusive.
pub fn range_hit(k_hat: f64, k_star: f64, a: f64) -> Result<bool, MetricsError> {
    check_k(k_hat)?;
    check_k(k_star)?;
    if !a.is_finite() || a <= 1.0 {
        return Err(MetricsError::InvalidRange(a));
    }
    // Multiplied through to keep the lower boundary exact.
    Ok(k_hat <= a * k_star && k_star <= a * k_hat)
}

/// Fraction of pairs that are range hits.
pub fn range_metric(pairs: &[EvalPair], a: f64) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut hits = 0usize;
    for p in pairs {
        if range_hit(p.k_hat as f64, p.k_star as f64, a)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

fn check_pair_input(xs: &[f64], ys: &[f64]) -> Result<(), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooShort {
            needed: 2,
            got: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// One-based ranks with ties sharing the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ as the Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check_pair_input(xs, ys)?;
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's τ-b, computed in O(n log n).
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check_pair_input(xs, ys)?;
    let n = xs.len() as u64;
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs_sorted: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let tx = tied_pairs(&xs_sorted);
    let txy = tied_pairs(&pairs);
    let mut y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(y.len());
    let swaps = merge_count(&mut y, &mut buf);
    let ty = tied_pairs(&y);
    let n0 = n * (n - 1) / 2;
    let numer = n0 as f64 - tx as f64 - ty as f64 + txy as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    if denom == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// Spearman's ρ between predicted and gold k.
pub fn spearman_of_pairs(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    let xs: Vec<f64> = pairs.iter().map(|p| p.k_hat as f64).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.k_star as f64).collect();
    spearman_rho(&xs, &ys)
}

/// `|est - truth| / truth`.
pub fn percentage_error(est: f64, truth: f64) -> Result<f64, MetricsError> {
    if !truth.is_finite() || truth <= 0.0 {
        return Err(MetricsError::NonPositiveTruth(truth));
    }
    if !est.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    Ok((est - truth).abs() / truth)
}

/// Mean percentage error over `(estimate, truth)` rows.
pub fn mean_percentage_error(rows: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for &(est, truth) in rows {
        total += percentage_error(est, truth)?;
    }
    Ok(total / rows.len() as f64)
}

/// Structural Hamming distance over the nodes both networks contain.
///
/// Each unordered node pair whose edge state differs costs one, so an
/// addition, a deletion and a reversal are each a single step.
pub fn shd(n1: &BayesNetwork, n2: &BayesNetwork) -> usize {
    let a: BTreeSet<&DisclosureId> = n1.ordering.iter().collect();
    let shared: BTreeSet<&DisclosureId> = n2.ordering.iter().filter(|id| a.contains(id)).collect();
    let restrict = |net: &BayesNetwork| -> BTreeSet<(DisclosureId, DisclosureId)> {
        net.edges()
            .into_iter()
            .filter(|(p, c)| shared.contains(p) && shared.contains(c))
            .collect()
    };
    let e1 = restrict(n1);
    let e2 = restrict(n2);
    let state = |edges: &BTreeSet<(DisclosureId, DisclosureId)>, u: &DisclosureId, v: &DisclosureId| {
        (
            edges.contains(&(u.clone(), v.clone())),
            edges.contains(&(v.clone(), u.clone())),
        )
    };
    let nodes: Vec<&DisclosureId> = shared.into_iter().collect();
    let mut distance = 0;
    for (i, u) in nodes.iter().enumerate() {
        for v in &nodes[i + 1..] {
            if state(&e1, u, v) != state(&e2, u, v) {
                distance += 1;
            }
        }
    }
    distance
}

/// Mean share of earlier variables left out of each parent set, over the
/// second and later positions.
pub fn independence_rate(network: &BayesNetwork) -> Result<f64, MetricsError> {
    let n = network.ordering.len();
    if n < 2 {
        return Err(MetricsError::TooShort { needed: 2, got: n });
    }
    let mut total = 0.0;
    for i in 1..n {
        let priors: BTreeSet<&DisclosureId> = network.ordering[..i].iter().collect();
        let kept = network
            .parents_of(&network.ordering[i])
            .iter()
            .filter(|p| priors.contains(p))
            .count();
        total += 1.0 - kept as f64 / i as f64;
    }
    Ok(total / (n - 1) as f64)
}

/// Score used to compare two systems in the bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum PairMetric {
    /// Mean log error; lower is better.
    LogError,
    /// Range accuracy at `a`; higher is better.
    Range { a: f64 },
    /// Spearman's ρ; higher is better.
    Spearman,
}

impl PairMetric {
    fn higher_is_better(self) -> bool {
        !matches!(self, PairMetric::LogError)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub p_value: f64,
    pub iterations: u64,
    pub observed_a: f64,
    pub observed_b: f64,
}

const BOOTSTRAP_SHARDS: u64 = 16;

enum Scores {
    PerPost(Vec<f64>, Vec<f64>),
    Ranked(Vec<EvalPair>, Vec<EvalPair>),
}

impl Scores {
    fn evaluate(&self, idx: &[usize]) -> Option<(f64, f64)> {
        match self {
            Scores::PerPost(a, b) => {
                let n = idx.len() as f64;
                let sa: f64 = idx.iter().map(|&i| a[i]).sum();
                let sb: f64 = idx.iter().map(|&i| b[i]).sum();
                Some((sa / n, sb / n))
            }
            Scores::Ranked(a, b) => {
                let pick = |ps: &[EvalPair]| -> Vec<EvalPair> { idx.iter().map(|&i| ps[i].clone()).collect() };
                let ra = spearman_of_pairs(&pick(a)).ok()?;
                let rb = spearman_of_pairs(&pick(b)).ok()?;
                Some((ra, rb))
            }
        }
    }
}

fn align<'a>(a: &'a [EvalPair], b: &'a [EvalPair]) -> Result<Vec<(&'a EvalPair, &'a EvalPair)>, MetricsError> {
    let mut by_id: BTreeMap<&str, &EvalPair> = BTreeMap::new();
    for p in b {
        if by_id.insert(p.post_id.as_str(), p).is_some() {
            return Err(MetricsError::IdMismatch(format!("duplicate post `{}`", p.post_id)));
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(a.len());
    for p in a {
        if !seen.insert(p.post_id.as_str()) {
            return Err(MetricsError::IdMismatch(format!("duplicate post `{}`", p.post_id)));
        }
        let q = by_id
            .get(p.post_id.as_str())
            .ok_or_else(|| MetricsError::IdMismatch(format!("`{}` missing from second system", p.post_id)))?;
        out.push((p, *q));
    }
    if let Some(extra) = by_id.keys().find(|id| !seen.contains(*id)) {
        return Err(MetricsError::IdMismatch(format!("`{extra}` missing from first system")));
    }
    Ok(out)
}

/// Paired bootstrap over posts.
///
/// `p_value` is the fraction of resamples in which system A fails to beat
/// system B strictly. Resamples are split into fixed shards, each with its
/// own seeded stream, so the result does not depend on thread scheduling.
pub fn paired_bootstrap(
    system_a: &[EvalPair],
    system_b: &[EvalPair],
    metric: PairMetric,
    iterations: u64,
    seed: u64,
) -> Result<BootstrapOutcome, MetricsError> {
    if iterations == 0 {
        return Err(MetricsError::ZeroIterations);
    }
    let aligned = align(system_a, system_b)?;
    if aligned.is_empty() {
        return Err(MetricsError::Empty);
    }
    let scores = match metric {
        PairMetric::LogError => {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (pa, pb) in &aligned {
                a.push(log_error(pa.k_hat as f64, pa.k_star as f64)?);
                b.push(log_error(pb.k_hat as f64, pb.k_star as f64)?);
            }
            Scores::PerPost(a, b)
        }
        PairMetric::Range { a: width } => {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (pa, pb) in &aligned {
                a.push(range_hit(pa.k_hat as f64, pa.k_star as f64, width)? as u8 as f64);
                b.push(range_hit(pb.k_hat as f64, pb.k_star as f64, width)? as u8 as f64);
            }
            Scores::PerPost(a, b)
        }
        PairMetric::Spearman => Scores::Ranked(
            aligned.iter().map(|(p, _)| (*p).clone()).collect(),
            aligned.iter().map(|(_, q)| (*q).clone()).collect(),
        ),
    };
    let n = aligned.len();
    let all: Vec<usize> = (0..n).collect();
    let (observed_a, observed_b) = scores.evaluate(&all).ok_or(MetricsError::ZeroVariance)?;
    let higher = metric.higher_is_better();
    let shards = BOOTSTRAP_SHARDS.min(iterations);
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(shards as usize);
    let next = std::sync::atomic::AtomicU64::new(0);
    let failures = std::sync::atomic::AtomicU64::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| {
                let mut idx = vec![0usize; n];
                loop {
                    let shard = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if shard >= shards {
                        break;
                    }
                    let count = iterations / shards + u64::from(shard < iterations % shards);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(shard);
                    let mut local = 0;
                    for _ in 0..count {
                        for slot in idx.iter_mut() {
                            *slot = rng.random_range(0..n);
                        }
                        let beats = match scores.evaluate(&idx) {
                            Some((sa, sb)) if higher => sa > sb,
                            Some((sa, sb)) => sa < sb,
                            None => false,
                        };
                        if !beats {
                            local += 1;
                        }
                    }
                    failures.fetch_add(local, std::sync::atomic::Ordering::Relaxed);
                }
            });
        }
    });
    Ok(BootstrapOutcome {
        p_value: failures.into_inner() as f64 / iterations as f64,
        iterations,
        observed_a,
        observed_b,
    })
}

pub const REPORT_RANGES: [f64; 3] = [2.0, 5.0, 10.0];

/// One system's row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub n: usize,
    /// `None` when ρ is undefined for the batch.
    pub rho: Option<f64>,
    pub log_error: f64,
    #[serde(rename = "range@2")]
    pub range_2: f64,
    #[serde(rename = "range@5")]
    pub range_5: f64,
    #[serde(rename = "range@10")]
    pub range_10: f64,
}

impl ReportRow {
    pub fn compute(system: impl Into<String>, pairs: &[EvalPair]) -> Result<Self, MetricsError> {
        let rho = match spearman_of_pairs(pairs) {
            Ok(r) => Some(r),
            Err(MetricsError::ZeroVariance | MetricsError::TooShort { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(ReportRow {
            system: system.into(),
            n: pairs.len(),
            rho,
            log_error: mean_log_error(pairs)?,
            range_2: range_metric(pairs, REPORT_RANGES[0])?,
            range_5: range_metric(pairs, REPORT_RANGES[1])?,
            range_10: range_metric(pairs, REPORT_RANGES[2])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn compute<'a, I>(systems: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (&'a str, &'a [EvalPair])>,
    {
        let rows = systems
            .into_iter()
            .map(|(name, pairs)| ReportRow::compute(name, pairs))
            .collect::<Result<_, _>>()?;
        Ok(Report { rows })
    }

    /// Plain-text table; range columns are percentages.
    pub fn render_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.system.len())
            .max()
            .unwrap_or(0)
            .max("system".len());
        let mut out = format!(
            "{:<width$}  {:>5}  {:>7}  {:>9}  {:>8}  {:>8}  {:>9}\n",
            "system", "n", "rho", "log_error", "range@2", "range@5", "range@10"
        );
        for r in &self.rows {
            let rho = r.rho.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>5}  {:>7}  {:>9.3}  {:>8.2}  {:>8.2}  {:>9.2}",
                r.system,
                r.n,
                rho,
                r.log_error,
                r.range_2 * 100.0,
                r.range_5 * 100.0,
                r.range_10 * 100.0
            );
        }
        out
    }
}
