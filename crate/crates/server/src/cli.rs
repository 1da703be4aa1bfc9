//! The `branch` command line.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use branch_core::dataset::{
    eval_pairs, gold_interval, gold_k, load, load_predictions, validate_dataset, Dataset, PredictionSet,
};
use branch_core::metrics::{paired_bootstrap, range_metric, EvalPair, PairMetric, Report, REPORT_RANGES};
use branch_core::model::{NetworkMode, RunConfig, Strategy};
use branch_core::pipeline::Pipeline;
use branch_core::popsim::{GeneratorNetwork, Scenario};
use branch_core::uncertainty::{interval_prf, macro_f1, stratify_by_variance};
use clap::{Parser, Subcommand, ValueEnum};

use crate::backend::{build_backend, oracle_for, BackendArgs};
use crate::error::ServerError;
use crate::estimate::{estimate, UncertaintyMode, UncertaintyRequest};
use crate::jobs::{Service, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "branch", version, about = "Estimate how many people a text could describe")]
pub struct Cli {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Network {
    Elicited,
    FullyDisjoint,
    FullyConnected,
}

impl From<Network> for NetworkMode {
    fn from(n: Network) -> Self {
        match n {
            Network::Elicited => NetworkMode::Elicited,
            Network::FullyDisjoint => NetworkMode::FullyDisjoint,
            Network::FullyConnected => NetworkMode::FullyConnected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    LogError,
    Range,
    Spearman,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate k for one post, or every post, of a dataset.
    Estimate {
        dataset: PathBuf,
        #[arg(long)]
        post: Option<String>,
        #[arg(long, default_value = "branch")]
        strategy: Strategy,
        /// Run configuration file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// System name stored in the output.
        #[arg(long)]
        system: Option<String>,
        /// Write predictions here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score prediction files against a dataset.
    Evaluate {
        dataset: PathBuf,
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long, default_value_t = 5.0)]
        a: f64,
    },
    /// Repeated runs per post, with intervals scored against the gold range.
    Uncertainty {
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: u32,
        #[arg(long, value_enum, default_value_t = UncertaintyMode::Reeval)]
        mode: UncertaintyMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5.0)]
        a: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline against a synthetic population and compare with the
    /// true count.
    Simulate {
        #[arg(long, default_value_t = 4)]
        attrs: usize,
        #[arg(long, default_value_t = 100_000)]
        pop: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Largest number of values per attribute.
        #[arg(long, default_value_t = 3)]
        values: usize,
        #[arg(long, value_enum, default_value_t = Network::FullyConnected)]
        network: Network,
        /// Also write the scenario, for `serve --backend oracle`.
        #[arg(long)]
        save_scenario: Option<PathBuf>,
    },
    /// Check a dataset; exits 1 when any issue is found.
    Validate { dataset: PathBuf },
    /// Run the HTTP job service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value_t = 64)]
        queue: usize,
        /// Append-only job journal for restart recovery.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Paired bootstrap test that system A beats system B.
    Bootstrap {
        predictions_a: PathBuf,
        predictions_b: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        iters: u64,
        #[arg(long, value_enum, default_value_t = Metric::LogError)]
        metric: Metric,
        /// Range factor for `--metric range`.
        #[arg(long, default_value_t = 5.0)]
        a: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs one command. `Ok(false)` means the command completed but its check
/// failed, so the process should exit 1.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<bool, ServerError> {
    match cli.command {
        Command::Estimate {
            dataset,
            post,
            strategy,
            config,
            system,
            out: path,
        } => {
            let dataset = load(&dataset)?;
            let mut cfg = read_config(config.as_deref())?;
            cfg.strategy = strategy;
            let backend = build_backend(&cli.backend)?;
            let posts: Vec<_> = match &post {
                Some(id) => vec![dataset
                    .posts
                    .iter()
                    .find(|p| &p.id == id)
                    .ok_or_else(|| ServerError::UnknownPost(id.clone()))?],
                None => dataset.posts.iter().collect(),
            };
            let mut set = PredictionSet {
                system: Some(system.unwrap_or_else(|| strategy_name(strategy))),
                posts: Vec::new(),
            };
            for p in posts {
                let ctx = p.context()?;
                let est = estimate(backend.as_ref(), &ctx, &cfg, None, None).map_err(|message| ServerError::Run {
                    post: p.id.clone(),
                    message,
                })?;
                log::info!("{}: k_hat {}", p.id, est.estimate.k_hat);
                set.posts.push(est.prediction);
            }
            emit_json(&set, path.as_deref(), out)?;
            Ok(true)
        }
        Command::Evaluate {
            dataset,
            predictions,
            a,
        } => {
            let dataset = load(&dataset)?;
            out.write_all(evaluate_report(&dataset, &predictions, a)?.as_bytes())?;
            Ok(true)
        }
        Command::Uncertainty {
            dataset,
            runs,
            mode,
            config,
            a,
            out: path,
        } => {
            let dataset = load(&dataset)?;
            let cfg = read_config(config.as_deref())?;
            let backend = build_backend(&cli.backend)?;
            let request = UncertaintyRequest { mode, runs };
            let mut set = PredictionSet {
                system: Some(format!("{}-{}", strategy_name(cfg.strategy), mode_name(mode))),
                posts: Vec::new(),
            };
            let mut scored = Vec::new();
            let mut ensembles = Vec::new();
            let mut pairs = Vec::new();
            let mut table = format!(
                "{:<12}  {:>10}  {:>8}  {:>25}  {:>25}  {:>6}\n",
                "post", "k_hat", "cv", "interval", "gold", "f1"
            );
            for p in &dataset.posts {
                let ctx = p.context()?;
                let est = estimate(backend.as_ref(), &ctx, &cfg, Some(request), None).map_err(|message| {
                    ServerError::Run {
                        post: p.id.clone(),
                        message,
                    }
                })?;
                let pred = est.prediction;
                let gold = gold_interval(p)?;
                let interval = pred.interval.ok_or_else(|| ServerError::Run {
                    post: p.id.clone(),
                    message: "no interval".into(),
                })?;
                let prf = interval_prf(&interval, &gold);
                let cv = pred
                    .ensemble
                    .as_ref()
                    .map_or_else(|| "-".to_string(), |e| format!("{:.3}", e.cv));
                let _ = writeln!(
                    table,
                    "{:<12}  {:>10}  {:>8}  {:>25}  {:>25}  {:>6.3}",
                    p.id,
                    est.estimate.k_hat,
                    cv,
                    format!("[{:.1}, {:.1}]", interval.lo, interval.hi),
                    format!("[{}, {}]", gold.lo, gold.hi),
                    prf.f1
                );
                scored.push((interval, gold));
                pairs.push(EvalPair::new(p.id.clone(), est.estimate.k_hat, gold_k(p)?)?);
                if let Some(e) = &pred.ensemble {
                    ensembles.push(e.clone());
                }
                set.posts.push(pred);
            }
            let _ = writeln!(table, "macro F1: {:.3}", macro_f1(&scored)?);
            if !ensembles.is_empty() {
                let s = stratify_by_variance(&ensembles, &pairs, a)?;
                let acc = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}%", x * 100.0));
                let _ = writeln!(table, "mean cv: {:.3}", s.mean_cv);
                let _ = writeln!(
                    table,
                    "low variance ({} posts): range@{a} {}",
                    s.low.posts.len(),
                    acc(s.low.range_accuracy)
                );
                let _ = writeln!(
                    table,
                    "high variance ({} posts): range@{a} {}",
                    s.high.posts.len(),
                    acc(s.high.range_accuracy)
                );
            }
            out.write_all(table.as_bytes())?;
            if let Some(path) = path {
                emit_json(&set, Some(&path), out)?;
            }
            Ok(true)
        }
        Command::Simulate {
            attrs,
            pop,
            seed,
            values,
            network,
            save_scenario,
        } => {
            if attrs == 0 || pop == 0 || values == 0 {
                return Err(ServerError::Config(
                    "--attrs, --pop and --values must be positive".into(),
                ));
            }
            let generator = GeneratorNetwork::random(attrs, values, seed);
            let scenario =
                Scenario::sampled(&generator, pop, seed).map_err(|e| ServerError::Scenario(e.to_string()))?;
            if let Some(path) = &save_scenario {
                let text = serde_json::to_string_pretty(&scenario).expect("scenario serializes");
                std::fs::write(path, text + "\n").map_err(|e| ServerError::io(path, e))?;
            }
            let backend = oracle_for(&scenario)?;
            let cfg = RunConfig {
                network_mode: network.into(),
                ..RunConfig::default()
            };
            let result = Pipeline::new(&backend, cfg)
                .run(&scenario.context)
                .map_err(|f| ServerError::Run {
                    post: scenario.context.document_id.clone(),
                    message: f.error.to_string(),
                })?;
            writeln!(out, "scenario: {attrs} attributes, population {pop}, seed {seed}")?;
            writeln!(out, "document: {}", scenario.context.text)?;
            writeln!(out, "equation: {}", result.equation)?;
            writeln!(out, "k_hat = {}", result.k_hat)?;
            writeln!(out, "true k = {}", scenario.true_k)?;
            let exact = result.k_hat == scenario.true_k;
            if !exact {
                writeln!(
                    out,
                    "mismatch: raw k {} differs from the population count",
                    result.raw_k
                )?;
            }
            Ok(exact)
        }
        Command::Validate { dataset } => {
            let data = match load(&dataset) {
                Ok(d) => d,
                Err(e) => {
                    writeln!(out, "{}: {e}", dataset.display())?;
                    return Ok(false);
                }
            };
            let issues = validate_dataset(&data);
            for i in &issues {
                writeln!(out, "{}: {}", i.path, i.message)?;
            }
            if issues.is_empty() {
                let orderings: usize = data.posts.iter().map(|p| p.orderings.len()).sum();
                writeln!(out, "ok: {} posts, {orderings} orderings", data.posts.len())?;
            } else {
                writeln!(out, "{} issues", issues.len())?;
            }
            Ok(issues.is_empty())
        }
        Command::Serve {
            port,
            host,
            workers,
            queue,
            journal,
        } => {
            if workers == 0 {
                return Err(ServerError::Config("--workers must be at least 1".into()));
            }
            let backend = build_backend(&cli.backend)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let service = Service::start(
                    backend,
                    ServiceConfig {
                        workers,
                        queue_capacity: queue,
                        journal,
                    },
                )?;
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, crate::api::router(service))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok::<_, ServerError>(())
            })?;
            Ok(true)
        }
        Command::Bootstrap {
            predictions_a,
            predictions_b,
            dataset,
            iters,
            metric,
            a,
            seed,
        } => {
            let dataset = load(&dataset)?;
            let (name_a, pairs_a) = system_pairs(&dataset, &predictions_a)?;
            let (name_b, pairs_b) = system_pairs(&dataset, &predictions_b)?;
            let metric = match metric {
                Metric::LogError => PairMetric::LogError,
                Metric::Range => PairMetric::Range { a },
                Metric::Spearman => PairMetric::Spearman,
            };
            let outcome = paired_bootstrap(&pairs_a, &pairs_b, metric, iters, seed)?;
            writeln!(out, "metric: {}", metric_name(metric))?;
            writeln!(out, "A {name_a}: {:.4}", outcome.observed_a)?;
            writeln!(out, "B {name_b}: {:.4}", outcome.observed_b)?;
            writeln!(
                out,
                "p = {} ({} iterations, seed {seed})",
                outcome.p_value, outcome.iterations
            )?;
            Ok(true)
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig, ServerError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| ServerError::io(path, e))?;
    let cfg: RunConfig = branch_core::dataset::from_json_str(&text)?;
    cfg.validate().map_err(|e| ServerError::Config(e.to_string()))?;
    Ok(cfg)
}

fn emit_json(set: &PredictionSet, path: Option<&Path>, out: &mut dyn Write) -> Result<(), ServerError> {
    let text = serde_json::to_string_pretty(set).expect("predictions serialize") + "\n";
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| ServerError::io(p, e)),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

fn strategy_name(s: Strategy) -> String {
    match s {
        Strategy::Branch => "branch",
        Strategy::FewShot => "few-shot",
        Strategy::Cot => "cot",
        Strategy::Pot => "pot",
    }
    .to_string()
}

fn mode_name(m: UncertaintyMode) -> &'static str {
    match m {
        UncertaintyMode::Reeval => "reeval",
        UncertaintyMode::SelfConsistency => "self-consistency",
    }
}

fn metric_name(m: PairMetric) -> String {
    match m {
        PairMetric::LogError => "log error".into(),
        PairMetric::Range { a } => format!("range@{a}"),
        PairMetric::Spearman => "spearman rho".into(),
    }
}

fn system_pairs(dataset: &Dataset, path: &Path) -> Result<(String, Vec<EvalPair>), ServerError> {
    let set = load_predictions(path)?;
    let name = set.system.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    });
    Ok((name, eval_pairs(dataset, &set)?))
}

/// The results table for each prediction file, plus range@a when `a` is not
/// one of the table's columns.
pub fn evaluate_report(dataset: &Dataset, predictions: &[PathBuf], a: f64) -> Result<String, ServerError> {
    let systems = predictions
        .iter()
        .map(|p| system_pairs(dataset, p))
        .collect::<Result<Vec<_>, _>>()?;
    let report = Report::compute(systems.iter().map(|(n, p)| (n.as_str(), p.as_slice())))?;
    let mut text = report.render_text();
    if !REPORT_RANGES.contains(&a) {
        for (name, pairs) in &systems {
            let _ = writeln!(text, "{name}: range@{a} {:.2}", range_metric(pairs, a)? * 100.0);
        }
    }
    Ok(text)
}
