#![allow(dead_code)]

use std::path::{Path, PathBuf};

use branch_core::llm::{wrap, BackendError, CompletionRequest, FnBackend, ScriptedFixture, TaskHint, TemplateId};
use branch_core::model::{Disclosure, QueryKind, QuerySemantics, RunConfig, Strategy};
use branch_core::pipeline::Pipeline;

pub fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

pub fn dataset_path() -> PathBuf {
    core_fixture("sample_dataset.json")
}

fn list(items: &[Disclosure]) -> String {
    let inner: String = items
        .iter()
        .map(|d| wrap("answer", &d.span) + &wrap("type", d.category.label()))
        .collect();
    wrap("list", &inner)
}

fn describe(semantics: &QuerySemantics) -> String {
    let facts = |fs: &[branch_core::model::Fact]| fs.iter().map(|f| f.value.clone()).collect::<Vec<_>>().join(" and ");
    if semantics.conditions.is_empty() {
        facts(&semantics.target)
    } else {
        format!("{} THAT are {}", facts(&semantics.conditions), facts(&semantics.target))
    }
}

fn query(kind: QueryKind, semantics: &QuerySemantics) -> String {
    match kind {
        QueryKind::Population => wrap("query", &format!("number of people in {}", describe(semantics))),
        QueryKind::Percentage => wrap("query", &format!("percentage of people in {}", describe(semantics))),
    }
}

/// A well-behaved stand-in model: keeps every disclosure in document order,
/// assumes independence and answers every query with a fixed value.
pub fn plain_reply(req: &CompletionRequest) -> Result<String, BackendError> {
    Ok(match &req.hint {
        TaskHint::Selection { candidates } => list(candidates),
        TaskHint::Ordering { subset } => list(subset),
        TaskHint::Dependencies { .. } => wrap("list", ""),
        TaskHint::QueryGeneration { kind, semantics } | TaskHint::Simplify { kind, semantics } => {
            query(*kind, semantics)
        }
        TaskHint::Decomposition { .. } if req.template == TemplateId::DiscreteSubquery => {
            wrap("list", &wrap("answer", "no split"))
        }
        TaskHint::Decomposition { .. } => wrap("query", "no split"),
        TaskHint::Estimation {
            kind: QueryKind::Population,
            ..
        } => wrap("answer", "20000") + &wrap("score", "0.9"),
        TaskHint::Estimation { .. } => wrap("answer", "0.1") + &wrap("score", "0.9"),
        TaskHint::Review { .. } => wrap("answer", "Yes"),
        TaskHint::Baseline { .. } if req.template == TemplateId::BaselinePot => wrap("math", "20 * 2"),
        TaskHint::Baseline { .. } => wrap("answer", "40"),
        TaskHint::None => return Err(BackendError::Oracle("no task".into())),
    })
}

/// Records `plain_reply` over every post of the sample dataset, once per
/// strategy, into `dir/plain.json`.
pub fn write_plain_fixture(dir: &Path) {
    let backend = FnBackend::new(plain_reply);
    let dataset = branch_core::dataset::load(dataset_path()).unwrap();
    for strategy in [Strategy::Branch, Strategy::Cot, Strategy::Pot, Strategy::FewShot] {
        let cfg = RunConfig {
            strategy,
            ..RunConfig::default()
        };
        for post in &dataset.posts {
            let ctx = post.context().unwrap();
            let p = Pipeline::new(&backend, cfg.clone());
            let out = if strategy == Strategy::Branch {
                p.run(&ctx)
            } else {
                p.run_baseline(&ctx)
            };
            out.unwrap_or_else(|f| panic!("{}: {f}", post.id));
        }
    }
    let fixture: ScriptedFixture = backend.recorded(false);
    std::fs::write(dir.join("plain.json"), fixture.to_json_pretty()).unwrap();
}
