use std::path::{Path, PathBuf};

use branch_core::llm::{ScriptedBackend, ScriptedFixture};
use branch_core::model::{DocumentContext, EstimateResult, RunConfig, Strategy};
use branch_core::pipeline::Pipeline;

pub const CASES: &[&str] = &["branch", "evaluator", "few_shot", "cot", "pot"];

pub fn case_dir(case: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden").join(case)
}

pub fn context() -> DocumentContext {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden/context.json");
    let text = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn config(case: &str) -> RunConfig {
    let text = std::fs::read_to_string(case_dir(case).join("config.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn render(result: &EstimateResult) -> String {
    serde_json::to_string_pretty(result).unwrap() + "\n"
}

pub fn run_with(backend: &dyn branch_core::llm::ChatBackend, cfg: RunConfig) -> EstimateResult {
    let ctx = context();
    let p = Pipeline::new(backend, cfg.clone());
    let out = if cfg.strategy == Strategy::Branch {
        p.run(&ctx)
    } else {
        p.run_baseline(&ctx)
    };
    out.unwrap_or_else(|f| panic!("{f}"))
}

/// Replays a stored case and returns `(produced, expected)` renderings.
pub fn replay(case: &str) -> (String, String) {
    let dir = case_dir(case);
    let fixture = ScriptedFixture::load(dir.join("fixture.json")).unwrap();
    let backend = ScriptedBackend::new(fixture);
    let produced = render(&run_with(&backend, config(case)));
    let expected = std::fs::read_to_string(dir.join("expected.json")).unwrap();
    (produced, expected)
}

pub fn stored(case: &str) -> EstimateResult {
    let text = std::fs::read_to_string(case_dir(case).join("expected.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Each guard with whether the stored branch run shows it rejecting a reply.
pub fn guards_fired(result: &EstimateResult) -> Vec<(&'static str, bool)> {
    let rejected: Vec<(&str, &str)> = result
        .transcript
        .iter()
        .flat_map(|t| t.rejected.iter().map(move |r| (t.stage.as_str(), r.reason.as_str())))
        .collect();
    let fired = |stage: &str, needle: &str| rejected.iter().any(|(s, r)| s.starts_with(stage) && r.contains(needle));
    vec![
        ("hallucinated selection", fired("selection", "not one of the provided")),
        ("duplicate ordering", fired("ordering", "more than once")),
        ("non-prior parent", fired("dependencies:", "not one of the prior")),
        ("query kind", fired("query:", "percent")),
        ("missing query tag", fired("query:", "<query>")),
        (
            "combine expression",
            fired("decompose:generalization", "combine expression"),
        ),
        ("discrete format", fired("decompose:discrete", "expected <math>")),
        ("population range", fired("estimate:", "population value 0.5")),
        ("percentage range", fired("estimate:", "percentage value 3.5")),
        ("missing score", fired("estimate:", "missing <score>")),
        ("simplified kind", fired("simplify:", "percent")),
        (
            "simplified answer used",
            result.answers.iter().flat_map(|a| a.leaves()).any(|a| a.simplified),
        ),
    ]
}
