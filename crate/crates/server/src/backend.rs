//! Backend selection shared by the service and the CLI.

use std::path::PathBuf;
use std::sync::Arc;

use branch_core::llm::{ChatBackend, LiveBackend, ScriptedBackend, ScriptedFixture};
use branch_core::popsim::{OracleBackend, Scenario};
use clap::{Args, ValueEnum};

use crate::error::ServerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// OpenAI-compatible endpoint configured by environment variables.
    Live,
    /// Exact answers from a synthetic population.
    Oracle,
    /// Canned replies from fixture files.
    Scripted,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Live, global = true)]
    pub backend: BackendKind,
    /// Directory of scripted fixture files (`--backend scripted`).
    #[arg(long, global = true)]
    pub fixture_dir: Option<PathBuf>,
    /// Scenario file for `--backend oracle`.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
}

pub type SharedBackend = Arc<dyn ChatBackend>;

pub fn load_scenario(path: &PathBuf) -> Result<Scenario, ServerError> {
    let text = std::fs::read_to_string(path).map_err(|e| ServerError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ServerError::Scenario(format!("{}: {e}", path.display())))
}

pub fn oracle_for(scenario: &Scenario) -> Result<OracleBackend, ServerError> {
    let population = scenario
        .population()
        .map_err(|e| ServerError::Scenario(e.to_string()))?;
    Ok(OracleBackend::new(population, scenario.generator.clone()))
}

pub fn build_backend(args: &BackendArgs) -> Result<SharedBackend, ServerError> {
    Ok(match args.backend {
        BackendKind::Live => Arc::new(LiveBackend::from_env()),
        BackendKind::Oracle => {
            let path = args.scenario.as_ref().ok_or(ServerError::MissingOption("scenario"))?;
            Arc::new(oracle_for(&load_scenario(path)?)?)
        }
        BackendKind::Scripted => {
            let dir = args
                .fixture_dir
                .as_ref()
                .ok_or(ServerError::MissingOption("fixture-dir"))?;
            let fixture = ScriptedFixture::load_dir(dir).map_err(|e| ServerError::io(dir, e))?;
            log::info!(
                "loaded {} scripted replies from {}",
                fixture.entries.len(),
                dir.display()
            );
            Arc::new(ScriptedBackend::new(fixture))
        }
    })
}
