//! One estimation request, with optional repeated runs.

use branch_core::dataset::PredictedPost;
use branch_core::llm::ChatBackend;
use branch_core::model::{DocumentContext, EstimateResult, RunConfig, Strategy};
use branch_core::pipeline::{Observer, Pipeline};
use branch_core::uncertainty::{reevaluate, self_consistency, KInterval};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// Independent full re-runs.
    Reeval,
    /// One elicitation, repeated estimation.
    #[serde(alias = "self-consistency")]
    SelfConsistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncertaintyRequest {
    pub mode: UncertaintyMode,
    pub runs: u32,
}

/// A finished estimate and its interchange form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: EstimateResult,
    pub prediction: PredictedPost,
}

pub fn estimate<'a>(
    backend: &'a dyn ChatBackend,
    ctx: &DocumentContext,
    cfg: &RunConfig,
    uncertainty: Option<UncertaintyRequest>,
    observer: Option<&'a Observer<'a>>,
) -> Result<Estimate, String> {
    let mut pipeline = Pipeline::new(backend, cfg.clone());
    if let Some(obs) = observer {
        pipeline = pipeline.with_observer(obs);
    }
    match uncertainty {
        None => {
            let result = if cfg.strategy == Strategy::Branch {
                pipeline.run(ctx)
            } else {
                pipeline.run_baseline(ctx)
            };
            let estimate = result.map_err(|f| f.error.to_string())?;
            let prediction = PredictedPost::from_result(ctx, &estimate);
            Ok(Estimate { estimate, prediction })
        }
        Some(UncertaintyRequest {
            mode: UncertaintyMode::Reeval,
            runs,
        }) => {
            let re = reevaluate(&pipeline, ctx, runs).map_err(|e| e.to_string())?;
            let estimate = re.runs.into_iter().next().ok_or("no runs completed")?;
            let mut prediction = PredictedPost::from_result(ctx, &estimate);
            prediction.ensemble = Some(re.ensemble);
            prediction.interval = Some(re.interval);
            Ok(Estimate { estimate, prediction })
        }
        Some(UncertaintyRequest {
            mode: UncertaintyMode::SelfConsistency,
            runs,
        }) => {
            let sc = self_consistency(&pipeline, ctx, runs).map_err(|e| e.to_string())?;
            let estimate = sc.estimate();
            let mut prediction = PredictedPost::from_result(ctx, &estimate);
            let lo = sc.bounds.k_lo.max(1.0);
            prediction.interval = KInterval::new(lo, sc.bounds.k_hi.max(lo)).ok();
            Ok(Estimate { estimate, prediction })
        }
    }
}
