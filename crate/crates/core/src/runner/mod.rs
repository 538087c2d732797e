//! Experiment orchestration: run configurations, the annotation pipeline,
//! cached training through [`Lab`], the experiment families and plotting.

mod config;
mod experiments;
mod lab;
pub mod pipeline;
pub mod plot;

pub use config::{with_overrides, Experiment, Negative, RemovalSource, Reweight, RunConfig};
pub use experiments::{
    concept_only, geo_accuracy_row, learn_removal_tokens, run_ablations, run_correlation, run_data_removal, run_model_removal,
    run_preliminary, run_trend, AblationReport, AblationRow, CorrelationReport, ModelRemovalReport,
    PreliminaryReport, Suite, TrendPoint, GEO_SIGMAS, STUDY_GUIDANCE, TREND_LEVELS,
};
pub use lab::{Lab, TrainedModel};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "GEOMLAB_THREADS";

/// Sizes the global thread pool from [`THREADS_ENV`] when set. Results do
/// not depend on the thread count.
pub fn init_threads() -> crate::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| crate::GeomError::InvalidArgument(format!("{THREADS_ENV}={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| crate::GeomError::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}
