pub mod cfunc;
pub mod diff;
pub mod digest;
pub mod model;
pub mod provider;
pub mod scalar;
pub mod miner;
pub mod strategy;
pub mod engine;
pub mod forge;
pub mod store;
pub mod normalize;
pub mod optimizer;
pub mod eval;
pub mod perf;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use model::{AnalysisRule, CommitRecord, Language, PipelineConfig, RuleStatus, StrategyCluster};
pub use scalar::{Real, Scalar};

/// Summaries with double-precision embeddings, the default everywhere.
pub type Summary = model::StrategySummary<f64>;
pub type SimilarityMatrix64 = strategy::SimilarityMatrix<f64>;
pub type SimilarityMatrix32 = strategy::SimilarityMatrix<f32>;
/// Measurements in exact rational arithmetic, for threshold-sensitive checks.
pub type ExactMeasurement = perf::PerfMeasurement<num_rational::Rational64>;
pub type ExactVariantReport = perf::VariantReport<num_rational::Rational64>;

/// Sizes the global worker pool; `0` keeps one thread per core.
pub fn configure_workers(workers: usize) -> Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build_global()
}
