//! Deterministic and probabilistic skill scores over generated ensembles.
//!
//! Aggregation order is fixed: per-pixel scores are averaged over pixels,
//! then over cases, separately for each channel.

mod report;
mod scores;

pub use report::{
    evaluate, skill_table_csv, write_report, ChannelScores, ChannelSpectrum, EvalOptions, SkillReport,
    AGGREGATION_ORDER,
};
pub use scores::{crps_ensemble, crps_point, mae, rmse, ssr, CrpsEstimator, EnsembleBatch};
