//! Metrics, the sanity gate, the reference predictor and the benchmark
//! runner.

pub mod bench;
pub mod gate;
pub mod metrics;
pub mod reference;
pub mod report;

pub use bench::{
    ablation_variants, evaluate_stage3, llm_imputation, run_benchmark, scenario_mask, train_then_validation, AblationRow,
    BenchmarkConfig, BenchmarkReport, MaskScope, MethodSpec, Stage3Report,
};
pub use gate::{sanity_gate, CheckResult, CheckStatus, GateReport, RunBundle, ScenarioRun};
pub use metrics::{
    ci_coverage, mae, ols_coef_delta, ordinal_distribution, quadratic_weighted_kappa, rmse, signed_bias, symmetric_kl,
    within1, Coverage, OlsSpec,
};
pub use reference::reference_predict;
pub use report::{
    metric_report, pooled_field_means, stratum_metrics, subgroup_stratify, truth_means, weighted_aggregate,
    write_reports_csv, CellSelection, MetricReport, ReportInput, StratumMetrics,
};

#[cfg(test)]
mod tests;
