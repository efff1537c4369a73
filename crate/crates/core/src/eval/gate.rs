//! The five checks that must pass before results are emitted.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::report::pooled_field_means;
use crate::impute::{ImputationRun, IpwWeights};
use crate::missing::{mask_association_rows, MaskedDataset, Mechanism};

pub const MNAR_P_MAX: f64 = 1e-4;
pub const MCAR_P_MIN: f64 = 0.05;
pub const WEIGHT_CAP: f64 = 10.0;
/// Share of seeds on which the mechanism check must hold.
pub const SEED_QUORUM: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotRun,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::NotRun => "not-run",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: u8,
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub checks: Vec<CheckResult>,
}

impl GateReport {
    /// Every check passed; a not-run check counts as a failure.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| c.status != CheckStatus::Pass).collect()
    }

    pub fn summary(&self) -> String {
        self.checks.iter().map(|c| format!("check {} ({}): {} {}\n", c.id, c.name, c.status, c.detail)).collect()
    }
}

/// Imputation runs under one mask.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub seed: u64,
    pub masked: Arc<MaskedDataset>,
    /// First row the mask could touch; earlier rows are training rows
    /// under a validation-scoped mask.
    pub maskable_from: usize,
    pub runs: Vec<ImputationRun>,
    /// Method name and weights of every weighted run.
    pub weights: Vec<(String, IpwWeights)>,
}

#[derive(Debug, Clone, Default)]
pub struct RunBundle {
    pub scenarios: Vec<ScenarioRun>,
}

fn result(id: u8, name: &str, status: CheckStatus, detail: String) -> CheckResult {
    CheckResult { id, name: name.into(), status, detail }
}

fn check_between_variance(bundle: &RunBundle) -> CheckResult {
    const NAME: &str = "between-imputation variance B > 0";
    let mut tested = 0;
    let mut bad = Vec::new();
    for s in &bundle.scenarios {
        let rows: Vec<usize> = (0..s.masked.truth.len()).collect();
        let fields = s.masked.truth.codebook.target_fields();
        for run in s.runs.iter().filter(|r| r.m() >= 2) {
            let weights = s.weights.iter().find(|(m, _)| *m == run.method).map(|(_, w)| w.weights.as_slice());
            for (field, (est, imputed)) in pooled_field_means(&run.completed, &run.deleted, &fields, &rows, weights) {
                if imputed == 0 {
                    continue;
                }
                tested += 1;
                if est.b_zero {
                    bad.push(format!("{} {} seed {}: {field}", run.method, s.masked.mask.mechanism, s.seed));
                }
            }
        }
    }
    match (tested, bad.is_empty()) {
        (0, _) => result(1, NAME, CheckStatus::NotRun, "no multiply imputed run with imputed cells".into()),
        (_, true) => result(1, NAME, CheckStatus::Pass, format!("{tested} pooled field estimates")),
        (_, false) => result(1, NAME, CheckStatus::Fail, format!("B = 0 for {}", bad.join(", "))),
    }
}

fn check_weights(bundle: &RunBundle) -> CheckResult {
    const NAME: &str = "maximum IPW weight <= 10";
    let all: Vec<(String, f64)> = bundle
        .scenarios
        .iter()
        .flat_map(|s| s.weights.iter().map(move |(m, w)| (format!("{m} {} seed {}", s.masked.mask.mechanism, s.seed), w.max_weight())))
        .collect();
    if all.is_empty() {
        return result(2, NAME, CheckStatus::NotRun, "no weighted run".into());
    }
    let (worst_at, worst) = all.iter().cloned().fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let status = if worst <= WEIGHT_CAP { CheckStatus::Pass } else { CheckStatus::Fail };
    result(2, NAME, status, format!("max weight {worst:.4} ({worst_at})"))
}

fn check_range(bundle: &RunBundle) -> CheckResult {
    const NAME: &str = "imputed values within 1..5";
    let mut runs = 0;
    for s in &bundle.scenarios {
        for run in &s.runs {
            runs += 1;
            let cb = &run.completed[0].codebook;
            for k in 0..run.m() {
                for (r, f, v) in run.imputed_ordinals(k) {
                    let max = cb.fields[f].levels.iter().filter_map(|l| l.ordinal).max().unwrap_or(0);
                    if !matches!(v, Some(x) if x >= 1 && x <= max) {
                        let shown = v.map_or("empty".to_string(), |x| x.to_string());
                        return result(
                            3,
                            NAME,
                            CheckStatus::Fail,
                            format!(
                                "{} {} seed {} copy {k}: respondent {} field {} = {shown}",
                                run.method,
                                s.masked.mask.mechanism,
                                s.seed,
                                run.completed[k].respondents[r].id,
                                cb.fields[f].name
                            ),
                        );
                    }
                }
            }
        }
    }
    if runs == 0 {
        return result(3, NAME, CheckStatus::NotRun, "no imputation run".into());
    }
    result(3, NAME, CheckStatus::Pass, format!("{runs} runs"))
}

/// Per seed: every MNAR mask has its mechanism p below 1e-4 and every S1
/// mask stays above 0.05. The check passes when at least two thirds of the
/// seeds pass.
fn check_mechanisms(bundle: &RunBundle) -> CheckResult {
    const NAME: &str = "MNAR masks associated, MCAR mask not";
    let mut by_seed: BTreeMap<u64, Vec<(Mechanism, f64)>> = BTreeMap::new();
    for s in &bundle.scenarios {
        let e = by_seed.entry(s.seed).or_default();
        if !e.iter().any(|(m, _)| *m == s.masked.mask.mechanism) {
            e.push((s.masked.mask.mechanism, mask_association_rows(&s.masked, s.maskable_from..s.masked.truth.len()).mechanism_p()));
        }
    }
    let mut complete = 0;
    let mut passing = 0;
    let mut notes = Vec::new();
    for (seed, list) in &by_seed {
        let has_ref = list.iter().any(|(m, _)| *m == Mechanism::S1);
        let has_mnar = list.iter().any(|(m, _)| m.is_mnar());
        if !(has_ref && has_mnar) {
            continue;
        }
        complete += 1;
        let ok = list.iter().all(|&(m, p)| match m {
            Mechanism::S1 => p > MCAR_P_MIN,
            m if m.is_mnar() => p < MNAR_P_MAX,
            _ => true,
        });
        passing += ok as usize;
        let ps: Vec<String> = list.iter().map(|(m, p)| format!("{m} p={p:.3e}")).collect();
        notes.push(format!("seed {seed}: {} [{}]", if ok { "pass" } else { "fail" }, ps.join(", ")));
    }
    if complete == 0 {
        return result(4, NAME, CheckStatus::NotRun, "needs an S1 mask and an MNAR mask for the same seed".into());
    }
    let need = (SEED_QUORUM * complete as f64 - 1e-9).ceil() as usize;
    let status = if passing >= need { CheckStatus::Pass } else { CheckStatus::Fail };
    result(4, NAME, status, format!("{passing}/{complete} seeds pass (need {need}); {}", notes.join("; ")))
}

fn check_preservation(bundle: &RunBundle) -> CheckResult {
    const NAME: &str = "observed cells preserved";
    if bundle.scenarios.is_empty() {
        return result(5, NAME, CheckStatus::NotRun, "no masked dataset".into());
    }
    for s in &bundle.scenarios {
        let v = s.masked.preservation_violations();
        if let Some(&(r, f)) = v.first() {
            return result(
                5,
                NAME,
                CheckStatus::Fail,
                format!("mask {} seed {}: respondent {} field {} altered", s.masked.mask.mechanism, s.seed, s.masked.truth.respondents[r].id, s.masked.truth.codebook.fields[f].name),
            );
        }
        for run in &s.runs {
            if !run.preserves_observed(&s.masked) {
                return result(5, NAME, CheckStatus::Fail, format!("{} {} seed {} changed an observed cell", run.method, s.masked.mask.mechanism, s.seed));
            }
        }
    }
    result(5, NAME, CheckStatus::Pass, format!("{} masks", bundle.scenarios.len()))
}

pub fn sanity_gate(bundle: &RunBundle) -> GateReport {
    GateReport {
        checks: vec![
            check_between_variance(bundle),
            check_weights(bundle),
            check_range(bundle),
            check_mechanisms(bundle),
            check_preservation(bundle),
        ],
    }
}
