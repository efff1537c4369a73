use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::*;
use crate::impute::{mice_pmm, rubin_pool, ImputationRun, MiceConfig, PooledEstimate};
use crate::llm::{HashedEmbedder, MethodConfig, MethodKind, StubProvider};
use crate::missing::{apply_s1, Mechanism};
use crate::rng::stream;
use crate::survey::{Codebook, Dataset};
use crate::synth::{generate, GeneratorConfig};

fn synth(n: usize, seed: u64) -> Dataset {
    generate(&GeneratorConfig::milton_like().with_n_seed(n, seed), Arc::new(Codebook::milton())).unwrap()
}

#[test]
fn point_metrics_trivial_cases() {
    let t = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(mae(&t, &t).unwrap(), 0.0);
    assert_eq!(rmse(&t, &t).unwrap(), 0.0);
    assert_eq!(within1(&t, &t).unwrap(), 1.0);
    assert_eq!(signed_bias(&t, &t).unwrap(), 0.0);
    let p: Vec<f64> = t.iter().map(|x| x + 1.0).collect();
    assert_eq!(signed_bias(&p, &t).unwrap(), 1.0);
    assert_eq!(mae(&p, &t).unwrap(), 1.0);
    assert_eq!(within1(&p, &t).unwrap(), 1.0);
    assert!(mae(&[], &[]).is_err());
}

#[test]
fn point_metrics_match_loops() {
    let mut rng = stream(3, &[b"metrics"]);
    let p: Vec<f64> = (0..50).map(|_| rng.random_range(1..=5) as f64).collect();
    let t: Vec<f64> = (0..50).map(|_| rng.random_range(1..=5) as f64).collect();
    let (mut sa, mut ss, mut sb, mut w1) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..50 {
        let d = p[i] - t[i];
        sa += d.abs();
        ss += d * d;
        sb += d;
        if d.abs() <= 1.0 {
            w1 += 1;
        }
    }
    assert!((mae(&p, &t).unwrap() - sa / 50.0).abs() < 1e-12);
    assert!((rmse(&p, &t).unwrap() - (ss / 50.0).sqrt()).abs() < 1e-12);
    assert!((signed_bias(&p, &t).unwrap() - sb / 50.0).abs() < 1e-12);
    assert!((within1(&p, &t).unwrap() - w1 as f64 / 50.0).abs() < 1e-12);
}

/// Matrix form of κ from an explicit confusion matrix.
fn kappa_from_confusion(o: &[[f64; 5]; 5]) -> f64 {
    let n: f64 = o.iter().flatten().sum();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let w = ((i as f64 - j as f64) / 4.0).powi(2);
            let row: f64 = o[i].iter().sum();
            let col: f64 = (0..5).map(|k| o[k][j]).sum();
            num += w * o[i][j] / n;
            den += w * (row / n) * (col / n);
        }
    }
    1.0 - num / den
}

#[test]
fn kappa_cases() {
    let v: Vec<u8> = vec![1, 2, 3, 4, 5, 3, 2];
    assert_eq!(quadratic_weighted_kappa(&v, &v, 5).unwrap(), Some(1.0));
    assert_eq!(quadratic_weighted_kappa(&[3, 3], &[3, 3], 5).unwrap(), None);

    let o = [
        [4.0, 2.0, 1.0, 0.0, 0.0],
        [1.0, 5.0, 2.0, 1.0, 0.0],
        [0.0, 2.0, 6.0, 2.0, 1.0],
        [0.0, 1.0, 3.0, 5.0, 2.0],
        [1.0, 0.0, 1.0, 2.0, 4.0],
    ];
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for i in 0..5 {
        for j in 0..5 {
            for _ in 0..o[i][j] as usize {
                truth.push(i as u8 + 1);
                pred.push(j as u8 + 1);
            }
        }
    }
    let k = quadratic_weighted_kappa(&pred, &truth, 5).unwrap().unwrap();
    assert!((k - kappa_from_confusion(&o)).abs() < 1e-12);

    let mut rng = stream(5, &[b"kappa-null"]);
    let a: Vec<u8> = (0..10_000).map(|_| rng.random_range(1..=5)).collect();
    let b: Vec<u8> = (0..10_000).map(|_| rng.random_range(1..=5)).collect();
    assert!(quadratic_weighted_kappa(&a, &b, 5).unwrap().unwrap().abs() < 0.05);
}

#[test]
fn symmetric_kl_cases() {
    let p = [0.1, 0.2, 0.3, 0.25, 0.15];
    assert!(symmetric_kl(&p, &p, 1e-6).unwrap().abs() < 1e-15);
    let a = [1.0, 0.0, 0.0, 0.0, 0.0];
    let b = [0.0, 1.0, 0.0, 0.0, 0.0];
    let big = symmetric_kl(&a, &b, 1e-6).unwrap();
    let bigger = symmetric_kl(&a, &b, 1e-9).unwrap();
    assert!(big.is_finite() && bigger.is_finite() && bigger > big && big > 10.0);

    let q = [0.3, 0.1, 0.1, 0.4, 0.1];
    let eps = 1e-6;
    let ps: Vec<f64> = p.iter().map(|x| (x + eps) / (1.0 + 5.0 * eps)).collect();
    let qs: Vec<f64> = q.iter().map(|x| (x + eps) / (1.0 + 5.0 * eps)).collect();
    let mut oracle = 0.0;
    for i in 0..5 {
        oracle += ps[i] * (ps[i] / qs[i]).ln();
        oracle += qs[i] * (qs[i] / ps[i]).ln();
    }
    assert!((symmetric_kl(&p, &q, eps).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn ols_delta_zero_for_truth_and_order_invariant() {
    let ds = synth(120, 2);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let spec = OlsSpec::default();
    assert!(ols_coef_delta(std::slice::from_ref(&ds), &ds, &rows, &spec).unwrap() < 1e-9);

    let masked = apply_s1(Arc::new(ds.clone()), 0.3, 4).unwrap();
    let run = crate::impute::mean_impute(&masked);
    let d = ols_coef_delta(&run.completed, &ds, &rows, &spec).unwrap();
    assert!(d > 0.0);

    let perm: Vec<usize> = (0..ds.len()).rev().collect();
    let truth_p = ds.subset(&perm);
    let imp_p = run.completed[0].subset(&perm);
    let dp = ols_coef_delta(&[imp_p], &truth_p, &rows, &spec).unwrap();
    assert!((d - dp).abs() < 1e-8);
}

#[test]
fn ols_hand_regression() {
    use crate::stats::linalg::ols;
    use nalgebra::{DMatrix, DVector};
    // y = 1 + 2x1 − x2 + small residuals; normal equations solved by hand
    // below via the closed-form 3×3 inverse.
    let x = [[1.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 2.0, 1.0], [1.0, 3.0, 0.0], [1.0, 4.0, 2.0], [1.0, 5.0, 1.0]];
    let y = [0.1, 3.0, 3.9, 7.1, 6.8, 10.2];
    let mut xtx = [[0.0; 3]; 3];
    let mut xty = [0.0; 3];
    for (r, yy) in x.iter().zip(&y) {
        for i in 0..3 {
            xty[i] += r[i] * yy;
            for j in 0..3 {
                xtx[i][j] += r[i] * r[j];
            }
        }
    }
    let m = xtx;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let cof = |a: usize, b: usize, c: usize, d: usize| m[a][b] * m[c][d] - m[a][d] * m[c][b];
    let inv = [
        [cof(1, 1, 2, 2), -cof(0, 1, 2, 2), cof(0, 1, 1, 2)],
        [-cof(1, 0, 2, 2), cof(0, 0, 2, 2), -cof(0, 0, 1, 2)],
        [cof(1, 0, 2, 1), -cof(0, 0, 2, 1), cof(0, 0, 1, 1)],
    ];
    let oracle: Vec<f64> = (0..3).map(|i| (0..3).map(|j| inv[i][j] * xty[j]).sum::<f64>() / det).collect();
    let b = ols(&DMatrix::from_fn(6, 3, |i, j| x[i][j]), &DVector::from_column_slice(&y)).unwrap();
    for i in 0..3 {
        assert!((b[i] - oracle[i]).abs() < 1e-10);
    }
}

fn est(q: f64, t: f64, df: Option<f64>, m: usize) -> PooledEstimate {
    PooledEstimate { q_bar: q, w_bar: t, b: if df.is_some() { 0.1 } else { 0.0 }, t, df, m, b_zero: df.is_none() }
}

#[test]
fn coverage_conventions() {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let df = 12.0;
    let half = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975) * 0.5;
    let mut pooled = BTreeMap::new();
    pooled.insert("A".to_string(), est(3.0, 0.25, Some(df), 5));
    pooled.insert("B".to_string(), est(3.0, 0.25, None, 5));
    pooled.insert("C".to_string(), est(1.0, 0.25, Some(df), 5));
    let truth: BTreeMap<String, f64> = [("A".to_string(), 3.0 + half), ("B".to_string(), 3.0), ("C".to_string(), 3.0)].into();
    let c = ci_coverage(&pooled, &truth);
    assert_eq!((c.covered, c.fields, c.excluded_b_zero), (1, 2, 1));
    assert_eq!(c.fraction, Some(0.5));

    let one: BTreeMap<String, PooledEstimate> = [("A".to_string(), est(3.0, 0.25, Some(df), 1))].into();
    let c = ci_coverage(&one, &truth);
    assert_eq!(c.fraction, None);
    assert_eq!(c.reason.as_deref(), Some("coverage undefined for M=1"));
}

#[test]
fn rubin_then_coverage_round_trip() {
    let p = rubin_pool(&[2.9, 3.1, 3.0], &[0.01, 0.01, 0.01]).unwrap();
    let pooled: BTreeMap<String, PooledEstimate> = [("F".to_string(), p)].into();
    let c = ci_coverage(&pooled, &[("F".to_string(), 3.05)].into());
    assert_eq!(c.fraction, Some(1.0));
}

#[test]
fn weighted_aggregate_of_strata() {
    let agg = weighted_aggregate(&[(0.340, 47), (-0.410, 39)]).unwrap();
    assert!((agg - (47.0 * 0.340 - 39.0 * 0.410) / 86.0).abs() < 1e-15);
    assert!(agg.abs() < 0.005);
    assert_eq!(weighted_aggregate(&[(0.2, 10), (0.2, 30)]), Some(0.2));
    assert_eq!(weighted_aggregate(&[]), None);
}

fn mean_run(n: usize, seed: u64) -> (Arc<crate::missing::MaskedDataset>, ImputationRun) {
    let masked = Arc::new(apply_s1(Arc::new(synth(n, seed)), 0.2, seed).unwrap());
    let run = crate::impute::mean_impute(&masked);
    (masked, run)
}

#[test]
fn strata_partition_and_decomposition() {
    let (masked, run) = mean_run(200, 6);
    let rows: Vec<usize> = (0..masked.truth.len()).collect();
    let sel = CellSelection::deleted(&masked, &rows, None);
    assert!(sel.cells.iter().all(|&(r, f)| masked.truth.ordinal(r, f).is_some()));
    let report = metric_report(&ReportInput {
        method: "Mean",
        scenario: "S1",
        block: None,
        seed: 6,
        truth: &masked.truth,
        completed: &run.completed,
        deleted: &run.deleted,
        selection: &sel,
        rows: &rows,
        weights: None,
        ols: None,
        embedder: None,
    })
    .unwrap();
    assert_eq!(report.compound.n_cells + report.non_compound.n_cells, report.n_cells);
    assert!(report.rmse.powi(2) + 1e-12 >= report.signed_bias.powi(2));
    assert!(report.within1 >= report.exact);
    assert_eq!(report.ci_coverage, None);
    assert_eq!(report.coverage_note.as_deref(), Some("coverage undefined for M=1"));
    let agg = weighted_aggregate(&[
        (report.compound.signed_bias.unwrap(), report.compound.n_cells),
        (report.non_compound.signed_bias.unwrap(), report.non_compound.n_cells),
    ])
    .unwrap();
    assert!((agg - report.signed_bias).abs() < 1e-12);

    let one = CellSelection { cells: vec![sel.cells[0]], descriptor: "one".into() };
    let s = stratum_metrics(&run.completed, &masked.truth, &one).unwrap();
    assert_eq!(s.n_respondents, 1);
    assert!(s.reason.is_some());
    let empty = CellSelection { cells: vec![], descriptor: "none".into() };
    assert_eq!(stratum_metrics(&run.completed, &masked.truth, &empty).unwrap().reason.as_deref(), Some("empty stratum"));
}

#[test]
fn point_metrics_score_the_pooled_cell() {
    let (masked, _) = mean_run(120, 8);
    let truth: &Dataset = &masked.truth;
    let rows: Vec<usize> = (0..truth.len()).collect();
    let mut sel = CellSelection::deleted(&masked, &rows, None);
    sel.cells.retain(|&(r, f)| (2..=4).contains(&truth.ordinal(r, f).unwrap()));
    let (mut up, mut down) = (truth.clone(), truth.clone());
    for &(r, f) in &sel.cells {
        let c = truth.respondents[r].answers[f].unwrap();
        up.respondents[r].answers[f] = Some(c + 1);
        down.respondents[r].answers[f] = Some(c - 1);
    }
    let s = stratum_metrics(&[up.clone(), down], truth, &sel).unwrap();
    assert_eq!((s.rmse, s.mae, s.signed_bias), (Some(0.0), Some(0.0), Some(0.0)));
    assert_eq!((s.exact, s.within1), (Some(0.0), Some(1.0)));
    let single = stratum_metrics(&[up], truth, &sel).unwrap();
    assert_eq!((single.rmse, single.signed_bias), (Some(1.0), Some(1.0)));
}

#[test]
fn gate_names_bad_cell_and_fails_closed_without_mnar() {
    let (masked, mut run) = mean_run(150, 7);
    let (r, f) = masked.deleted_cells()[0];
    let bundle = RunBundle {
        scenarios: vec![ScenarioRun { seed: 7, masked: masked.clone(), maskable_from: 0, runs: vec![run.clone()], weights: vec![] }],
    };
    let gate = sanity_gate(&bundle);
    assert_eq!(gate.checks[3].status, CheckStatus::NotRun);
    assert_eq!(gate.checks[1].status, CheckStatus::NotRun);
    assert_eq!(gate.checks[2].status, CheckStatus::Pass);
    assert_eq!(gate.checks[4].status, CheckStatus::Pass);
    assert!(!gate.passed());

    run.completed[0].respondents[r].answers[f] = None;
    let bad = RunBundle { scenarios: vec![ScenarioRun { seed: 7, masked: masked.clone(), maskable_from: 0, runs: vec![run], weights: vec![] }] };
    let gate = sanity_gate(&bad);
    assert_eq!(gate.checks[2].status, CheckStatus::Fail);
    let id = &masked.truth.respondents[r].id;
    let name = &masked.truth.codebook.fields[f].name;
    assert!(gate.checks[2].detail.contains(id.as_str()) && gate.checks[2].detail.contains(name.as_str()));
}

#[test]
fn gate_flags_altered_observed_cell() {
    let (masked, mut run) = mean_run(150, 8);
    let cb = masked.truth.codebook.clone();
    let (r, f) = (0..masked.truth.len())
        .flat_map(|r| cb.target_fields().into_iter().map(move |f| (r, f)))
        .find(|&(r, f)| !masked.is_deleted(r, f) && masked.truth.respondents[r].answers[f].is_some())
        .unwrap();
    let old = run.completed[0].respondents[r].answers[f].unwrap();
    run.completed[0].respondents[r].answers[f] = Some((old + 1) % 5);
    let bundle = RunBundle { scenarios: vec![ScenarioRun { seed: 8, masked, maskable_from: 0, runs: vec![run], weights: vec![] }] };
    assert_eq!(sanity_gate(&bundle).checks[4].status, CheckStatus::Fail);
}

#[test]
fn mice_between_variance_positive() {
    let masked = Arc::new(apply_s1(Arc::new(synth(150, 9)), 0.2, 9).unwrap());
    let run = mice_pmm(&masked, &MiceConfig { iters: 3, ..Default::default() }, 9).unwrap();
    let bundle = RunBundle { scenarios: vec![ScenarioRun { seed: 9, masked, maskable_from: 0, runs: vec![run], weights: vec![] }] };
    assert_eq!(sanity_gate(&bundle).checks[0].status, CheckStatus::Pass);
}

#[test]
fn reference_matches_stub_marginal() {
    let ds = synth(300, 10);
    let (train, valid) = crate::survey::split(&ds, 10, 0.8).unwrap();
    let ctx = Arc::new(crate::llm::TrainingContext::new(Arc::new(train), Arc::new(HashedEmbedder::default())).unwrap());
    let engine = crate::llm::Engine::new(MethodConfig::new(MethodKind::Marginal), ctx.clone(), 1).unwrap();
    for r in valid.respondents.iter().take(25) {
        let persona = crate::llm::Persona::block_a(r, &valid.codebook);
        let stub = engine.predict(&persona, &StubProvider).unwrap().answers;
        let reference = reference_predict(&ctx.pmt, &persona.answers).unwrap();
        assert_eq!(stub, reference);
    }
}

fn small_config(methods: Vec<MethodSpec>, mechs: Vec<Mechanism>) -> BenchmarkConfig {
    BenchmarkConfig {
        methods,
        mechanisms: mechs,
        seeds: vec![1],
        ablation: false,
        mice: MiceConfig { m: 2, iters: 2, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn single_cell_grid_gives_one_row() {
    let ds = synth(200, 11);
    let cfg = small_config(vec![MethodSpec::llm(MethodKind::Marginal)], vec![Mechanism::S1]);
    let rep = run_benchmark(&ds, &cfg, &StubProvider, Arc::new(HashedEmbedder::default())).unwrap();
    let c = rep.reports.iter().filter(|r| r.block == "Block C").count();
    assert_eq!(c, 1);
    let table = rep.block_table(crate::survey::Block::C);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("Marginal-TLM"));
}

#[test]
fn benchmark_outputs_are_byte_identical_on_rerun() {
    let ds = synth(200, 12);
    let mut cfg = small_config(vec![MethodSpec::Mean, MethodSpec::llm(MethodKind::Atlm)], vec![Mechanism::S1, Mechanism::S4]);
    cfg.ablation = true;
    let emb: Arc<dyn crate::llm::Embedder> = Arc::new(HashedEmbedder::default());
    let a = run_benchmark(&ds, &cfg, &StubProvider, emb.clone()).unwrap();
    let b = run_benchmark(&ds, &cfg, &StubProvider, emb).unwrap();
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    assert!(a.write(da.path(), false).is_err());
    let fa = a.write(da.path(), true).unwrap();
    b.write(db.path(), true).unwrap();
    for p in fa {
        let name = p.file_name().unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(db.path().join(name)).unwrap(), "{name:?}");
    }
    assert_eq!(a.ablation.len(), 8);
    let header = std::fs::read_to_string(da.path().join("metrics.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), report::REPORT_COLUMNS.len());
}

#[test]
fn stage3_reports_three_blocks() {
    let ds = synth(250, 13);
    let (train, valid) = crate::survey::split(&ds, 13, 0.8).unwrap();
    let methods = [MethodConfig::new(MethodKind::Zs), MethodConfig::new(MethodKind::Marginal)];
    let rep = evaluate_stage3(Arc::new(train), &valid, &methods, &StubProvider, Arc::new(HashedEmbedder::default()), 13).unwrap();
    assert_eq!(rep.reports.len(), 6);
    let combined = rep.reports.iter().find(|r| r.method == "Marginal-TLM" && r.block == "Combined").unwrap();
    assert_eq!(combined.similarity_kind.as_deref(), Some("fallback-similarity"));
    let table = rep.mae_table();
    assert!(table.contains("ZS-LLM") && table.contains("Blk C"));
    let zs = rep.reports.iter().find(|r| r.method == "ZS-LLM" && r.block == "Combined").unwrap();
    assert!(zs.mae > 0.0);
}
