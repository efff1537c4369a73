use std::sync::Arc;

use super::*;
use crate::missing::{apply, apply_s1, apply_s4, Mechanism, MechanismParams, MissingnessMask};
use crate::survey::{Codebook, Dataset};
use crate::synth::{generate, GeneratorConfig};

fn synth(n: usize, seed: u64) -> Arc<Dataset> {
    Arc::new(generate(&GeneratorConfig::milton_like().with_n_seed(n, seed), Arc::new(Codebook::milton())).unwrap())
}

fn custom_mask(ds: Arc<Dataset>, cells: Vec<Vec<bool>>) -> MaskedDataset {
    let mask = MissingnessMask {
        mechanism: Mechanism::S1,
        seed: 0,
        params: MechanismParams::default(),
        respondent_ids: ds.respondents.iter().map(|r| r.id.clone()).collect(),
        fields: ds.codebook.fields.iter().map(|f| f.name.clone()).collect(),
        cells,
    };
    MaskedDataset::new(ds, mask).unwrap()
}

#[test]
fn rubin_hand_example() {
    let p = rubin_pool(&[2.0, 2.2], &[0.04, 0.04]).unwrap();
    assert!((p.q_bar - 2.1).abs() < 1e-12);
    assert!((p.b - 0.02).abs() < 1e-12);
    assert!((p.t - 0.07).abs() < 1e-12);
    assert!(!p.b_zero);
}

#[test]
fn rubin_flags_zero_between_variance() {
    let p = rubin_pool(&[1.5, 1.5, 1.5], &[0.1, 0.2, 0.3]).unwrap();
    assert!(p.b_zero);
    assert_eq!(p.df, None);
    assert!((p.t - 0.2).abs() < 1e-12);
    assert!(rubin_pool(&[1.0], &[0.1]).is_err());
}

#[test]
fn sandwich_equal_weights() {
    let y = [1.0, 2.0, 3.0, 6.0];
    let (mu, v) = sandwich_weighted_mean(&y, &[2.0; 4]).unwrap();
    assert!((mu - 3.0).abs() < 1e-12);
    // Σ(y−μ)² / n² = 14 / 16
    assert!((v - 14.0 / 16.0).abs() < 1e-12);
}

#[test]
fn pmm_donor_rule_on_toy_column() {
    let pred = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
    let vals = [1.0, 1.0, 2.0, 2.0, 3.0, 2.0, 3.0, 5.0];
    let donors = pmm_donors(&pred, 4.0, 5);
    let mut picked: Vec<f64> = donors.iter().map(|&i| vals[i]).collect();
    picked.sort_by(f64::total_cmp);
    assert_eq!(picked, vec![2.0, 2.0, 2.0, 3.0, 3.0]);
    assert_eq!(donors, vec![4, 3, 5, 2, 6]);
}

#[test]
fn mean_impute_rounds_and_falls_back() {
    let ds = synth(5, 1);
    let cb = ds.codebook.clone();
    let f = cb.require("Time_Family").unwrap();
    let g = cb.require("Prep_Stress").unwrap();
    let mut ds2 = (*ds).clone();
    // observed ordinals 2, 2, 3, 2 → mean 2.25 → 2
    for (r, v) in [1u8, 1, 2, 1].iter().enumerate() {
        ds2.respondents[r + 1].answers[f] = Some(*v);
    }
    let ds2 = Arc::new(ds2);
    let mut cells = vec![vec![false; cb.len()]; 5];
    cells[0][f] = true;
    for row in cells.iter_mut() {
        row[g] = true;
    }
    let m = custom_mask(ds2, cells);
    let run = mean_impute(&m);
    assert_eq!(run.completed[0].ordinal(0, f), Some(2));
    for r in 0..5 {
        assert_eq!(run.completed[0].ordinal(r, g), Some(3));
    }
    assert_eq!(run.out_of_range(), 0);
}

#[test]
fn zero_deletions_is_identity() {
    let ds = synth(40, 2);
    let cells = vec![vec![false; ds.codebook.len()]; ds.len()];
    let m = custom_mask(ds.clone(), cells);
    let mice = mice_pmm(&m, &MiceConfig::default(), 1).unwrap();
    assert_eq!(mice.m(), 5);
    for c in &mice.completed {
        assert_eq!(c.respondents, ds.respondents);
    }
    let mf = missforest(&m, &ForestConfig::default(), 1);
    assert_eq!(mf.completed[0].respondents, ds.respondents);
    assert_eq!(mean_impute(&m).completed[0].respondents, ds.respondents);
}

#[test]
fn imputers_preserve_observed_and_range() {
    let ds = synth(150, 3);
    let m = apply_s1(ds, 0.2, 42).unwrap();
    let cfg = ForestConfig { trees: 10, ..Default::default() };
    for run in [mean_impute(&m), mice_pmm(&m, &MiceConfig { iters: 3, ..Default::default() }, 7).unwrap(), missforest(&m, &cfg, 7)] {
        assert!(run.preserves_observed(&m), "{}", run.method);
        assert_eq!(run.out_of_range(), 0, "{}", run.method);
    }
}

#[test]
fn pmm_values_are_observed_donor_values() {
    let ds = synth(120, 4);
    let m = apply_s1(ds, 0.2, 42).unwrap();
    let run = mice_pmm(&m, &MiceConfig { iters: 2, m: 2, ..Default::default() }, 3).unwrap();
    for k in 0..run.m() {
        for (_, f, v) in run.imputed_ordinals(k) {
            let observed: Vec<u8> = (0..m.observed.len()).filter_map(|r| m.observed.ordinal(r, f)).collect();
            assert!(observed.contains(&v.unwrap()));
        }
    }
}

#[test]
fn mice_and_forest_deterministic() {
    let ds = synth(100, 5);
    let m = apply_s1(ds, 0.2, 1).unwrap();
    let cfg = MiceConfig { iters: 2, ..Default::default() };
    let a = mice_pmm(&m, &cfg, 9).unwrap();
    let b = mice_pmm(&m, &cfg, 9).unwrap();
    assert_eq!(a.completed.iter().map(|d| &d.respondents).collect::<Vec<_>>(), b.completed.iter().map(|d| &d.respondents).collect::<Vec<_>>());
    let fc = ForestConfig { trees: 8, max_iter: 3, ..Default::default() };
    assert_eq!(missforest(&m, &fc, 9).completed[0].respondents, missforest(&m, &fc, 9).completed[0].respondents);
}

#[test]
fn tree_fits_step_function() {
    let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let y: Vec<f64> = x.iter().map(|&v| if v < 10.0 { 1.0 } else { 4.0 }).collect();
    let rows: Vec<usize> = (0..20).collect();
    let mut rng = crate::rng::stream(1, &[b"t"]);
    let t = RegressionTree::fit(&x, 1, &y, &rows, &TreeParams { max_depth: 3, min_leaf: 1, mtry: 1 }, &mut rng);
    assert_eq!(t.predict(&[3.0]), 1.0);
    assert_eq!(t.predict(&[15.0]), 4.0);
}

#[test]
fn ipw_weights_capped_and_pooled() {
    let ds = synth(300, 6);
    let m = apply_s4(ds, 0.35, 42).unwrap();
    let cfg = IpwConfig { mice: MiceConfig { iters: 2, ..Default::default() }, ..Default::default() };
    let res = ipw_mi(&m, &cfg, 11).unwrap();
    assert!(res.weights.max_weight() <= 10.0);
    assert!(res.weights.weights.iter().flatten().all(|&w| w >= 1.0));
    let excluded = exclusion(&m, 0.5);
    for (r, e) in excluded.iter().enumerate() {
        assert_eq!(*e, res.weights.weights[r].is_none());
        if m.truth.respondents[r].flags.compound {
            assert!(*e);
        }
    }
    assert!(res.pooled.values().any(|p| p.b > 0.0));
    assert!(res.run.preserves_observed(&m));
}

#[test]
fn ipw_all_included_is_unweighted() {
    let ds = synth(60, 7);
    let m = apply(ds, Mechanism::S1, MechanismParams { s1_rate: 0.01, ..Default::default() }, 3).unwrap();
    assert!(exclusion(&m, 0.5).iter().all(|e| !e));
    let cfg = IpwConfig { mice: MiceConfig { iters: 1, ..Default::default() }, ..Default::default() };
    let res = ipw_mi(&m, &cfg, 2).unwrap();
    assert!(res.weights.weights.iter().all(|w| *w == Some(1.0)));
    assert!(res.weights.coefficients.is_empty());
    let f = m.truth.codebook.require("Time_Family").unwrap();
    let first = &res.run.completed[0];
    let vals: Vec<f64> = (0..first.len()).filter_map(|r| first.ordinal(r, f)).map(f64::from).collect();
    let est = res.pooled["Time_Family"].clone();
    let means: Vec<f64> = res
        .run
        .completed
        .iter()
        .map(|d| {
            let v: Vec<f64> = (0..d.len()).filter_map(|r| d.ordinal(r, f)).map(f64::from).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    assert!((est.q_bar - means.iter().sum::<f64>() / means.len() as f64).abs() < 1e-12);
    assert_eq!(vals.len(), first.len());
}
