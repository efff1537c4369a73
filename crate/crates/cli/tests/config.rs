use proptest::prelude::*;
use serde_json::json;

use pmtkg::eval::BenchmarkConfig;
use pmtkg::impute::{ForestConfig, IpwConfig, MiceConfig};
use pmtkg::missing::MechanismParams;
use pmtkg_assistant::service::ServiceConfig;
use pmtkg_cli::config::merge;
use pmtkg_cli::{parse_pair, parse_seeds, parse_shift, CliConfig, Seeds};

#[test]
fn shipped_defaults_match_library_defaults() {
    let c = CliConfig::defaults();
    assert_eq!(c.benchmark, BenchmarkConfig::default());
    assert_eq!(c.simulate.params, MechanismParams::default());
    assert_eq!(c.impute.mice, MiceConfig::default());
    assert_eq!(c.impute.forest, ForestConfig::default());
    assert_eq!(c.impute.ipw, IpwConfig::default());
    assert_eq!(c.serve, ServiceConfig::default());
    assert_eq!(c.coverage.divergence_threshold, 3.0);
    assert_eq!(CliConfig::load(None).unwrap(), c);
}

#[test]
fn file_overrides_single_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"impute": {"mice": {"m": 20}}, "benchmark": {"seeds": [7, 8]}}"#).unwrap();
    let c = CliConfig::load(Some(&p)).unwrap();
    let d = CliConfig::defaults();
    assert_eq!(c.impute.mice.m, 20);
    assert_eq!(c.impute.mice.iters, d.impute.mice.iters);
    assert_eq!(c.benchmark.seeds, vec![7, 8]);
    assert_eq!(c.benchmark.methods, d.benchmark.methods);

    std::fs::write(&p, r#"{"impute": {"mcie": {}}}"#).unwrap();
    assert!(CliConfig::load(Some(&p)).is_err());
    std::fs::write(&p, "[1, 2]").unwrap();
    assert!(CliConfig::load(Some(&p)).is_err());
    assert!(CliConfig::load(Some(&dir.path().join("absent.json"))).is_err());
}

#[test]
fn seed_syntax() {
    assert_eq!(parse_seeds("1..5").unwrap(), Seeds(vec![1, 2, 3, 4, 5]));
    assert_eq!(parse_seeds("1..=3").unwrap(), Seeds(vec![1, 2, 3]));
    assert_eq!(parse_seeds("4").unwrap(), Seeds(vec![4]));
    assert_eq!(parse_seeds("2, 9,3").unwrap(), Seeds(vec![2, 9, 3]));
    for bad in ["5..1", "a..3", "", "1,,2", "-1"] {
        assert!(parse_seeds(bad).is_err(), "{bad}");
    }
}

#[test]
fn pair_syntax() {
    assert_eq!(parse_pair("Flex_Work=Not flexible").unwrap(), ("Flex_Work".into(), "Not flexible".into()));
    assert!(parse_pair("Flex_Work").is_err());
    assert_eq!(parse_shift("Prep_Stress=-0.6").unwrap(), ("Prep_Stress".into(), -0.6));
    assert!(parse_shift("Prep_Stress=lots").is_err());
}

fn leaf() -> impl Strategy<Value = serde_json::Value> {
    prop_oneof![any::<i32>().prop_map(|x| json!(x)), "[a-z]{0,3}".prop_map(|s| json!(s)), Just(json!(null))]
}

fn value() -> impl Strategy<Value = serde_json::Value> {
    leaf().prop_recursive(3, 24, 4, |inner| {
        prop::collection::btree_map("[a-c]", inner, 0..4).prop_map(|m| serde_json::to_value(m).unwrap())
    })
}

proptest! {
    #[test]
    fn merge_over_self_is_identity(v in value()) {
        let mut a = v.clone();
        merge(&mut a, v.clone());
        prop_assert_eq!(a, v);
    }

    #[test]
    fn merge_over_empty_object_is_noop(v in value()) {
        let mut a = v.clone();
        merge(&mut a, json!({}));
        if v.is_object() {
            prop_assert_eq!(a, v);
        }
    }

    #[test]
    fn merged_leaves_come_from_the_override(base in value(), over in value()) {
        let mut a = base.clone();
        merge(&mut a, over.clone());
        fn check(a: &serde_json::Value, o: &serde_json::Value) -> bool {
            match (a, o) {
                (serde_json::Value::Object(am), serde_json::Value::Object(om)) => {
                    om.iter().all(|(k, ov)| am.get(k).is_some_and(|av| check(av, ov)))
                }
                _ => a == o,
            }
        }
        prop_assert!(check(&a, &over));
    }

    #[test]
    fn seed_ranges_are_inclusive(a in 0u64..1000, len in 0u64..50) {
        let s = parse_seeds(&format!("{a}..{}", a + len)).unwrap();
        prop_assert_eq!(s.0.len() as u64, len + 1);
        prop_assert_eq!(s.0[0], a);
    }
}
