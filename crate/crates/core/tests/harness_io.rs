use std::path::{Path, PathBuf};

use obstacle_ldp::harness::{
    compare_baseline, config_schema, execute, read_report, run, Baseline, ExperimentConfig,
};
use obstacle_ldp::Error;
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(format!("{name}.json"))).unwrap()
}

#[test]
fn schema_file_is_current() {
    let on_disk = std::fs::read_to_string(configs_dir().join("schema.json")).unwrap();
    let fresh = serde_json::to_string_pretty(&config_schema()).unwrap() + "\n";
    assert!(on_disk == fresh, "configs/schema.json is stale");
}

#[test]
fn every_bundled_config_validates() {
    for e in std::fs::read_dir(configs_dir()).unwrap() {
        let path = e.unwrap().path();
        if path.ends_with("schema.json") {
            continue;
        }
        let c = ExperimentConfig::load(&path).unwrap();
        c.validate().unwrap();
    }
}

#[test]
fn run_writes_report_and_hashed_manifest() {
    let config = load("condition_ii");
    let dir = tempfile::tempdir().unwrap();
    let out = run(&config, dir.path()).unwrap();
    assert!(out.report.passed);
    let back = read_report(&dir.path().join("report.json")).unwrap();
    assert_eq!(back, out.report);
    assert_eq!(out.manifest.config_hash, config.hash());
    assert!(!out.manifest.artifacts.is_empty());
    for name in out.manifest.artifacts.keys() {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
}

#[test]
fn seed_override_changes_stochastic_results() {
    let mut config = load("star_check");
    let (a, _) = execute(&config).unwrap();
    config.seeds.base += 1;
    let (b, _) = execute(&config).unwrap();
    assert_ne!(a.results["mean_gap"], b.results["mean_gap"]);
    let baseline = Baseline::from_report(&a, 1e-6, 1e-9);
    assert!(compare_baseline(&a, &baseline).unwrap().passed);
    assert!(!compare_baseline(&b, &baseline).unwrap().passed);
}

#[test]
fn baseline_of_another_kind_is_rejected() {
    let (a, _) = execute(&load("penalization_study")).unwrap();
    let (b, _) = execute(&load("condition_ii")).unwrap();
    let baseline = Baseline::from_report(&a, 1e-6, 1e-9);
    assert!(matches!(compare_baseline(&b, &baseline), Err(Error::Schema(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_json_round_trip(seed in 0u64..1_000_000, n_t in 1usize..500, t_final in 0.1f64..5.0) {
        let mut c = load("skeleton_solve");
        c.seeds.base = seed;
        c.mesh.n_t = n_t;
        c.mesh.t_final = t_final;
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}
