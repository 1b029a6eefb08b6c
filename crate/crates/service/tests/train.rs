//! Training pipeline, bundle persistence and the command-line tool.

mod common;

use std::process::Command;

use common::{six_state_data, small_config, trained};
use sepsis_core::simgen::GroundTruthMdp;
use sepsis_service::bundle::{matrices_identical, BundleError};
use sepsis_service::dataset::Dataset;
use sepsis_service::pipeline::{train, train_to_dir, Stage};
use sepsis_service::{ModelBundle, TrainConfig};

#[test]
fn bundle_round_trip_is_bit_identical() {
    let (_, bundle) = trained(400, 3);
    let q = &bundle.mdp.solution.as_ref().unwrap().q;
    assert!(
        q.iter().any(|x| x.is_nan()),
        "fixture should have unestimated actions"
    );
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    bundle.save(&out).unwrap();
    let loaded = ModelBundle::load(&out).unwrap();
    assert!(matrices_identical(&bundle, &loaded));
    assert_eq!(loaded.states, bundle.states);
    assert_eq!(loaded.provenance, bundle.provenance);
    assert_eq!(loaded.evaluation, bundle.evaluation);
    assert_eq!(loaded.mdp.visits, bundle.mdp.visits);

    // saving the loaded bundle reproduces the files byte for byte
    let again = dir.path().join("c");
    loaded.save(&again).unwrap();
    for f in [
        "bundle.json",
        "q.bin",
        "behavior.bin",
        "values.bin",
        "evaluation.json",
    ] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(matches!(bundle.save(&out), Err(BundleError::Exists(_))));
}

#[test]
fn tampered_blob_fails_checksum() {
    let (_, bundle) = trained(300, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    bundle.save(&out).unwrap();
    let mut bytes = std::fs::read(out.join("q.bin")).unwrap();
    bytes[3] ^= 1;
    std::fs::write(out.join("q.bin"), bytes).unwrap();
    let err = ModelBundle::load(&out).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let data = six_state_data(300, 5);
    let a = train(&data, &small_config(1)).unwrap();
    let b = train(&data, &small_config(1)).unwrap();
    assert!(matrices_identical(&a, &b));
    assert_eq!(a.provenance.cohort_hash, b.provenance.cohort_hash);
    let c = train(&data, &small_config(2)).unwrap();
    assert_ne!(a.provenance.config_hash, c.provenance.config_hash);
}

#[test]
fn held_out_evaluation_is_reported() {
    let (_, bundle) = trained(500, 8);
    let e = bundle.evaluation.as_ref().unwrap();
    assert_eq!(bundle.provenance.n_test_patients, 100);
    assert_eq!(e.n_test_episodes, 100);
    assert!((-100.0..=100.0).contains(&e.wis.value));
    assert!(e.wis.ci_lo <= e.wis.value && e.wis.value <= e.wis.ci_hi);
    assert_eq!(e.wis.n_boot, 50);
}

#[test]
fn too_many_states_abort_at_fit_states_and_leave_nothing() {
    let data = six_state_data(3, 1);
    let dir = tempfile::tempdir().unwrap();
    data.write_jsonl(&dir.path().join("cohort")).unwrap();
    let out = dir.path().join("bundle");
    let config = TrainConfig {
        k: 500,
        ..small_config(1)
    };
    let err = train_to_dir(&dir.path().join("cohort"), &config, &out).unwrap_err();
    assert_eq!(err.stage, Stage::FitStates);
    assert!(err.to_string().contains("insufficient data"), "{err}");
    assert!(!out.exists());
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, vec!["cohort".to_string()]);
}

#[test]
fn stage_errors_name_their_stage() {
    let mut data = six_state_data(50, 1);
    data.cohort[3].timesteps[0].fluid_dose = f64::NAN;
    let err = train(&data, &small_config(1)).unwrap_err();
    assert_eq!(err.stage, Stage::Validate);
    let data = six_state_data(50, 1);
    let config = TrainConfig {
        features: Some(vec!["nope".into()]),
        ..small_config(1)
    };
    assert_eq!(train(&data, &config).unwrap_err().stage, Stage::FitStates);
    let one = Dataset {
        cohort: data.cohort[..1].to_vec(),
        ..data.clone()
    };
    assert_eq!(
        train(&one, &small_config(1)).unwrap_err().stage,
        Stage::Split
    );
    let config = TrainConfig {
        gamma: 0.0,
        ..small_config(1)
    };
    assert_eq!(train(&data, &config).unwrap_err().stage, Stage::Config);
}

#[test]
fn raw_events_and_binned_cohort_train_the_same_model() {
    let data = six_state_data(300, 4);
    let dir = tempfile::tempdir().unwrap();
    data.write_events(&dir.path().join("events")).unwrap();
    let ingested = Dataset::load(&dir.path().join("events")).unwrap();
    assert!(ingested.ingest.as_ref().unwrap().rejected.is_empty());
    assert_eq!(ingested.cohort_hash(), data.cohort_hash());
    let a = train(&data, &small_config(1)).unwrap();
    let b = train(&ingested, &small_config(1)).unwrap();
    assert!(matrices_identical(&a, &b));
}

fn sepsis(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sepsis"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let out = sepsis(&[
        "simgen",
        "--patients",
        "300",
        "--seed",
        "2",
        "--out",
        &p("cohort"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let truth: GroundTruthMdp =
        serde_json::from_str(&std::fs::read_to_string(p("cohort/ground_truth.json")).unwrap())
            .unwrap();
    assert_eq!(truth.n_states, 6);

    std::fs::write(
        p("train.toml"),
        "k = 6\nn_restarts = 2\nseed = 1\n[evaluation]\nn_boot = 20\n",
    )
    .unwrap();
    let out = sepsis(&[
        "train",
        "--cohort",
        &p("cohort"),
        "--config",
        &p("train.toml"),
        "--out",
        &p("bundle"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("WIS"));

    let out = sepsis(&[
        "evaluate",
        "--bundle",
        &p("bundle"),
        "--cohort",
        &p("cohort"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let wis: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(wis["n_traj"], 300);

    std::fs::write(p("big.json"), r#"{"k": 100000}"#).unwrap();
    let out = sepsis(&[
        "train",
        "--cohort",
        &p("cohort"),
        "--config",
        &p("big.json"),
        "--out",
        &p("big"),
    ]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("stage fit_states failed: insufficient data")
    );
    assert!(!dir.path().join("big").exists());

    let refs = common::references(&Dataset::load(dir.path().join("cohort").as_path()).unwrap());
    std::fs::write(p("refs.json"), serde_json::to_string(&refs).unwrap()).unwrap();
    std::fs::write(p("log.jsonl"), "").unwrap();
    let out = sepsis(&[
        "report",
        "--decisions",
        &p("log.jsonl"),
        "--references",
        &p("refs.json"),
        "--format",
        "json",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n_records"], 0);
}
