#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use sepsis_core::cohort::TimestepRecord;
use sepsis_core::simgen::GroundTruthMdp;
use sepsis_core::study::{CaseReferences, Choice, Decision, ReferenceDecisions};
use sepsis_service::config::{EvaluationConfig, TrainConfig};
use sepsis_service::dataset::Dataset;
use sepsis_service::decisions::DecisionLog;
use sepsis_service::pipeline::train;
use sepsis_service::state::{AppState, ServeConfig, Served};
use sepsis_service::ModelBundle;
use tempfile::TempDir;

pub fn six_state_data(n_patients: usize, seed: u64) -> Dataset {
    let truth = GroundTruthMdp::six_state_oracle(8.0);
    let s = truth.sample_cohort(n_patients, seed, 20).unwrap();
    Dataset {
        schema: truth.schema,
        cohort: s.trajectories,
        ingest: None,
    }
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        k: 6,
        n_restarts: 2,
        seed,
        evaluation: EvaluationConfig {
            n_boot: 50,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn trained(n_patients: usize, seed: u64) -> (Dataset, ModelBundle) {
    let data = six_state_data(n_patients, seed);
    let bundle = train(&data, &small_config(seed)).unwrap();
    (data, bundle)
}

/// Reference decisions for two cases: `zero` sits on a timestep with no
/// vasopressor or fluid running, `running` on one with both running.
pub fn references(data: &Dataset) -> ReferenceDecisions {
    let find = |pred: fn(&TimestepRecord) -> bool| {
        data.cohort
            .iter()
            .find_map(|p| {
                p.timesteps
                    .iter()
                    .find(|r| pred(r))
                    .map(|r| (p.patient_id.clone(), r.bin_index))
            })
            .expect("fixture has both kinds of timestep")
    };
    let d = |fluid, vaso| Decision { fluid, vaso };
    let case = |(pid, bin): (String, u32)| CaseReferences {
        ai: d(Choice::Increase, Choice::Increase),
        original_clinician: d(Choice::NoChange, Choice::Increase),
        majority_attending: d(Choice::Increase, Choice::NoChange),
        patient_id: Some(pid),
        bin_index: Some(bin),
        dose: Default::default(),
    };
    [
        (
            "zero".to_string(),
            case(find(|r| r.vaso_dose == 0.0 && r.fluid_dose == 0.0)),
        ),
        (
            "running".to_string(),
            case(find(|r| r.vaso_dose > 0.0 && r.fluid_dose > 0.0)),
        ),
    ]
    .into_iter()
    .collect()
}

pub struct Fixture {
    pub dir: TempDir,
    pub config: ServeConfig,
    pub data: Dataset,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// Writes a trained bundle, the cohort, and reference decisions into a
/// temporary directory.
pub fn fixture(n_patients: usize, seed: u64) -> Fixture {
    let (data, bundle) = trained(n_patients, seed);
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    bundle.save(&p("bundle")).unwrap();
    data.write_jsonl(&p("cohort")).unwrap();
    let refs = references(&data);
    std::fs::write(p("references.json"), serde_json::to_string(&refs).unwrap()).unwrap();
    let config = ServeConfig {
        bundle: p("bundle"),
        cohort: p("cohort"),
        decisions: p("decisions.jsonl"),
        references: Some(p("references.json")),
        token: None,
        pseudonym_seed: 7,
        study_mode: false,
    };
    Fixture { dir, config, data }
}

pub fn state_from(served: Served, decisions: &Path, config: ServeConfig) -> Arc<AppState> {
    AppState::from_parts(served, DecisionLog::open(decisions).unwrap(), config)
}

/// Serves on an ephemeral local port and returns the base URL.
pub async fn spawn(state: Arc<AppState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, sepsis_service::router(state))
            .await
            .unwrap();
    });
    format!("http://{addr}")
}

pub fn decision_body(case_id: &str, condition: &str, fluid: &str, vaso: &str) -> serde_json::Value {
    let mut likert = serde_json::json!({ "confidence": 5, "difficulty": 3 });
    if condition != "no_ai" {
        likert["usefulness"] = 4.into();
        likert["ai_confidence_effect"] = 4.into();
    }
    serde_json::json!({
        "participant_id": "P1",
        "role": "attending",
        "years_experience": "5-10",
        "case_id": case_id,
        "condition": condition,
        "fluid_choice": fluid,
        "vaso_choice": vaso,
        "likert": likert,
    })
}
