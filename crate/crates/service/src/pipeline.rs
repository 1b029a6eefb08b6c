//! The training pipeline: validate, split by patient, cluster states, fit the
//! action grid, estimate and solve the MDP, and evaluate on held-out patients.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use sepsis_core::cohort::{validate_cohort, PatientTrajectory, DEMOGRAPHIC_FEATURES};
use sepsis_core::mdp::{encode_cohort, fit_action_space, ActionSpace, Episode};
use sepsis_core::ope::{episode_return, evaluate_greedy, OpeConfig, WisEstimate};
use sepsis_core::seeding;
use sepsis_core::statespace::fit_states;
use sepsis_core::{Mdp, States};

use crate::bundle::{EvaluationReport, ModelBundle, Provenance};
use crate::config::TrainConfig;
use crate::dataset::Dataset;

pub const REPORT_VERSION: u32 = 1;

// Seed streams derived from the configured seed.
const SPLIT_STREAM: u64 = 1;
const STATES_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Validate,
    Split,
    FitStates,
    FitActionSpace,
    EstimateMdp,
    PolicyIteration,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Validate => "validate",
            Stage::Split => "split",
            Stage::FitStates => "fit_states",
            Stage::FitActionSpace => "fit_action_space",
            Stage::EstimateMdp => "estimate_mdp",
            Stage::PolicyIteration => "policy_iteration",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {message}")]
pub struct TrainError {
    pub stage: Stage,
    pub message: String,
}

fn fail(stage: Stage) -> impl Fn(String) -> TrainError {
    move |message| TrainError { stage, message }
}

/// Patient indices `(train, test)`. Patients are ordered by id before the
/// seeded shuffle, so the split does not depend on input order.
pub fn split_by_patient(
    cohort: &[PatientTrajectory],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let n = cohort.len();
    if n < 2 {
        return Err(fail(Stage::Split)(format!(
            "need at least 2 patients to hold some out, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cohort[a].patient_id.cmp(&cohort[b].patient_id));
    order.shuffle(&mut seeding::stream(seed, SPLIT_STREAM));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut test = order.split_off(n - n_test);
    order.sort_unstable();
    test.sort_unstable();
    Ok((order, test))
}

/// Held-out evaluation of a solved model.
pub fn evaluate(
    mdp: &Mdp,
    states: &States,
    space: &ActionSpace,
    cohort: &[PatientTrajectory],
    config: &OpeConfig,
) -> Result<(WisEstimate<f64>, Vec<Episode>), TrainError> {
    let policy = mdp
        .policy()
        .ok_or_else(|| fail(Stage::Evaluate)("the MDP is not solved".into()))?;
    let episodes = encode_cohort(cohort, states, space);
    let wis = evaluate_greedy(mdp, policy, &episodes, config)
        .map_err(|e| fail(Stage::Evaluate)(e.to_string()))?;
    Ok((wis, episodes))
}

/// Runs every stage in memory.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<ModelBundle, TrainError> {
    config
        .validate()
        .map_err(|e| fail(Stage::Config)(e.to_string()))?;
    let summary = validate_cohort(&data.cohort);
    if !summary.is_valid() {
        let shown: Vec<String> = summary
            .violations
            .iter()
            .take(5)
            .map(|v| match (&v.patient_id, v.bin) {
                (Some(p), Some(b)) => format!("{p} bin {b}: {}", v.rule),
                (Some(p), None) => format!("{p}: {}", v.rule),
                _ => v.rule.clone(),
            })
            .collect();
        return Err(fail(Stage::Validate)(format!(
            "{} violation(s): {}",
            summary.violations.len(),
            shown.join("; ")
        )));
    }

    let (train_idx, test_idx) = split_by_patient(&data.cohort, config.test_fraction, config.seed)?;
    let pick = |idx: &[usize]| -> Vec<PatientTrajectory> {
        idx.iter().map(|&i| data.cohort[i].clone()).collect()
    };
    let (train, test) = (pick(&train_idx), pick(&test_idx));

    let features = config
        .features
        .clone()
        .unwrap_or_else(|| data.schema.clustering_features());
    if let Some(f) = features
        .iter()
        .find(|f| data.schema.get(f).is_none() && !DEMOGRAPHIC_FEATURES.contains(&f.as_str()))
    {
        return Err(fail(Stage::FitStates)(format!("unknown feature {f}")));
    }
    let states: States = fit_states(
        &train,
        &features,
        config.k,
        seeding::derive_seed(config.seed, STATES_STREAM),
        config.n_restarts,
    )
    .map_err(|e| fail(Stage::FitStates)(e.to_string()))?;
    let space = fit_action_space(&train).map_err(|e| fail(Stage::FitActionSpace)(e.to_string()))?;
    let episodes = encode_cohort(&train, &states, &space);
    let mdp = Mdp::from_episodes(config.k, &episodes, config.gamma, config.min_count)
        .map_err(|e| fail(Stage::EstimateMdp)(e.to_string()))?;
    let mdp = mdp
        .policy_iteration()
        .map_err(|e| fail(Stage::PolicyIteration)(e.to_string()))?;

    let (wis, test_episodes) = evaluate(&mdp, &states, &space, &test, &config.ope_config())?;
    let sol = mdp.solution.as_ref().expect("solved");
    let clinician_return = test_episodes
        .iter()
        .map(|e| episode_return(e, config.gamma))
        .sum::<f64>()
        / test_episodes.len() as f64;
    let evaluation = EvaluationReport {
        schema_version: REPORT_VERSION,
        wis,
        clinician_return,
        n_test_episodes: test_episodes.len(),
        n_test_timesteps: test_episodes.iter().map(|e| e.steps.len()).sum(),
        uncovered_states: sol.uncovered.len(),
        estimated_pairs: sol.q.iter().filter(|q| !q.is_nan()).count(),
        cohort: summary,
    };
    let provenance = Provenance {
        seed: config.seed,
        config_hash: config.hash(),
        cohort_hash: data.cohort_hash(),
        trained_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        n_train_patients: train.len(),
        n_test_patients: test.len(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(ModelBundle {
        provenance,
        config: config.clone(),
        schema: data.schema.clone(),
        states,
        action_space: space,
        mdp,
        evaluation: Some(evaluation),
    })
}

/// Loads the cohort, trains, and writes the bundle to `out`. Nothing is left
/// at `out` when any stage fails.
pub fn train_to_dir(
    cohort: &Path,
    config: &TrainConfig,
    out: &Path,
) -> Result<ModelBundle, TrainError> {
    if out.exists() {
        return Err(fail(Stage::Write)(format!(
            "{} already exists",
            out.display()
        )));
    }
    let data = Dataset::load(cohort).map_err(|e| fail(Stage::Ingest)(e.to_string()))?;
    let bundle = train(&data, config)?;
    bundle
        .save(out)
        .map_err(|e| fail(Stage::Write)(e.to_string()))?;
    Ok(bundle)
}
