//! Per-timestep recommendation payloads and cohort browsing.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::cohort::PatientTrajectory;
use crate::explain::{ExplainError, Explainer, StateExplanation};
use crate::mdp::{
    split_action, ActionId, ActionSpace, Channel, DoseChange, MdpModel, BINS_PER_CHANNEL, N_ACTIONS,
};
use crate::scalar::Scalar;
use crate::statespace::StateModel;

pub const PAYLOAD_VERSION: u32 = 1;
pub const MAX_ALTERNATIVES: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RecommendError {
    #[error("patient {patient_id} has no timestep with bin index {bin}")]
    BinNotFound { patient_id: String, bin: u32 },
    #[error("the MDP has not been solved")]
    Unsolved,
    #[error(transparent)]
    Explain(#[from] ExplainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseRecommendation {
    pub fluid_bin: u8,
    pub vaso_bin: u8,
    /// mL over the next 4 hours.
    pub fluid_ml: f64,
    /// mcg/kg/min.
    pub vaso_rate: f64,
    pub fluid_change: DoseChange,
    pub vaso_change: DoseChange,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub action_id: ActionId,
    /// `None` for alternatives ranked by clinician frequency in low-data states.
    pub q_value: Option<f64>,
    pub clinician_freq: f64,
}

/// Grids are `[fluid_bin][vaso_bin]`, i.e. cell `(i, j)` is action `5i + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationPayload {
    pub schema_version: u32,
    pub patient_id: String,
    pub bin_index: u32,
    pub state_id: usize,
    /// `null` marks actions without enough data to estimate.
    pub q_heatmap: [[Option<f64>; BINS_PER_CHANNEL]; BINS_PER_CHANNEL],
    pub clinician_probs: [[f64; BINS_PER_CHANNEL]; BINS_PER_CHANNEL],
    pub clinician_action: ActionId,
    pub recommended_action: ActionId,
    pub recommended: DoseRecommendation,
    pub alternatives: Vec<Alternative>,
    /// No action in this state is estimated; the recommendation is the
    /// clinicians' plurality action.
    pub low_data: bool,
    pub explanation: Option<StateExplanation>,
}

fn change_word(c: DoseChange) -> &'static str {
    match c {
        DoseChange::Increase => "increase to",
        DoseChange::Decrease => "decrease to",
        DoseChange::NoChange => "continue at",
    }
}

fn dose_text(
    fluid_change: DoseChange,
    fluid_ml: f64,
    vaso_change: DoseChange,
    vaso_rate: f64,
) -> String {
    let fluid = if fluid_ml == 0.0 && fluid_change != DoseChange::Increase {
        "IV fluids: none over the next 4 hours".to_string()
    } else {
        format!(
            "IV fluids: {} {:.0} mL over the next 4 hours",
            change_word(fluid_change),
            fluid_ml
        )
    };
    let vaso = if vaso_rate == 0.0 && vaso_change != DoseChange::Increase {
        "vasopressors: none".to_string()
    } else {
        format!(
            "vasopressors: {} {:.3} mcg/kg/min",
            change_word(vaso_change),
            vaso_rate
        )
    };
    format!("{fluid}; {vaso}")
}

pub fn dose_recommendation(
    space: &ActionSpace,
    action: ActionId,
    fluid_now: f64,
    vaso_now: f64,
) -> DoseRecommendation {
    let (fb, vb) = split_action(action);
    let fluid_ml = space.representative_dose(Channel::Fluid, fb);
    let vaso_rate = space.representative_dose(Channel::Vaso, vb);
    let fluid_change = space.recommended_delta(Channel::Fluid, fluid_now, fb);
    let vaso_change = space.recommended_delta(Channel::Vaso, vaso_now, vb);
    DoseRecommendation {
        fluid_bin: fb,
        vaso_bin: vb,
        fluid_ml,
        vaso_rate,
        fluid_change,
        vaso_change,
        text: dose_text(fluid_change, fluid_ml, vaso_change, vaso_rate),
    }
}

/// Payload for the timestep with bin index `bin` of `trajectory`. An
/// explanation is attached when an explainer is given and the state has
/// training support.
pub fn build_payload<T: Scalar>(
    mdp: &MdpModel<T>,
    states: &StateModel<T>,
    space: &ActionSpace,
    explainer: Option<&Explainer<T>>,
    trajectory: &PatientTrajectory,
    bin: u32,
) -> Result<RecommendationPayload, RecommendError> {
    let t = trajectory
        .position_of_bin(bin)
        .ok_or_else(|| RecommendError::BinNotFound {
            patient_id: trajectory.patient_id.clone(),
            bin,
        })?;
    if mdp.solution.is_none() {
        return Err(RecommendError::Unsolved);
    }
    let s = states.assign_trajectory(trajectory, t);
    let record = &trajectory.timesteps[t];
    let behavior = mdp.behavior_row(s);

    let mut q_heatmap = [[None; BINS_PER_CHANNEL]; BINS_PER_CHANNEL];
    let mut clinician_probs = [[0.0; BINS_PER_CHANNEL]; BINS_PER_CHANNEL];
    let mut estimated: Vec<(ActionId, f64)> = Vec::new();
    for a in 0..N_ACTIONS as ActionId {
        let (i, j) = split_action(a);
        let q = mdp.q_value(s, a).map(|q| q.as_f64());
        q_heatmap[i as usize][j as usize] = q;
        clinician_probs[i as usize][j as usize] = behavior[a as usize].as_f64();
        if let Some(q) = q {
            estimated.push((a, q));
        }
    }
    let low_data = estimated.is_empty();
    let freq = |a: ActionId| behavior[a as usize].as_f64();
    let alternatives: Vec<Alternative> = if low_data {
        let mut observed: Vec<ActionId> = (0..N_ACTIONS as ActionId)
            .filter(|&a| freq(a) > 0.0)
            .collect();
        observed.sort_by(|&a, &b| freq(b).total_cmp(&freq(a)).then(a.cmp(&b)));
        observed
            .into_iter()
            .take(MAX_ALTERNATIVES)
            .map(|a| Alternative {
                action_id: a,
                q_value: None,
                clinician_freq: freq(a),
            })
            .collect()
    } else {
        // stable sort keeps the lowest id first among equal Q values
        estimated.sort_by(|x, y| y.1.total_cmp(&x.1));
        estimated
            .iter()
            .take(MAX_ALTERNATIVES)
            .map(|&(a, q)| Alternative {
                action_id: a,
                q_value: Some(q),
                clinician_freq: freq(a),
            })
            .collect()
    };
    let recommended_action = if low_data {
        mdp.plurality_action(s)
    } else {
        alternatives[0].action_id
    };
    let explanation =
        match explainer.map(|e| e.explain(s, &trajectory.feature_vector(t, &states.features))) {
            None | Some(Err(ExplainError::UnsupportedState(_))) => None,
            Some(Ok(e)) => Some(e),
            Some(Err(e)) => return Err(e.into()),
        };
    Ok(RecommendationPayload {
        schema_version: PAYLOAD_VERSION,
        patient_id: trajectory.patient_id.clone(),
        bin_index: bin,
        state_id: s,
        q_heatmap,
        clinician_probs,
        clinician_action: space.discretize_action(record.fluid_dose, record.vaso_dose),
        recommended_action,
        recommended: dose_recommendation(
            space,
            recommended_action,
            record.fluid_dose,
            record.vaso_dose,
        ),
        alternatives,
        low_data,
        explanation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: PartialOrd + Copy> Bounds<T> {
    pub fn contains(&self, v: T) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Survived,
    Died,
}

/// Every set field must hold. SOFA and SIRS ranges apply to the maximum score
/// over the stay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortFilter {
    pub age: Option<Bounds<f64>>,
    pub gender: Option<BTreeSet<String>>,
    /// Comorbidities the patient must have.
    pub comorbidities: BTreeSet<String>,
    pub outcome: Option<Outcome>,
    pub sofa: Option<Bounds<i32>>,
    pub sirs: Option<Bounds<i32>>,
    pub clinician_actions: Option<BTreeSet<ActionId>>,
    pub model_actions: Option<BTreeSet<ActionId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl CohortFilter {
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if let Some(b) = self.age {
            if !(b.lo <= b.hi) {
                err(
                    "age",
                    format!("lower bound {} exceeds upper bound {}", b.lo, b.hi),
                );
            }
        }
        for (name, b) in [("sofa", self.sofa), ("sirs", self.sirs)] {
            if let Some(b) = b {
                if b.lo > b.hi {
                    err(
                        name,
                        format!("lower bound {} exceeds upper bound {}", b.lo, b.hi),
                    );
                }
            }
        }
        for (name, set) in [
            ("clinician_actions", &self.clinician_actions),
            ("model_actions", &self.model_actions),
        ] {
            if let Some(bad) = set.iter().flatten().find(|&&a| a as usize >= N_ACTIONS) {
                err(name, format!("action {bad} is outside 0..{N_ACTIONS}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    fn patient_matches(&self, p: &PatientTrajectory) -> bool {
        self.age.is_none_or(|b| b.contains(p.demographics.age))
            && self
                .gender
                .as_ref()
                .is_none_or(|g| g.contains(&p.demographics.gender))
            && self.comorbidities.iter().all(|c| {
                p.demographics
                    .comorbidities
                    .get(c)
                    .copied()
                    .unwrap_or(false)
            })
            && self.outcome.is_none_or(|o| (o == Outcome::Died) == p.died)
            && self.sofa.is_none_or(|b| b.contains(p.max_sofa()))
            && self.sirs.is_none_or(|b| b.contains(p.max_sirs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMatch {
    pub patient_id: String,
    pub bins: Vec<u32>,
}

/// Patients passing every patient-level predicate with at least one bin
/// passing the action predicates (all bins when none are set). Model-action
/// predicates match nothing on an unsolved MDP.
pub fn filter_cohort<T: Scalar>(
    cohort: &[PatientTrajectory],
    mdp: &MdpModel<T>,
    states: &StateModel<T>,
    space: &ActionSpace,
    f: &CohortFilter,
) -> Vec<FilterMatch> {
    let policy = mdp.policy();
    let mut out = Vec::new();
    for p in cohort.iter().filter(|p| f.patient_matches(p)) {
        let bins: Vec<u32> = (0..p.len())
            .filter(|&t| {
                let r = &p.timesteps[t];
                let clin_ok = f.clinician_actions.as_ref().is_none_or(|set| {
                    set.contains(&space.discretize_action(r.fluid_dose, r.vaso_dose))
                });
                let model_ok = f.model_actions.as_ref().is_none_or(|set| {
                    policy.is_some_and(|pi| set.contains(&pi[states.assign_trajectory(p, t)]))
                });
                clin_ok && model_ok
            })
            .map(|t| p.timesteps[t].bin_index)
            .collect();
        if !bins.is_empty() {
            out.push(FilterMatch {
                patient_id: p.patient_id.clone(),
                bins,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffersIn {
    Fluid,
    Vasopressor,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscordantCase {
    pub patient_id: String,
    pub bin: u32,
    pub state_id: usize,
    pub clinician_action: ActionId,
    pub model_action: ActionId,
    pub plurality_action: ActionId,
    pub differs: DiffersIn,
}

pub fn compare_components(model: ActionId, plurality: ActionId) -> Option<DiffersIn> {
    let (mf, mv) = split_action(model);
    let (pf, pv) = split_action(plurality);
    match (mf != pf, mv != pv) {
        (true, true) => Some(DiffersIn::Both),
        (true, false) => Some(DiffersIn::Fluid),
        (false, true) => Some(DiffersIn::Vasopressor),
        (false, false) => None,
    }
}

/// Timesteps whose state's model action differs from the state's plurality
/// clinician action; empty on an unsolved MDP.
pub fn find_discordant_cases<T: Scalar>(
    cohort: &[PatientTrajectory],
    mdp: &MdpModel<T>,
    states: &StateModel<T>,
    space: &ActionSpace,
) -> Vec<DiscordantCase> {
    let Some(policy) = mdp.policy() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for p in cohort {
        for (t, r) in p.timesteps.iter().enumerate() {
            let s = states.assign_trajectory(p, t);
            let plurality = mdp.plurality_action(s);
            if let Some(differs) = compare_components(policy[s], plurality) {
                out.push(DiscordantCase {
                    patient_id: p.patient_id.clone(),
                    bin: r.bin_index,
                    state_id: s,
                    clinician_action: space.discretize_action(r.fluid_dose, r.vaso_dose),
                    model_action: policy[s],
                    plurality_action: plurality,
                    differs,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    Age,
    Sofa,
    Length,
    Discordant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub age: f64,
    pub gender: String,
    pub died: bool,
    pub max_sofa: i32,
    pub max_sirs: i32,
    pub n_bins: usize,
    pub n_discordant: usize,
    pub matching_bins: Vec<u32>,
}

/// Summaries of the matches, sorted by `key` (ties by patient id).
pub fn summarize(
    cohort: &[PatientTrajectory],
    matches: Vec<FilterMatch>,
    discordant: &[DiscordantCase],
    key: SortKey,
    descending: bool,
) -> Vec<PatientSummary> {
    let by_id: HashMap<&str, &PatientTrajectory> =
        cohort.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in discordant {
        *counts.entry(c.patient_id.as_str()).or_default() += 1;
    }
    let mut out: Vec<PatientSummary> = matches
        .into_iter()
        .filter_map(|m| {
            let p = by_id.get(m.patient_id.as_str())?;
            Some(PatientSummary {
                age: p.demographics.age,
                gender: p.demographics.gender.clone(),
                died: p.died,
                max_sofa: p.max_sofa(),
                max_sirs: p.max_sirs(),
                n_bins: p.len(),
                n_discordant: counts.get(p.patient_id.as_str()).copied().unwrap_or(0),
                patient_id: m.patient_id,
                matching_bins: m.bins,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        let ord = match key {
            SortKey::Age => a.age.total_cmp(&b.age),
            SortKey::Sofa => a.max_sofa.cmp(&b.max_sofa),
            SortKey::Length => a.n_bins.cmp(&b.n_bins),
            SortKey::Discordant => a.n_discordant.cmp(&b.n_discordant),
        };
        (if descending { ord.reverse() } else { ord }).then_with(|| a.patient_id.cmp(&b.patient_id))
    });
    out
}
