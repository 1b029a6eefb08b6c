//! Per-state interpretation: a one-vs-rest membership classifier, Shapley
//! attributions of the explained timestep, and the state's patient-level
//! mortality rate.

pub mod gbdt;
pub mod shapley;

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::cohort::PatientTrajectory;
use crate::scalar::Scalar;
use crate::seeding;
use crate::statespace::StateModel;

pub use gbdt::{fit_gbdt, Gbdt, GbdtConfig};
pub use shapley::{
    exact_shapley, permutation_shapley, shapley_attribution, Attribution, ShapleyConfig,
    ShapleyMethod,
};

/// Maps a feature vector to a real-valued score.
pub trait Scorer<T> {
    fn score(&self, x: &[T]) -> T;
}

impl<T, F: Fn(&[T]) -> T> Scorer<T> for F {
    fn score(&self, x: &[T]) -> T {
        self(x)
    }
}

pub const TOP_FEATURES: usize = 5;
pub const DEFAULT_BACKGROUND: usize = 256;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExplainError {
    #[error("unsupported state {0}: no training timestep is assigned to it")]
    UnsupportedState(usize),
    #[error("state {state} out of range (k = {k})")]
    UnknownState { state: usize, k: usize },
    #[error("instance has {got} features, expected {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Above,
    Below,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureContribution {
    pub name: String,
    pub attribution: f64,
    /// Instance value relative to the cohort average.
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateExplanation {
    pub state_id: usize,
    #[serde(rename = "features")]
    pub top_features: Vec<FeatureContribution>,
    /// Mean membership score over the background.
    pub baseline: f64,
    pub score: f64,
    pub mortality_rate: f64,
    /// Training timesteps assigned to the state.
    pub n_support: usize,
}

/// Keeps the [`TOP_FEATURES`] largest `|attribution|`, stable on ties.
pub fn describe_state(
    state_id: usize,
    names: &[String],
    attribution: &Attribution<f64>,
    instance: &[f64],
    cohort_means: &[f64],
    mortality_rate: f64,
    n_support: usize,
) -> StateExplanation {
    let mut idx: Vec<usize> = (0..names.len()).collect();
    idx.sort_by(|&a, &b| {
        attribution.values[b]
            .abs()
            .total_cmp(&attribution.values[a].abs())
    });
    let top_features = idx
        .into_iter()
        .take(TOP_FEATURES)
        .map(|j| FeatureContribution {
            name: names[j].clone(),
            attribution: attribution.values[j],
            direction: match instance[j].partial_cmp(&cohort_means[j]) {
                Some(std::cmp::Ordering::Greater) => Direction::Above,
                Some(std::cmp::Ordering::Less) => Direction::Below,
                _ => Direction::Equal,
            },
        })
        .collect();
    StateExplanation {
        state_id,
        top_features,
        baseline: attribution.baseline,
        score: attribution.score,
        mortality_rate,
        n_support,
    }
}

/// Deaths among patients whose trajectory visits each state over the number
/// of such patients, plus that patient count; `(0, 0)` for unvisited states.
pub fn state_mortality(
    k: usize,
    cohort: &[PatientTrajectory],
    states: &[Vec<usize>],
) -> Vec<(f64, usize)> {
    let mut visitors = vec![0usize; k];
    let mut deaths = vec![0usize; k];
    for (p, seq) in cohort.iter().zip(states) {
        let mut seen: Vec<usize> = seq.clone();
        seen.sort_unstable();
        seen.dedup();
        for s in seen {
            visitors[s] += 1;
            deaths[s] += p.died as usize;
        }
    }
    visitors
        .iter()
        .zip(&deaths)
        .map(|(&v, &d)| (if v == 0 { 0.0 } else { d as f64 / v as f64 }, v))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub gbdt: GbdtConfig,
    pub shapley: ShapleyConfig,
    pub background_size: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            gbdt: GbdtConfig::default(),
            shapley: ShapleyConfig {
                n_perm: 32,
                ..Default::default()
            },
            background_size: DEFAULT_BACKGROUND,
            seed: 0,
        }
    }
}

/// Timestep-level feature rows of the training cohort with their states.
#[derive(Debug, Clone)]
pub struct TrainingSet<T> {
    pub features: Vec<String>,
    pub rows: Vec<Vec<T>>,
    pub states: Vec<usize>,
    pub means: Vec<f64>,
    pub mortality: Vec<(f64, usize)>,
    pub support: Vec<usize>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(cohort: &[PatientTrajectory], model: &StateModel<T>) -> Self {
        let mut rows: Vec<Vec<T>> = Vec::new();
        let mut states = Vec::new();
        let mut per_patient = Vec::with_capacity(cohort.len());
        for p in cohort {
            let mut seq = Vec::with_capacity(p.len());
            for t in 0..p.len() {
                let raw = p.feature_vector(t, &model.features);
                let s = model.assign_raw(&raw);
                rows.push(raw.into_iter().map(T::lit).collect());
                states.push(s);
                seq.push(s);
            }
            per_patient.push(seq);
        }
        let d = model.features.len();
        let mut means = vec![0.0; d];
        for r in &rows {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v.as_f64();
            }
        }
        for m in &mut means {
            *m /= rows.len().max(1) as f64;
        }
        let mut support = vec![0usize; model.k];
        for &s in &states {
            support[s] += 1;
        }
        Self {
            features: model.features.clone(),
            mortality: state_mortality(model.k, cohort, &per_patient),
            rows,
            states,
            means,
            support,
        }
    }

    /// Systematic sample over rows ordered by state, which allocates the
    /// sample across states in proportion to their support.
    pub fn stratified_background(&self, size: usize, seed: u64) -> Vec<Vec<T>> {
        let n = self.rows.len();
        if n <= size {
            return self.rows.clone();
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (self.states[i], i));
        let step = n as f64 / size as f64;
        let offset = rand::Rng::random::<f64>(&mut seeding::stream(seed, 1)) * step;
        (0..size)
            .map(|i| self.rows[order[((offset + i as f64 * step) as usize).min(n - 1)]].clone())
            .collect()
    }
}

/// One-vs-rest classifier for `state`; membership labels come from the
/// state model's assignment of every training timestep.
pub fn fit_state_classifier<T: Scalar>(
    training: &TrainingSet<T>,
    state: usize,
    config: &GbdtConfig,
) -> Result<Gbdt<T>, ExplainError> {
    if state >= training.support.len() {
        return Err(ExplainError::UnknownState {
            state,
            k: training.support.len(),
        });
    }
    if training.support[state] == 0 {
        return Err(ExplainError::UnsupportedState(state));
    }
    let labels: Vec<bool> = training.states.iter().map(|&s| s == state).collect();
    let cfg = GbdtConfig {
        seed: seeding::derive_seed(config.seed, state as u64),
        ..config.clone()
    };
    Ok(fit_gbdt(&training.rows, &labels, &cfg))
}

/// Lazily trains and caches one classifier per state. Readers share the
/// cache; a fitted classifier is inserted once and never replaced.
#[derive(Debug)]
pub struct Explainer<T> {
    pub training: TrainingSet<T>,
    pub background: Vec<Vec<T>>,
    pub config: ExplainConfig,
    cache: RwLock<HashMap<usize, Arc<Gbdt<T>>>>,
}

impl<T: Scalar> Explainer<T> {
    pub fn new(cohort: &[PatientTrajectory], model: &StateModel<T>, config: ExplainConfig) -> Self {
        let training = TrainingSet::new(cohort, model);
        let background = training.stratified_background(config.background_size, config.seed);
        Self {
            training,
            background,
            config,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn classifier(&self, state: usize) -> Result<Arc<Gbdt<T>>, ExplainError> {
        if let Some(c) = self.cache.read().unwrap().get(&state) {
            return Ok(c.clone());
        }
        let fitted = Arc::new(fit_state_classifier(
            &self.training,
            state,
            &self.config.gbdt,
        )?);
        let mut w = self.cache.write().unwrap();
        Ok(w.entry(state).or_insert(fitted).clone())
    }

    pub fn cached_states(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    /// Explains a raw feature vector (in the state model's feature order) as
    /// a member of `state`.
    pub fn explain(
        &self,
        state: usize,
        instance: &[f64],
    ) -> Result<StateExplanation, ExplainError> {
        let d = self.training.features.len();
        if instance.len() != d {
            return Err(ExplainError::Dimension {
                got: instance.len(),
                expected: d,
            });
        }
        let clf = self.classifier(state)?;
        let x: Vec<T> = instance.iter().map(|&v| T::lit(v)).collect();
        let cfg = ShapleyConfig {
            seed: seeding::derive_seed(self.config.seed, state as u64),
            ..self.config.shapley.clone()
        };
        let a = shapley_attribution(clf.as_ref(), &x, &self.background, &cfg);
        let a64 = Attribution {
            values: a.values.iter().map(|v| v.as_f64()).collect(),
            std_errors: a.std_errors.iter().map(|v| v.as_f64()).collect(),
            total_std_error: a.total_std_error.as_f64(),
            baseline: a.baseline.as_f64(),
            score: a.score.as_f64(),
            exact: a.exact,
        };
        let (rate, _) = self.training.mortality[state];
        Ok(describe_state(
            state,
            &self.training.features,
            &a64,
            instance,
            &self.training.means,
            rate,
            self.training.support[state],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attribution(values: Vec<f64>) -> Attribution<f64> {
        let d = values.len();
        Attribution {
            values,
            std_errors: vec![0.0; d],
            total_std_error: 0.0,
            baseline: 0.0,
            score: 0.0,
            exact: true,
        }
    }

    #[test]
    fn sorted_by_magnitude() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let e = describe_state(
            0,
            &names,
            &attribution(vec![0.5, -0.9, 0.1]),
            &[1.0, 0.0, 2.0],
            &[0.0, 1.0, 2.0],
            0.0,
            3,
        );
        let order: Vec<&str> = e.top_features.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(order, ["b", "a", "c"]);
        let dirs: Vec<Direction> = e.top_features.iter().map(|f| f.direction).collect();
        assert_eq!(dirs, [Direction::Below, Direction::Above, Direction::Equal]);
    }

    #[test]
    fn truncates_to_five() {
        let names: Vec<String> = (0..7).map(|i| format!("f{i}")).collect();
        let e = describe_state(
            0,
            &names,
            &attribution((1..=7).map(|i| i as f64).collect()),
            &[0.0; 7],
            &[0.0; 7],
            0.0,
            1,
        );
        assert_eq!(e.top_features.len(), 5);
        assert_eq!(e.top_features[0].name, "f6");
    }

    #[test]
    fn json_shape() {
        let names = vec!["x".to_string()];
        let e = describe_state(3, &names, &attribution(vec![0.2]), &[1.0], &[0.0], 0.25, 9);
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["features"][0]["direction"], "above");
        assert_eq!(v["mortality_rate"], 0.25);
        assert_eq!(v["n_support"], 9);
    }
}
