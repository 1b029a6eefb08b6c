//! Synthetic cohorts drawn from a fully specified ground-truth MDP, with the
//! exact policy values needed to check everything learned downstream.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    Demographics, DisplayGroup, FeatureSchema, FeatureSpec, PatientTrajectory, TimestepRecord,
};
use crate::linalg::{Lu, Matrix};
use crate::mdp::{split_action, ActionId, ActionSpace, N_ACTIONS};
use crate::seeding;

const ROW_TOLERANCE: f64 = 1e-9;
/// Hard cap on unrecorded steps simulated after truncation to settle the outcome.
const SETTLE_STEPS: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid ground-truth MDP: {0}")]
    Invalid(String),
    #[error("non-contractive: with discount 1, states {0:?} never reach a terminal state")]
    NonContractive(Vec<usize>),
    #[error("linear system is singular")]
    Singular,
}

/// Ground-truth dynamics over `n_states` latent states and the 25-action grid.
/// Successor index `n_states` is the survive terminal, `n_states + 1` die.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMdp {
    pub n_states: usize,
    /// Number of grid actions; action ids are grid ids `0..n_actions`.
    pub n_actions: usize,
    /// `transitions[s][a][s']` over `n_states + 2` successors.
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub behavior: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub gamma: f64,
    pub survive_reward: f64,
    pub die_reward: f64,
    pub schema: FeatureSchema,
    /// Per-state emission means, in schema feature order.
    pub emission_means: Vec<Vec<f64>>,
    /// Per-state diagonal noise scale.
    pub emission_scales: Vec<Vec<f64>>,
    /// Dose emitted for fluid bins 1–4 (mL / 4 h).
    pub fluid_levels: [f64; 4],
    /// Dose emitted for vasopressor bins 1–4 (mcg/kg/min).
    pub vaso_levels: [f64; 4],
    /// Relative uniform jitter applied to emitted doses (0 = point masses).
    #[serde(default)]
    pub dose_jitter: f64,
}

/// A sampled cohort plus the latent quantities an analyst never sees.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCohort {
    pub trajectories: Vec<PatientTrajectory>,
    pub latent_states: Vec<Vec<usize>>,
    pub actions: Vec<Vec<ActionId>>,
}

fn check_row(what: &str, row: &[f64]) -> Result<(), SimError> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(SimError::Invalid(format!(
            "{what} is not a probability row (sum {sum})"
        )));
    }
    Ok(())
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last index with positive mass
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

impl GroundTruthMdp {
    pub fn validate(&self) -> Result<(), SimError> {
        let (n, m) = (self.n_states, self.n_actions);
        if n == 0 || m == 0 || m > N_ACTIONS {
            return Err(SimError::Invalid(format!(
                "need n_states ≥ 1 and 1 ≤ n_actions ≤ {N_ACTIONS}"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SimError::Invalid(format!(
                "discount {} outside (0, 1]",
                self.gamma
            )));
        }
        if self.transitions.len() != n || self.behavior.len() != n || self.initial.len() != n {
            return Err(SimError::Invalid(
                "transition/behavior/initial dimension mismatch".into(),
            ));
        }
        check_row("initial", &self.initial)?;
        let d = self.schema.features.len();
        for s in 0..n {
            if self.transitions[s].len() != m || self.behavior[s].len() != m {
                return Err(SimError::Invalid(format!("state {s}: wrong action count")));
            }
            check_row(&format!("behavior[{s}]"), &self.behavior[s])?;
            for a in 0..m {
                if self.transitions[s][a].len() != n + 2 {
                    return Err(SimError::Invalid(format!(
                        "T[{s}][{a}] needs {} successors",
                        n + 2
                    )));
                }
                check_row(&format!("T[{s}][{a}]"), &self.transitions[s][a])?;
            }
            if self.emission_means.get(s).map(Vec::len) != Some(d)
                || self.emission_scales.get(s).map(Vec::len) != Some(d)
            {
                return Err(SimError::Invalid(format!(
                    "state {s}: emission dimension mismatch"
                )));
            }
        }
        for levels in [&self.fluid_levels, &self.vaso_levels] {
            if !(levels[0] > 0.0 && levels.windows(2).all(|w| w[0] < w[1])) {
                return Err(SimError::Invalid(format!(
                    "dose levels {levels:?} must be positive and ascending"
                )));
            }
        }
        if !(0.0..0.5).contains(&self.dose_jitter) {
            return Err(SimError::Invalid("dose_jitter must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    /// Action space whose bins contain exactly the doses this generator emits.
    pub fn action_space(&self) -> ActionSpace {
        let edges = |l: &[f64; 4]| [0, 1, 2].map(|i| (l[i] + l[i + 1]) / 2.0);
        ActionSpace::new(
            edges(&self.fluid_levels),
            edges(&self.vaso_levels),
            self.fluid_levels[3],
            self.vaso_levels[3],
        )
        .expect("validated levels give ascending edges")
    }

    fn dose<R: Rng>(&self, levels: &[f64; 4], bin: u8, rng: &mut R) -> f64 {
        if bin == 0 {
            return 0.0;
        }
        let base = levels[bin as usize - 1];
        if self.dose_jitter > 0.0 {
            base * (1.0 + self.dose_jitter * (rng.random::<f64>() - 0.5))
        } else {
            base
        }
    }

    /// Samples `n_patients` trajectories. Patient `i` uses its own stream
    /// derived from `(seed, i)`. Trajectories are truncated at `max_len`
    /// recorded steps; a truncated patient's outcome is settled by continuing
    /// the latent chain unrecorded.
    pub fn sample_cohort(
        &self,
        n_patients: usize,
        seed: u64,
        max_len: usize,
    ) -> Result<SampledCohort, SimError> {
        self.validate()?;
        let max_len = max_len.max(1);
        let n = self.n_states;
        let mut out = SampledCohort {
            trajectories: Vec::new(),
            latent_states: Vec::new(),
            actions: Vec::new(),
        };
        for i in 0..n_patients {
            let mut rng = seeding::stream(seed, i as u64);
            let demographics = Demographics {
                age: (18.0 + 72.0 * rng.random::<f64>()).round(),
                gender: if rng.random::<bool>() { "F" } else { "M" }.to_string(),
                weight: (50.0 + 60.0 * rng.random::<f64>()).round(),
                comorbidities: [
                    ("chf".to_string(), rng.random::<f64>() < 0.2),
                    ("diabetes".to_string(), rng.random::<f64>() < 0.25),
                ]
                .into_iter()
                .collect(),
            };
            let mut s = sample_index(&mut rng, &self.initial);
            let (mut timesteps, mut latent, mut actions) = (Vec::new(), Vec::new(), Vec::new());
            let mut outcome = None;
            for t in 0..max_len {
                let features: BTreeMap<String, f64> = self
                    .schema
                    .features
                    .iter()
                    .enumerate()
                    .map(|(j, f)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (
                            f.name.clone(),
                            self.emission_means[s][j] + self.emission_scales[s][j] * z,
                        )
                    })
                    .collect();
                let a = sample_index(&mut rng, &self.behavior[s]) as ActionId;
                let (fb, vb) = split_action(a);
                timesteps.push(TimestepRecord {
                    bin_index: t as u32,
                    features,
                    fluid_dose: self.dose(&self.fluid_levels, fb, &mut rng),
                    vaso_dose: self.dose(&self.vaso_levels, vb, &mut rng),
                    mech_vent: rng.random::<f64>() < 0.3,
                    sofa: ((2 + 3 * s) % 20) as i32 + rng.random_range(0..3),
                    sirs: rng.random_range(0..=4),
                    imputed: vec![],
                });
                latent.push(s);
                actions.push(a);
                let next = sample_index(&mut rng, &self.transitions[s][a as usize]);
                if next >= n {
                    outcome = Some(next == n + 1);
                    break;
                }
                s = next;
            }
            let died = match outcome {
                Some(d) => d,
                None => self.settle(s, &mut rng),
            };
            out.trajectories.push(PatientTrajectory {
                patient_id: format!("p{i:06}"),
                demographics,
                timesteps,
                died,
            });
            out.latent_states.push(latent);
            out.actions.push(actions);
        }
        Ok(out)
    }

    fn settle<R: Rng>(&self, mut s: usize, rng: &mut R) -> bool {
        let n = self.n_states;
        for _ in 0..SETTLE_STEPS {
            let a = sample_index(rng, &self.behavior[s]);
            let next = sample_index(rng, &self.transitions[s][a]);
            if next >= n {
                return next == n + 1;
            }
            s = next;
        }
        false
    }

    /// Exact start-distribution value of a deterministic policy.
    pub fn exact_policy_value(&self, policy: &[ActionId]) -> Result<f64, SimError> {
        let dist: Vec<Vec<f64>> = policy
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; self.n_actions];
                row[a as usize] = 1.0;
                row
            })
            .collect();
        self.exact_stochastic_value(&dist)
    }

    /// Per-state values of a stochastic policy (`policy[s][a]`), by a direct
    /// linear solve of the Bellman equations.
    pub fn state_values(&self, policy: &[Vec<f64>]) -> Result<Vec<f64>, SimError> {
        self.validate()?;
        let n = self.n_states;
        if policy.len() != n || policy.iter().any(|r| r.len() != self.n_actions) {
            return Err(SimError::Invalid(
                "policy must cover every state and action".into(),
            ));
        }
        let mut p = vec![vec![0.0; n + 2]; n];
        for s in 0..n {
            for (a, &pa) in policy[s].iter().enumerate() {
                if pa > 0.0 {
                    for (s2, &t) in self.transitions[s][a].iter().enumerate() {
                        p[s][s2] += pa * t;
                    }
                }
            }
        }
        if self.gamma >= 1.0 {
            let stuck = self.non_terminating(&p);
            if !stuck.is_empty() {
                return Err(SimError::NonContractive(stuck));
            }
        }
        let mut a = Matrix::<f64>::identity(n);
        let mut b = vec![0.0; n];
        for s in 0..n {
            for s2 in 0..n {
                a[(s, s2)] -= self.gamma * p[s][s2];
            }
            b[s] = p[s][n] * self.survive_reward + p[s][n + 1] * self.die_reward;
        }
        let lu = Lu::factor(a).map_err(|_| SimError::Singular)?;
        Ok(lu.solve(&b))
    }

    pub fn exact_stochastic_value(&self, policy: &[Vec<f64>]) -> Result<f64, SimError> {
        let v = self.state_values(policy)?;
        Ok(self.initial.iter().zip(&v).map(|(a, b)| a * b).sum())
    }

    pub fn behavior_value(&self) -> Result<f64, SimError> {
        self.exact_stochastic_value(&self.behavior)
    }

    fn non_terminating(&self, p: &[Vec<f64>]) -> Vec<usize> {
        let n = self.n_states;
        let mut reach = vec![false; n];
        loop {
            let mut grew = false;
            for s in 0..n {
                if !reach[s]
                    && (p[s][n] + p[s][n + 1] > 0.0 || (0..n).any(|s2| p[s][s2] > 0.0 && reach[s2]))
                {
                    reach[s] = true;
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        (0..n).filter(|&s| !reach[s]).collect()
    }

    /// Optimal deterministic policy by value iteration to a fixed point,
    /// restricted to `allowed[s]` when given; lowest action id on ties.
    pub fn optimal_policy(&self, allowed: Option<&[Vec<ActionId>]>) -> (Vec<ActionId>, Vec<f64>) {
        let n = self.n_states;
        let acts = |s: usize| -> Vec<ActionId> {
            match allowed {
                Some(al) => al[s].clone(),
                None => (0..self.n_actions as ActionId).collect(),
            }
        };
        let q = |v: &[f64], s: usize, a: usize| -> f64 {
            let t = &self.transitions[s][a];
            (0..n).map(|s2| t[s2] * self.gamma * v[s2]).sum::<f64>()
                + t[n] * self.survive_reward
                + t[n + 1] * self.die_reward
        };
        let mut v = vec![0.0; n];
        for _ in 0..1_000_000 {
            let next: Vec<f64> = (0..n)
                .map(|s| {
                    acts(s)
                        .iter()
                        .map(|&a| q(&v, s, a as usize))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let delta = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if delta < 1e-13 {
                break;
            }
        }
        let policy = (0..n)
            .map(|s| {
                let a = acts(s);
                let qs: Vec<f64> = a.iter().map(|&x| q(&v, s, x as usize)).collect();
                let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                a[qs.iter().position(|&x| x >= best - 1e-9).unwrap()]
            })
            .collect();
        (policy, v)
    }

    /// Six well-separated latent states; clinicians pick among five diagonal
    /// grid actions with state-independent frequencies, and each state has one
    /// clearly best action among them.
    pub fn six_state_oracle(separation: f64) -> Self {
        let n = 6;
        let support: [ActionId; 5] = [0, 6, 12, 18, 24];
        let freq = [0.2, 0.28, 0.2, 0.2, 0.12];
        let best: [ActionId; 6] = [6, 12, 18, 24, 0, 12];
        let mut transitions = vec![vec![vec![0.0; n + 2]; N_ACTIONS]; n];
        let mut behavior = vec![vec![0.0; N_ACTIONS]; n];
        for s in 0..n {
            for a in 0..N_ACTIONS {
                let row = &mut transitions[s][a];
                if support.contains(&(a as ActionId)) {
                    let good = a as ActionId == best[s];
                    let (surv, die) = if good { (0.4, 0.05) } else { (0.15, 0.2) };
                    row[n] = surv;
                    row[n + 1] = die;
                    let rest = 1.0 - surv - die;
                    row[(s + 1) % n] += rest * 0.6;
                    row[(s + 3) % n] += rest * 0.4;
                } else {
                    row[n + 1] = 0.6;
                    row[s] = 0.4;
                }
            }
            for (&a, &f) in support.iter().zip(&freq) {
                behavior[s][a as usize] = f;
            }
        }
        let d = n;
        let schema = oracle_schema(d);
        let scales: Vec<f64> = schema
            .features
            .iter()
            .map(|f| (f.hi - f.lo) / 4.0)
            .collect();
        let centers: Vec<f64> = schema
            .features
            .iter()
            .map(|f| (f.hi + f.lo) / 2.0)
            .collect();
        let emission_means = (0..n)
            .map(|s| {
                (0..d)
                    .map(|j| centers[j] + if j == s { separation * scales[j] } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            n_states: n,
            n_actions: N_ACTIONS,
            transitions,
            behavior,
            initial: vec![1.0 / n as f64; n],
            gamma: 0.99,
            survive_reward: 100.0,
            die_reward: -100.0,
            schema,
            emission_means,
            emission_scales: vec![scales; n],
            fluid_levels: [50.0, 150.0, 400.0, 1000.0],
            vaso_levels: [0.05, 0.15, 0.3, 0.6],
            dose_jitter: 0.0,
        }
    }

    /// Random ground truth over all 25 actions with jittered doses, for
    /// scale tests. Each latent state's emission mean is a random point at
    /// `separation` noise scales from the origin.
    pub fn random(n_states: usize, n_features: usize, separation: f64, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, u64::MAX);
        let n = n_states;
        let schema = oracle_schema(n_features);
        let scales: Vec<f64> = schema
            .features
            .iter()
            .map(|f| (f.hi - f.lo) / 4.0)
            .collect();
        let centers: Vec<f64> = schema
            .features
            .iter()
            .map(|f| (f.hi + f.lo) / 2.0)
            .collect();
        let mut transitions = vec![vec![vec![0.0; n + 2]; N_ACTIONS]; n];
        let mut behavior = vec![vec![0.0; N_ACTIONS]; n];
        for s in 0..n {
            for a in 0..N_ACTIONS {
                let row = &mut transitions[s][a];
                let surv = 0.05 + 0.3 * rng.random::<f64>();
                let die = 0.02 + 0.2 * rng.random::<f64>();
                row[n] = surv;
                row[n + 1] = die;
                let rest = 1.0 - surv - die;
                let targets = [
                    rng.random_range(0..n),
                    rng.random_range(0..n),
                    rng.random_range(0..n),
                ];
                let w = [
                    rng.random::<f64>() + 0.1,
                    rng.random::<f64>() + 0.1,
                    rng.random::<f64>() + 0.1,
                ];
                let wsum: f64 = w.iter().sum();
                for (t, wi) in targets.iter().zip(w) {
                    row[*t] += rest * wi / wsum;
                }
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= sum);
            }
            let w: Vec<f64> = (0..N_ACTIONS)
                .map(|_| rng.random::<f64>().powi(2) + 0.01)
                .collect();
            let wsum: f64 = w.iter().sum();
            behavior[s] = w.iter().map(|x| x / wsum).collect();
        }
        let emission_means = (0..n)
            .map(|_| {
                let dir: Vec<f64> = (0..n_features)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = dir
                    .iter()
                    .map(|x: &f64| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-12);
                (0..n_features)
                    .map(|j| centers[j] + separation * scales[j] * dir[j] / norm)
                    .collect()
            })
            .collect();
        Self {
            n_states: n,
            n_actions: N_ACTIONS,
            transitions,
            behavior,
            initial: vec![1.0 / n as f64; n],
            gamma: 0.99,
            survive_reward: 100.0,
            die_reward: -100.0,
            schema,
            emission_means,
            emission_scales: vec![scales; n],
            fluid_levels: [50.0, 150.0, 400.0, 1000.0],
            vaso_levels: [0.05, 0.15, 0.3, 0.6],
            dose_jitter: 0.2,
        }
    }
}

const ORACLE_FEATURES: [(&str, f64, f64, DisplayGroup); 8] = [
    ("hr", 60.0, 100.0, DisplayGroup::Vitals),
    ("map", 65.0, 110.0, DisplayGroup::Vitals),
    ("resp_rate", 12.0, 20.0, DisplayGroup::Vitals),
    ("lactate", 0.5, 2.0, DisplayGroup::Labs),
    ("creatinine", 0.6, 1.2, DisplayGroup::Labs),
    ("spo2", 94.0, 100.0, DisplayGroup::Vitals),
    ("fio2", 21.0, 40.0, DisplayGroup::Ventilation),
    ("wbc", 4.0, 11.0, DisplayGroup::Labs),
];

fn oracle_schema(d: usize) -> FeatureSchema {
    let features = (0..d)
        .map(|j| {
            let (name, lo, hi, group) = ORACLE_FEATURES[j % ORACLE_FEATURES.len()];
            let name = if j < ORACLE_FEATURES.len() {
                name.to_string()
            } else {
                format!("{name}_{}", j / ORACLE_FEATURES.len())
            };
            FeatureSpec {
                name,
                lo,
                hi,
                group,
                unit: None,
            }
        })
        .collect();
    FeatureSchema::new(features, vec!["chf".into(), "diabetes".into()])
        .expect("oracle schema is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state(to: usize) -> GroundTruthMdp {
        let mut m = GroundTruthMdp::six_state_oracle(8.0);
        m.n_states = 1;
        m.n_actions = 1;
        let mut row = vec![0.0; 3];
        row[to] = 1.0;
        m.transitions = vec![vec![row]];
        m.behavior = vec![vec![1.0]];
        m.initial = vec![1.0];
        m.gamma = 1.0;
        m.emission_means.truncate(1);
        m.emission_scales.truncate(1);
        m
    }

    #[test]
    fn single_state_values() {
        assert_eq!(one_state(1).exact_policy_value(&[0]).unwrap(), 100.0);
        assert_eq!(one_state(2).exact_policy_value(&[0]).unwrap(), -100.0);
    }

    #[test]
    fn self_loop_at_discount_one_is_non_contractive() {
        assert!(matches!(
            one_state(0).exact_policy_value(&[0]),
            Err(SimError::NonContractive(_))
        ));
    }

    #[test]
    fn degenerate_dynamics_give_length_one() {
        let c = one_state(1).sample_cohort(20, 3, 10).unwrap();
        assert!(c.trajectories.iter().all(|p| p.len() == 1 && !p.died));
        assert!(c.actions.iter().all(|a| a == &vec![0]));
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = GroundTruthMdp::six_state_oracle(8.0);
        assert_eq!(
            m.sample_cohort(50, 9, 40).unwrap(),
            m.sample_cohort(50, 9, 40).unwrap()
        );
        assert_ne!(
            m.sample_cohort(50, 9, 40).unwrap(),
            m.sample_cohort(50, 10, 40).unwrap()
        );
    }

    #[test]
    fn own_action_space_recovers_actions() {
        for m in [
            GroundTruthMdp::six_state_oracle(8.0),
            GroundTruthMdp::random(5, 4, 6.0, 2),
        ] {
            let space = m.action_space();
            let c = m.sample_cohort(200, 1, 30).unwrap();
            for (p, acts) in c.trajectories.iter().zip(&c.actions) {
                for (r, &a) in p.timesteps.iter().zip(acts) {
                    assert_eq!(space.discretize_action(r.fluid_dose, r.vaso_dose), a);
                }
            }
        }
    }

    #[test]
    fn oracles_validate() {
        GroundTruthMdp::six_state_oracle(8.0).validate().unwrap();
        GroundTruthMdp::random(60, 8, 6.0, 1).validate().unwrap();
    }

    #[test]
    fn values_bounded() {
        let m = GroundTruthMdp::six_state_oracle(8.0);
        let v = m.behavior_value().unwrap();
        assert!((-100.0..=100.0).contains(&v));
        let (pi, _) = m.optimal_policy(None);
        assert!(m.exact_policy_value(&pi).unwrap() > v);
    }
}
