//! Empirical MDP over (state, treatment) pairs and its policy-iteration solver.

mod actions;
mod solve;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use actions::{
    action_id, fit_action_space, split_action, ActionId, ActionSpace, Channel, DoseChange,
    BINS_PER_CHANNEL, N_ACTIONS,
};
pub use solve::{IterationRecord, Solution};

use crate::cohort::PatientTrajectory;
use crate::linalg::SingularMatrix;
use crate::scalar::Scalar;
use crate::statespace::StateModel;

pub const SURVIVE_REWARD: f64 = 100.0;
pub const DIE_REWARD: f64 = -100.0;
pub const DEFAULT_GAMMA: f64 = 0.99;
/// Actions need strictly more than this many visits to be estimated.
pub const DEFAULT_MIN_COUNT: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum MdpError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("no nonzero doses on the {0} channel")]
    ZeroChannel(Channel),
    #[error("degenerate quantiles on the {channel} channel: edges {edges:?} are not strictly ascending and positive")]
    DegenerateQuantiles { channel: Channel, edges: [f64; 3] },
    #[error("non-contractive: with discount 1, states {states:?} cannot reach a terminal state")]
    NonContractive { states: Vec<usize> },
    #[error("discount {0} outside (0, 1]")]
    InvalidDiscount(f64),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("policy iteration did not stabilise within {0} iterations")]
    NoConvergence(usize),
    #[error(transparent)]
    Singular(#[from] SingularMatrix),
}

/// A trajectory reduced to its (state, action) sequence and outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<(u32, ActionId)>,
    pub died: bool,
}

/// Assigns states and actions to every timestep of every trajectory.
pub fn encode_cohort<T: Scalar>(
    cohort: &[PatientTrajectory],
    states: &StateModel<T>,
    space: &ActionSpace,
) -> Vec<Episode> {
    cohort
        .iter()
        .map(|p| Episode {
            steps: (0..p.len())
                .map(|t| {
                    let r = &p.timesteps[t];
                    (
                        states.assign_trajectory(p, t) as u32,
                        space.discretize_action(r.fluid_dose, r.vaso_dose),
                    )
                })
                .collect(),
            died: p.died,
        })
        .collect()
}

/// Counts, behavior policy and (after [`MdpModel::policy_iteration`]) the
/// solved Q matrix. Successor index `k` is the survive terminal and `k + 1`
/// the die terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpModel<T> {
    pub k: usize,
    pub gamma: T,
    pub min_count: u64,
    pub survive_reward: T,
    pub die_reward: T,
    /// Sparse successor counts, row `s × 25 + a`.
    pub transitions: Vec<BTreeMap<u32, u64>>,
    /// Visit counts, row-major `k × 25`.
    pub visits: Vec<u64>,
    /// Empirical clinician action distribution, row-major `k × 25`.
    pub behavior: Vec<T>,
    pub solution: Option<Solution<T>>,
}

impl<T: Scalar> MdpModel<T> {
    pub fn survive_index(&self) -> usize {
        self.k
    }

    pub fn die_index(&self) -> usize {
        self.k + 1
    }

    /// Builds counts and the behavior policy. The last step of each episode
    /// transitions to the terminal matching its outcome.
    pub fn from_episodes(
        k: usize,
        episodes: &[Episode],
        gamma: T,
        min_count: u64,
    ) -> Result<Self, MdpError> {
        if episodes.is_empty() || episodes.iter().all(|e| e.steps.is_empty()) {
            return Err(MdpError::EmptyCohort);
        }
        let mut transitions = vec![BTreeMap::new(); k * N_ACTIONS];
        let mut visits = vec![0u64; k * N_ACTIONS];
        for e in episodes {
            for (i, &(s, a)) in e.steps.iter().enumerate() {
                let s = s as usize;
                if s >= k || a as usize >= N_ACTIONS {
                    return Err(MdpError::Invalid(format!(
                        "step ({s}, {a}) outside {k} states × {N_ACTIONS} actions"
                    )));
                }
                let next = match e.steps.get(i + 1) {
                    Some(&(s2, _)) => s2,
                    None if e.died => (k + 1) as u32,
                    None => k as u32,
                };
                *transitions[s * N_ACTIONS + a as usize]
                    .entry(next)
                    .or_insert(0) += 1;
                visits[s * N_ACTIONS + a as usize] += 1;
            }
        }
        Self::from_counts(k, transitions, gamma, min_count)
    }

    /// Builds a model directly from successor counts; visits are their row sums.
    pub fn from_counts(
        k: usize,
        transitions: Vec<BTreeMap<u32, u64>>,
        gamma: T,
        min_count: u64,
    ) -> Result<Self, MdpError> {
        if transitions.len() != k * N_ACTIONS {
            return Err(MdpError::Invalid(format!(
                "expected {} count rows, got {}",
                k * N_ACTIONS,
                transitions.len()
            )));
        }
        if !(gamma > T::zero() && gamma <= T::one()) {
            return Err(MdpError::InvalidDiscount(gamma.as_f64()));
        }
        if let Some(bad) = transitions
            .iter()
            .flat_map(|r| r.keys())
            .find(|&&s| s as usize > k + 1)
        {
            return Err(MdpError::Invalid(format!("successor {bad} out of range")));
        }
        let visits: Vec<u64> = transitions.iter().map(|r| r.values().sum()).collect();
        let mut behavior = vec![T::zero(); k * N_ACTIONS];
        for s in 0..k {
            let row = &visits[s * N_ACTIONS..(s + 1) * N_ACTIONS];
            let total: u64 = row.iter().sum();
            if total > 0 {
                for a in 0..N_ACTIONS {
                    behavior[s * N_ACTIONS + a] =
                        T::from_u64(row[a]).unwrap() / T::from_u64(total).unwrap();
                }
            }
        }
        Ok(Self {
            k,
            gamma,
            min_count,
            survive_reward: T::lit(SURVIVE_REWARD),
            die_reward: T::lit(DIE_REWARD),
            transitions,
            visits,
            behavior,
            solution: None,
        })
    }

    pub fn visits(&self, s: usize, a: ActionId) -> u64 {
        self.visits[s * N_ACTIONS + a as usize]
    }

    pub fn state_visits(&self, s: usize) -> u64 {
        self.visits[s * N_ACTIONS..(s + 1) * N_ACTIONS].iter().sum()
    }

    /// True iff the action was taken strictly more than `min_count` times.
    pub fn is_estimated(&self, s: usize, a: ActionId) -> bool {
        self.visits(s, a) > self.min_count
    }

    pub fn behavior_row(&self, s: usize) -> &[T] {
        &self.behavior[s * N_ACTIONS..(s + 1) * N_ACTIONS]
    }

    /// Count-normalised successor distribution; empty when unvisited.
    pub fn transition_probs(&self, s: usize, a: ActionId) -> Vec<(usize, T)> {
        let n = self.visits(s, a);
        if n == 0 {
            return Vec::new();
        }
        let n = T::from_u64(n).unwrap();
        self.transitions[s * N_ACTIONS + a as usize]
            .iter()
            .map(|(&s2, &c)| (s2 as usize, T::from_u64(c).unwrap() / n))
            .collect()
    }

    /// Most frequent clinician action in the state, lowest id on ties.
    pub fn plurality_action(&self, s: usize) -> ActionId {
        let row = &self.visits[s * N_ACTIONS..(s + 1) * N_ACTIONS];
        let mut best = 0;
        for a in 1..N_ACTIONS {
            if row[a] > row[best] {
                best = a;
            }
        }
        best as ActionId
    }

    /// Solved Q value, `None` if unsolved or not estimated.
    pub fn q_value(&self, s: usize, a: ActionId) -> Option<T> {
        let sol = self.solution.as_ref()?;
        let q = sol.q[s * N_ACTIONS + a as usize];
        (!q.is_nan()).then_some(q)
    }

    pub fn policy(&self) -> Option<&[ActionId]> {
        self.solution.as_ref().map(|s| s.policy.as_slice())
    }

    pub fn greedy_action(&self, s: usize) -> Option<ActionId> {
        self.policy().map(|p| p[s])
    }
}

/// Little-endian f64 row-major encoding used for matrix blobs.
pub fn encode_f64_blob<T: Scalar>(values: &[T]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|v| v.as_f64().to_le_bytes())
        .collect()
}

pub fn decode_f64_blob(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}
