use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{ActionId, MdpError, MdpModel, N_ACTIONS};
use crate::linalg::{Lu, Matrix};
use crate::scalar::Scalar;

const MAX_ITERATIONS: usize = 1000;

/// Q values within this distance of the best count as ties.
fn tie_tolerance<T: Scalar>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(1e3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    /// State values of the policy evaluated in this iteration.
    pub values: Vec<T>,
    /// States whose action changed in the subsequent improvement step.
    pub changed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution<T> {
    /// Row-major `k × 25`; NaN marks actions that are not estimated.
    pub q: Vec<T>,
    pub values: Vec<T>,
    pub policy: Vec<ActionId>,
    /// States with no action over the count threshold; their policy falls back
    /// to the clinicians' most frequent action.
    pub uncovered: Vec<usize>,
    #[serde(default = "Vec::new", skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<IterationRecord<T>>,
}

impl<T: Scalar> MdpModel<T> {
    /// States that cannot reach a terminal through any observed transition.
    fn states_without_exit(&self, edge: impl Fn(usize, usize) -> bool) -> Vec<usize> {
        let k = self.k;
        // predecessors over observed successor edges
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); k + 2];
        for s in 0..k {
            for a in 0..N_ACTIONS {
                if !edge(s, a) {
                    continue;
                }
                for &s2 in self.transitions[s * N_ACTIONS + a].keys() {
                    preds[s2 as usize].push(s);
                }
            }
        }
        let mut reach = vec![false; k + 2];
        let mut queue: VecDeque<usize> = VecDeque::from([k, k + 1]);
        reach[k] = true;
        reach[k + 1] = true;
        while let Some(x) = queue.pop_front() {
            for &p in &preds[x] {
                if !reach[p] {
                    reach[p] = true;
                    queue.push_back(p);
                }
            }
        }
        (0..k)
            .filter(|&s| !reach[s] && self.state_visits(s) > 0)
            .collect()
    }

    /// Exact value of a deterministic policy over the estimated dynamics.
    /// States with no data for their action, and (at discount 1) states that
    /// never terminate, have value 0.
    pub fn evaluate_policy(&self, policy: &[ActionId]) -> Result<Vec<T>, MdpError> {
        let k = self.k;
        assert_eq!(policy.len(), k);
        let gamma = self.gamma;
        let mut stuck = vec![false; k];
        if gamma >= T::one() {
            for s in self.states_without_exit(|s, a| policy[s] as usize == a) {
                stuck[s] = true;
            }
            // states whose policy action has no data also never terminate
            for s in 0..k {
                if self.visits(s, policy[s]) == 0 {
                    stuck[s] = true;
                }
            }
        }
        let mut a = Matrix::<T>::identity(k);
        let mut b = vec![T::zero(); k];
        for s in 0..k {
            if stuck[s] {
                continue;
            }
            for (s2, p) in self.transition_probs(s, policy[s]) {
                if s2 == self.survive_index() {
                    b[s] += p * self.survive_reward;
                } else if s2 == self.die_index() {
                    b[s] += p * self.die_reward;
                } else if !stuck[s2] {
                    a[(s, s2)] -= gamma * p;
                }
            }
        }
        Ok(Lu::factor(a)?.solve(&b))
    }

    /// `Σ P(s'|s,a) (R(s') + γ V(s'))` with terminal values 0.
    pub fn backup(&self, values: &[T], s: usize, a: ActionId) -> T {
        self.transition_probs(s, a)
            .into_iter()
            .map(|(s2, p)| {
                let next = if s2 == self.survive_index() {
                    self.survive_reward
                } else if s2 == self.die_index() {
                    self.die_reward
                } else {
                    self.gamma * values[s2]
                };
                p * next
            })
            .sum()
    }

    /// Policy iteration restricted to estimated actions. Returns a copy of the
    /// model with `solution` filled.
    pub fn policy_iteration(&self) -> Result<MdpModel<T>, MdpError> {
        let k = self.k;
        if self.gamma >= T::one() {
            let stuck = self.states_without_exit(|_, _| true);
            if !stuck.is_empty() {
                return Err(MdpError::NonContractive { states: stuck });
            }
        }
        let allowed: Vec<Vec<ActionId>> = (0..k)
            .map(|s| {
                (0..N_ACTIONS as ActionId)
                    .filter(|&a| self.is_estimated(s, a))
                    .collect()
            })
            .collect();
        let uncovered: Vec<usize> = (0..k).filter(|&s| allowed[s].is_empty()).collect();

        // start from the most visited estimated action
        let mut policy: Vec<ActionId> = (0..k)
            .map(|s| {
                let cands: &[ActionId] = &allowed[s];
                if cands.is_empty() {
                    self.plurality_action(s)
                } else {
                    let mut best = cands[0];
                    for &a in cands {
                        if self.visits(s, a) > self.visits(s, best) {
                            best = a;
                        }
                    }
                    best
                }
            })
            .collect();

        let tol = tie_tolerance::<T>();
        let mut trace = Vec::new();
        let mut values;
        let mut iteration = 0;
        loop {
            values = self.evaluate_policy(&policy)?;
            let mut next = policy.clone();
            for s in 0..k {
                if allowed[s].is_empty() {
                    continue;
                }
                let qs: Vec<T> = allowed[s]
                    .iter()
                    .map(|&a| self.backup(&values, s, a))
                    .collect();
                let best = qs.iter().copied().fold(T::neg_infinity(), T::max);
                let current = allowed[s]
                    .iter()
                    .position(|&a| a == policy[s])
                    .map(|i| qs[i]);
                // keep the incumbent on ties so the iteration cannot cycle
                if current.is_some_and(|q| q >= best - tol) {
                    continue;
                }
                let i = qs.iter().position(|&q| q >= best - tol).unwrap();
                next[s] = allowed[s][i];
            }
            let changed = next.iter().zip(&policy).filter(|(a, b)| a != b).count();
            trace.push(IterationRecord {
                iteration,
                values: values.clone(),
                changed,
            });
            if changed == 0 {
                break;
            }
            policy = next;
            iteration += 1;
            if iteration >= MAX_ITERATIONS {
                return Err(MdpError::NoConvergence(MAX_ITERATIONS));
            }
        }

        let mut q = vec![T::nan(); k * N_ACTIONS];
        for s in 0..k {
            for &a in &allowed[s] {
                q[s * N_ACTIONS + a as usize] = self.backup(&values, s, a);
            }
        }
        // final greedy choice: lowest action id among the (tolerance) argmax
        for s in 0..k {
            if allowed[s].is_empty() {
                continue;
            }
            let row = &q[s * N_ACTIONS..(s + 1) * N_ACTIONS];
            let best = allowed[s]
                .iter()
                .map(|&a| row[a as usize])
                .fold(T::neg_infinity(), T::max);
            policy[s] = *allowed[s]
                .iter()
                .find(|&&a| row[a as usize] >= best - tol)
                .unwrap();
        }

        let mut solved = self.clone();
        solved.solution = Some(Solution {
            q,
            values,
            policy,
            uncovered,
            trace,
        });
        Ok(solved)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn counts(k: usize, entries: &[(usize, u8, u32, u64)]) -> Vec<BTreeMap<u32, u64>> {
        let mut t = vec![BTreeMap::new(); k * N_ACTIONS];
        for &(s, a, s2, c) in entries {
            t[s * N_ACTIONS + a as usize].insert(s2, c);
        }
        t
    }

    #[test]
    fn survive_or_die_in_one_step() {
        // state 0: action 3 → survive (index 1), action 9 → die (index 2)
        let m = MdpModel::<f64>::from_counts(1, counts(1, &[(0, 3, 1, 10), (0, 9, 2, 10)]), 1.0, 5)
            .unwrap();
        let solved = m.policy_iteration().unwrap();
        assert_eq!(solved.q_value(0, 3), Some(100.0));
        assert_eq!(solved.q_value(0, 9), Some(-100.0));
        assert_eq!(solved.q_value(0, 0), None);
        assert_eq!(solved.greedy_action(0), Some(3));
    }

    #[test]
    fn threshold_is_strict() {
        let m = MdpModel::<f64>::from_counts(1, counts(1, &[(0, 3, 1, 5), (0, 9, 2, 6)]), 1.0, 5)
            .unwrap();
        let solved = m.policy_iteration().unwrap();
        assert_eq!(solved.q_value(0, 3), None);
        assert_eq!(solved.greedy_action(0), Some(9));
    }

    #[test]
    fn uncovered_state_falls_back_to_plurality() {
        let m = MdpModel::<f64>::from_counts(
            2,
            counts(2, &[(0, 1, 1, 20), (1, 4, 2, 2), (1, 2, 3, 3)]),
            0.9,
            5,
        )
        .unwrap();
        let solved = m.policy_iteration().unwrap();
        let sol = solved.solution.as_ref().unwrap();
        assert_eq!(sol.uncovered, vec![1]);
        assert_eq!(sol.policy[1], 2);
    }

    #[test]
    fn ties_break_to_lowest_action() {
        let m =
            MdpModel::<f64>::from_counts(1, counts(1, &[(0, 12, 1, 10), (0, 4, 1, 30)]), 0.9, 5)
                .unwrap();
        assert_eq!(m.policy_iteration().unwrap().greedy_action(0), Some(4));
        let m =
            MdpModel::<f64>::from_counts(1, counts(1, &[(0, 4, 1, 10), (0, 12, 1, 30)]), 0.9, 5)
                .unwrap();
        assert_eq!(m.policy_iteration().unwrap().greedy_action(0), Some(4));
    }

    #[test]
    fn undiscounted_loop_is_non_contractive() {
        // state 0 only ever returns to itself
        let m = MdpModel::<f64>::from_counts(1, counts(1, &[(0, 0, 0, 10)]), 1.0, 5).unwrap();
        assert!(matches!(
            m.policy_iteration(),
            Err(MdpError::NonContractive { .. })
        ));
    }

    #[test]
    fn works_in_f32() {
        let m =
            MdpModel::<f32>::from_counts(1, counts(1, &[(0, 3, 1, 10), (0, 9, 2, 10)]), 0.99, 5)
                .unwrap();
        let solved = m.policy_iteration().unwrap();
        assert_eq!(solved.greedy_action(0), Some(3));
        assert!((solved.q_value(0, 3).unwrap() - 100.0).abs() < 1e-4);
    }
}
