//! Weighted (self-normalised) importance sampling of per-trajectory returns,
//! with a seeded percentile bootstrap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{ActionId, Episode, MdpModel, DIE_REWARD, N_ACTIONS, SURVIVE_REWARD};
use crate::quantile::percentile_sorted;
use crate::scalar::Scalar;
use crate::seeding;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OpeError {
    #[error("no trajectories to evaluate")]
    Empty,
    #[error("no overlap: every trajectory has zero importance weight")]
    NoOverlap,
    #[error("trajectory {trajectory}: importance weight is not finite")]
    NonFinite { trajectory: usize },
    #[error(
        "trajectory {trajectory}: behavior probability of action {action} in state {state} is zero"
    )]
    ZeroBehavior {
        trajectory: usize,
        state: u32,
        action: ActionId,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeConfig {
    pub gamma: f64,
    /// Mass spread uniformly over the 24 non-greedy actions.
    pub epsilon: f64,
    /// Pseudo-count added to every action before normalising the behavior policy.
    pub smoothing: f64,
    /// Optional cap on each trajectory's importance weight.
    pub max_weight: Option<f64>,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for OpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon: 0.01,
            smoothing: 0.5,
            max_weight: None,
            n_boot: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WisEstimate<T> {
    pub value: T,
    pub ci_lo: T,
    pub ci_hi: T,
    pub n_boot: usize,
    /// Replicates that failed (e.g. no overlap) and were left out of the CI.
    pub n_boot_failed: usize,
    pub n_traj: usize,
    /// Effective sample size `(Σw)² / Σw²`.
    pub ess: T,
    pub config: OpeConfig,
}

/// Importance weight and discounted terminal return of every trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedReturns<T> {
    pub weights: Vec<T>,
    pub returns: Vec<T>,
}

/// `(N + α) / (Σ N + 25 α)` per state; unvisited states are uniform.
pub fn smoothed_behavior<T: Scalar>(mdp: &MdpModel<T>, alpha: T) -> Vec<T> {
    let mut out = vec![T::zero(); mdp.k * N_ACTIONS];
    let uniform = T::one() / T::from_usize_lossy(N_ACTIONS);
    for s in 0..mdp.k {
        let total =
            T::from_u64(mdp.state_visits(s)).unwrap() + alpha * T::from_usize_lossy(N_ACTIONS);
        for a in 0..N_ACTIONS {
            out[s * N_ACTIONS + a] = if total > T::zero() {
                (T::from_u64(mdp.visits(s, a as ActionId)).unwrap() + alpha) / total
            } else {
                uniform
            };
        }
    }
    out
}

/// `1 − ε` on the greedy action and `ε / 24` on each other action.
pub fn soften_greedy<T: Scalar>(policy: &[ActionId], epsilon: T) -> Vec<T> {
    let other = epsilon / T::from_usize_lossy(N_ACTIONS - 1);
    let mut out = vec![other; policy.len() * N_ACTIONS];
    for (s, &a) in policy.iter().enumerate() {
        out[s * N_ACTIONS + a as usize] = T::one() - epsilon;
    }
    out
}

/// `γ^{T−1} · (±100)`.
pub fn episode_return<T: Scalar>(e: &Episode, gamma: T) -> T {
    let r = if e.died {
        T::lit(DIE_REWARD)
    } else {
        T::lit(SURVIVE_REWARD)
    };
    r * gamma.powi(e.steps.len().saturating_sub(1) as i32)
}

/// Per-trajectory products of `π_eval(a|s) / π_b(a|s)`; both policies are
/// row-major `k × 25`.
pub fn weighted_returns<T: Scalar>(
    eval: &[T],
    behavior: &[T],
    episodes: &[Episode],
    gamma: T,
    max_weight: Option<T>,
) -> Result<WeightedReturns<T>, OpeError> {
    if episodes.is_empty() {
        return Err(OpeError::Empty);
    }
    let mut weights = Vec::with_capacity(episodes.len());
    let mut returns = Vec::with_capacity(episodes.len());
    for (i, e) in episodes.iter().enumerate() {
        let mut w = T::one();
        for &(s, a) in &e.steps {
            let idx = s as usize * N_ACTIONS + a as usize;
            let b = behavior[idx];
            if b <= T::zero() {
                return Err(OpeError::ZeroBehavior {
                    trajectory: i,
                    state: s,
                    action: a,
                });
            }
            w *= eval[idx] / b;
        }
        if !w.is_finite() {
            return Err(OpeError::NonFinite { trajectory: i });
        }
        if let Some(cap) = max_weight {
            w = w.min(cap);
        }
        weights.push(w);
        returns.push(episode_return(e, gamma));
    }
    Ok(WeightedReturns { weights, returns })
}

impl<T: Scalar> WeightedReturns<T> {
    /// `Σ wᵢ Gᵢ / Σ wᵢ` over the given trajectory indices (with repetition).
    pub fn estimate_over(&self, idx: impl Iterator<Item = usize>) -> Result<T, OpeError> {
        let (mut num, mut den) = (T::zero(), T::zero());
        for i in idx {
            num += self.weights[i] * self.returns[i];
            den += self.weights[i];
        }
        if !den.is_finite() {
            return Err(OpeError::NonFinite {
                trajectory: self
                    .weights
                    .iter()
                    .position(|w| !w.is_finite())
                    .unwrap_or(0),
            });
        }
        if den <= T::zero() {
            return Err(OpeError::NoOverlap);
        }
        Ok(num / den)
    }

    pub fn estimate(&self) -> Result<T, OpeError> {
        self.estimate_over(0..self.weights.len())
    }

    pub fn ess(&self) -> T {
        let s: T = self.weights.iter().copied().sum();
        let s2: T = self.weights.iter().map(|&w| w * w).sum();
        if s2 > T::zero() {
            s * s / s2
        } else {
            T::zero()
        }
    }

    /// Replicate `r` resamples `n` trajectory indices uniformly with
    /// replacement from the stream `seeding::stream(seed, r)`.
    pub fn bootstrap_replicates(&self, n_boot: usize, seed: u64) -> Vec<Result<T, OpeError>> {
        let n = self.weights.len();
        (0..n_boot)
            .map(|r| {
                let mut rng = seeding::stream(seed, r as u64);
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                self.estimate_over(idx.into_iter())
            })
            .collect()
    }
}

pub fn wis_value<T: Scalar>(
    eval: &[T],
    behavior: &[T],
    episodes: &[Episode],
    gamma: T,
) -> Result<T, OpeError> {
    weighted_returns(eval, behavior, episodes, gamma, None)?.estimate()
}

/// Point estimate plus 2.5 / 97.5 percentile bootstrap interval.
pub fn wis_bootstrap<T: Scalar>(
    eval: &[T],
    behavior: &[T],
    episodes: &[Episode],
    config: &OpeConfig,
) -> Result<WisEstimate<T>, OpeError> {
    if config.n_boot == 0 {
        return Err(OpeError::Config("n_boot must be at least 1".into()));
    }
    let terms = weighted_returns(
        eval,
        behavior,
        episodes,
        T::lit(config.gamma),
        config.max_weight.map(T::lit),
    )?;
    let value = terms.estimate()?;
    let reps = terms.bootstrap_replicates(config.n_boot, config.seed);
    let mut ok: Vec<T> = reps
        .iter()
        .filter_map(|r| r.as_ref().ok().copied())
        .collect();
    let n_boot_failed = reps.len() - ok.len();
    if ok.is_empty() {
        return Err(OpeError::NoOverlap);
    }
    ok.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(WisEstimate {
        value,
        ci_lo: percentile_sorted(&ok, 0.025),
        ci_hi: percentile_sorted(&ok, 0.975),
        n_boot: config.n_boot,
        n_boot_failed,
        n_traj: episodes.len(),
        ess: terms.ess(),
        config: config.clone(),
    })
}

/// Evaluates a greedy policy against a fitted model's smoothed behavior policy.
pub fn evaluate_greedy<T: Scalar>(
    mdp: &MdpModel<T>,
    policy: &[ActionId],
    episodes: &[Episode],
    config: &OpeConfig,
) -> Result<WisEstimate<T>, OpeError> {
    let behavior = smoothed_behavior(mdp, T::lit(config.smoothing));
    let eval = soften_greedy(policy, T::lit(config.epsilon));
    wis_bootstrap(&eval, &behavior, episodes, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state_policies(eval_a: f64, eval_b: f64) -> (Vec<f64>, Vec<f64>) {
        let mut eval = vec![0.0; N_ACTIONS];
        let mut beh = vec![0.0; N_ACTIONS];
        eval[0] = eval_a;
        eval[1] = eval_b;
        beh[0] = 0.5;
        beh[1] = 0.5;
        (eval, beh)
    }

    #[test]
    fn two_trajectory_fixture_is_sixty() {
        // weights: 1.0/0.5 = 2 and 0.25/0.5 = 0.5
        let (eval, beh) = one_state_policies(1.0, 0.25);
        let eps = vec![
            Episode {
                steps: vec![(0, 0)],
                died: false,
            },
            Episode {
                steps: vec![(0, 1)],
                died: true,
            },
        ];
        assert_eq!(wis_value(&eval, &beh, &eps, 1.0).unwrap(), 60.0);
    }

    #[test]
    fn identical_policies_give_plain_mean() {
        let (_, beh) = one_state_policies(0.0, 0.0);
        let eps = vec![
            Episode {
                steps: vec![(0, 0), (0, 1)],
                died: false,
            },
            Episode {
                steps: vec![(0, 1)],
                died: true,
            },
            Episode {
                steps: vec![(0, 0)],
                died: false,
            },
        ];
        let gamma = 0.9;
        let mean = (100.0 * 0.9 - 100.0 + 100.0) / 3.0;
        assert!((wis_value(&beh, &beh, &eps, gamma).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn zero_overlap_is_an_error() {
        let (eval, beh) = one_state_policies(0.0, 0.0);
        let eps = vec![Episode {
            steps: vec![(0, 0)],
            died: false,
        }];
        assert_eq!(wis_value(&eval, &beh, &eps, 1.0), Err(OpeError::NoOverlap));
    }

    #[test]
    fn bootstrap_of_identical_trajectories_has_zero_width() {
        let (_, beh) = one_state_policies(0.0, 0.0);
        let eps = vec![
            Episode {
                steps: vec![(0, 0)],
                died: true
            };
            20
        ];
        let cfg = OpeConfig {
            n_boot: 50,
            ..Default::default()
        };
        let est = wis_bootstrap(&beh, &beh, &eps, &cfg).unwrap();
        assert_eq!(est.ci_lo, est.ci_hi);
        assert_eq!(est.value, -100.0);
    }

    #[test]
    fn single_replicate_is_degenerate() {
        let (eval, beh) = one_state_policies(0.7, 0.3);
        let eps: Vec<Episode> = (0..30)
            .map(|i| Episode {
                steps: vec![(0, (i % 2) as u8)],
                died: i % 3 == 0,
            })
            .collect();
        let cfg = OpeConfig {
            n_boot: 1,
            seed: 4,
            ..Default::default()
        };
        let est = wis_bootstrap(&eval, &beh, &eps, &cfg).unwrap();
        assert_eq!(est.ci_lo, est.ci_hi);
    }

    #[test]
    fn softened_rows_sum_to_one() {
        let p = soften_greedy::<f64>(&[3, 24], 0.01);
        for s in 0..2 {
            let sum: f64 = p[s * N_ACTIONS..(s + 1) * N_ACTIONS].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
