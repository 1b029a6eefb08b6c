mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use sepsis_core::mdp::{encode_cohort, ActionId, Episode, MdpModel, N_ACTIONS};
use sepsis_core::simgen::GroundTruthMdp;
use sepsis_core::statespace::fit_states;
use support::{enumerate_optimum, random_count_mdp};

fn assert_matches_enumeration(mdp: &MdpModel<f64>) {
    let solved = mdp.policy_iteration().unwrap();
    let oracle = enumerate_optimum(mdp);
    let sol = solved.solution.as_ref().unwrap();
    for s in 0..mdp.k {
        assert!((sol.values[s] - oracle.values[s]).abs() < 1e-8, "V[{s}]");
        for a in 0..N_ACTIONS {
            match oracle.q[s][a] {
                Some(q) => assert!(
                    (solved.q_value(s, a as ActionId).unwrap() - q).abs() < 1e-8,
                    "Q[{s}][{a}]"
                ),
                None => assert_eq!(solved.q_value(s, a as ActionId), None),
            }
        }
    }
    assert_eq!(solved.policy().unwrap(), &oracle.policy[..]);
}

#[test]
fn three_state_chain_matches_all_eight_policies() {
    // state s: action 0 advances (s → s+1, last state survives w.p. 0.7),
    // action 1 gambles (0.5 survive, 0.5 die)
    let k = 3;
    let mut rows = vec![BTreeMap::new(); k * N_ACTIONS];
    for s in 0..k {
        let adv = &mut rows[s * N_ACTIONS];
        if s + 1 < k {
            adv.insert((s + 1) as u32, 10);
        } else {
            adv.insert(k as u32, 7);
            adv.insert(k as u32 + 1, 3);
        }
        let gamble = &mut rows[s * N_ACTIONS + 1];
        gamble.insert(k as u32, 5);
        gamble.insert(k as u32 + 1, 5);
    }
    let mdp = MdpModel::from_counts(k, rows, 0.9, 5).unwrap();
    let oracle = enumerate_optimum(&mdp);
    assert_eq!(oracle.n_policies, 8);
    assert_matches_enumeration(&mdp);
    // V(2) = 40, V(1) = 36, V(0) = 32.4: advancing always wins
    let solved = mdp.policy_iteration().unwrap();
    assert_eq!(solved.policy().unwrap(), &[0, 0, 0]);
    let v = &solved.solution.as_ref().unwrap().values;
    for (got, want) in v.iter().zip([32.4, 36.0, 40.0]) {
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn random_mdps_match_enumeration() {
    for seed in 0..20 {
        let n_states = 2 + (seed as usize % 5);
        let n_actions = 1 + (seed as usize % 4);
        assert_matches_enumeration(&random_count_mdp(seed, n_states, n_actions));
    }
}

#[test]
fn doubled_trajectories_double_counts() {
    let e = Episode {
        steps: vec![(0, 3), (1, 7), (0, 3)],
        died: true,
    };
    let one = MdpModel::<f64>::from_episodes(2, std::slice::from_ref(&e), 0.99, 5).unwrap();
    let two = MdpModel::<f64>::from_episodes(2, &[e.clone(), e], 0.99, 5).unwrap();
    for (a, b) in one.transitions.iter().zip(&two.transitions) {
        for (s, c) in a {
            assert_eq!(b[s], 2 * c);
        }
        assert_eq!(a.len(), b.len());
    }
    assert_eq!(one.behavior, two.behavior);
}

#[test]
fn estimated_transitions_match_ground_truth() {
    let truth = GroundTruthMdp::six_state_oracle(8.0);
    // No truncation, so every recorded last step really reached its terminal.
    // At 500 visits a 0.02 band is only about one binomial standard error, so
    // the cohort is large enough that every checked row has thousands.
    let sample = truth.sample_cohort(100_000, 3, 10_000).unwrap();
    let steps: usize = sample.trajectories.iter().map(|p| p.len()).sum();
    assert!(steps >= 50_000, "{steps} timesteps");
    // encode with the true latent states so only counting is under test
    let episodes: Vec<Episode> = sample
        .latent_states
        .iter()
        .zip(&sample.actions)
        .zip(&sample.trajectories)
        .map(|((s, a), p)| Episode {
            steps: s.iter().zip(a).map(|(&s, &a)| (s as u32, a)).collect(),
            died: p.died,
        })
        .collect();
    let mdp = MdpModel::<f64>::from_episodes(6, &episodes, 0.99, 5).unwrap();
    let mut checked = 0;
    for s in 0..6 {
        for a in 0..N_ACTIONS {
            if mdp.visits(s, a as ActionId) < 500 {
                continue;
            }
            checked += 1;
            let est: BTreeMap<usize, f64> =
                mdp.transition_probs(s, a as ActionId).into_iter().collect();
            for (s2, &p) in truth.transitions[s][a].iter().enumerate() {
                let e = est.get(&s2).copied().unwrap_or(0.0);
                assert!((e - p).abs() < 0.02, "T[{s}][{a}][{s2}]: {e} vs {p}");
            }
        }
    }
    assert!(checked >= 25);
}

#[test]
fn learned_states_encode_whole_cohort() {
    let truth = GroundTruthMdp::six_state_oracle(8.0);
    let sample = truth.sample_cohort(300, 5, 10).unwrap();
    let feats = truth.schema.clustering_features();
    let model = fit_states::<f64>(&sample.trajectories, &feats, 6, 1, 2).unwrap();
    let episodes = encode_cohort(&sample.trajectories, &model, &truth.action_space());
    assert_eq!(episodes.len(), sample.trajectories.len());
    for (e, acts) in episodes.iter().zip(&sample.actions) {
        let got: Vec<ActionId> = e.steps.iter().map(|&(_, a)| a).collect();
        assert_eq!(&got, acts);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn optimal_values_dominate_every_policy(seed in 0u64..10_000, n in 2usize..6, m in 1usize..4) {
        let mdp = random_count_mdp(seed, n, m);
        let solved = mdp.policy_iteration().unwrap();
        let v = &solved.solution.as_ref().unwrap().values;
        let allowed: Vec<Vec<ActionId>> = (0..n)
            .map(|s| (0..N_ACTIONS as ActionId).filter(|&a| mdp.is_estimated(s, a)).collect())
            .collect();
        // every single-state deviation from the solved policy is no better
        for s in 0..n {
            for &a in &allowed[s] {
                let mut p = solved.policy().unwrap().to_vec();
                p[s] = a;
                let alt = mdp.evaluate_policy(&p).unwrap();
                for t in 0..n {
                    prop_assert!(alt[t] <= v[t] + 1e-8);
                }
            }
        }
    }

    #[test]
    fn values_within_reward_bounds(seed in 0u64..10_000, n in 2usize..8) {
        let mdp = random_count_mdp(seed, n, 3);
        let solved = mdp.policy_iteration().unwrap();
        for &v in &solved.solution.as_ref().unwrap().values {
            prop_assert!((-100.0 - 1e-9..=100.0 + 1e-9).contains(&v));
        }
    }
}
