//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use sepsis_core::mdp::{ActionId, MdpModel, N_ACTIONS};
use sepsis_core::seeding;

/// Gaussian elimination with full pivoting, written separately from the
/// library's LU so the two can check each other.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (mut pr, mut pc, mut best) = (col, col, 0.0);
        for r in col..n {
            for c in col..n {
                if a[r][c].abs() > best {
                    best = a[r][c].abs();
                    pr = r;
                    pc = c;
                }
            }
        }
        assert!(best > 1e-300, "singular system");
        a.swap(col, pr);
        b.swap(col, pr);
        for row in a.iter_mut() {
            row.swap(col, pc);
        }
        perm.swap(col, pc);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut y = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * y[c]).sum();
        y[r] = (b[r] - s) / a[r][r];
    }
    let mut x = vec![0.0; n];
    for (i, &p) in perm.iter().enumerate() {
        x[p] = y[i];
    }
    x
}

/// Transition probabilities straight from the raw counts: `(successor, p)`.
fn probs(mdp: &MdpModel<f64>, s: usize, a: usize) -> Vec<(usize, f64)> {
    let row = &mdp.transitions[s * N_ACTIONS + a];
    let total: u64 = row.values().sum();
    row.iter()
        .map(|(&s2, &c)| (s2 as usize, c as f64 / total as f64))
        .collect()
}

fn q_of(mdp: &MdpModel<f64>, v: &[f64], s: usize, a: usize) -> f64 {
    let k = mdp.k;
    probs(mdp, s, a)
        .into_iter()
        .map(|(s2, p)| {
            p * if s2 == k {
                mdp.survive_reward
            } else if s2 == k + 1 {
                mdp.die_reward
            } else {
                mdp.gamma * v[s2]
            }
        })
        .sum()
}

fn evaluate(mdp: &MdpModel<f64>, policy: &[usize]) -> Vec<f64> {
    let k = mdp.k;
    let mut a = vec![vec![0.0; k]; k];
    let mut b = vec![0.0; k];
    for s in 0..k {
        a[s][s] = 1.0;
        for (s2, p) in probs(mdp, s, policy[s]) {
            if s2 == k {
                b[s] += p * mdp.survive_reward;
            } else if s2 == k + 1 {
                b[s] += p * mdp.die_reward;
            } else {
                a[s][s2] -= mdp.gamma * p;
            }
        }
    }
    gauss_solve(a, b)
}

pub struct Enumerated {
    pub values: Vec<f64>,
    /// `q[s][a]`, `None` where the action is not estimated.
    pub q: Vec<Vec<Option<f64>>>,
    /// Lowest-id argmax of `q` per covered state; plurality elsewhere.
    pub policy: Vec<ActionId>,
    pub n_policies: usize,
}

/// Evaluates every deterministic policy over the estimated actions (states
/// without any keep their most visited action) and keeps the one with the
/// largest total value, which is optimal in every state.
pub fn enumerate_optimum(mdp: &MdpModel<f64>) -> Enumerated {
    let k = mdp.k;
    let visits = |s: usize, a: usize| -> u64 { mdp.transitions[s * N_ACTIONS + a].values().sum() };
    let plurality = |s: usize| -> usize {
        let mut best = 0;
        for a in 1..N_ACTIONS {
            if visits(s, a) > visits(s, best) {
                best = a;
            }
        }
        best
    };
    let choices: Vec<Vec<usize>> = (0..k)
        .map(|s| {
            let c: Vec<usize> = (0..N_ACTIONS)
                .filter(|&a| visits(s, a) > mdp.min_count)
                .collect();
            if c.is_empty() {
                vec![plurality(s)]
            } else {
                c
            }
        })
        .collect();
    let mut idx = vec![0usize; k];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut n_policies = 0;
    loop {
        let policy: Vec<usize> = (0..k).map(|s| choices[s][idx[s]]).collect();
        let v = evaluate(mdp, &policy);
        let total: f64 = v.iter().sum();
        n_policies += 1;
        if best.as_ref().is_none_or(|(t, _)| total > *t) {
            best = Some((total, v));
        }
        // odometer increment
        let mut pos = 0;
        while pos < k {
            idx[pos] += 1;
            if idx[pos] < choices[pos].len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
        if pos == k {
            break;
        }
    }
    let values = best.unwrap().1;
    let q: Vec<Vec<Option<f64>>> = (0..k)
        .map(|s| {
            (0..N_ACTIONS)
                .map(|a| (visits(s, a) > mdp.min_count).then(|| q_of(mdp, &values, s, a)))
                .collect()
        })
        .collect();
    let policy = (0..k)
        .map(|s| {
            let max = q[s]
                .iter()
                .flatten()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            match q[s].iter().position(|x| x.is_some_and(|x| x >= max - 1e-9)) {
                Some(a) => a as ActionId,
                None => plurality(s) as ActionId,
            }
        })
        .collect();
    Enumerated {
        values,
        q,
        policy,
        n_policies,
    }
}

/// Random count-based MDP over `n_states` states using `n_actions` distinct
/// grid actions; roughly one action in five stays under the count threshold.
pub fn random_count_mdp(seed: u64, n_states: usize, n_actions: usize) -> MdpModel<f64> {
    let mut rng = seeding::stream(seed, 7);
    let mut ids: Vec<usize> = (0..N_ACTIONS).collect();
    for i in 0..n_actions {
        let j = rng.random_range(i..N_ACTIONS);
        ids.swap(i, j);
    }
    let gamma = 0.5 + 0.49 * rng.random::<f64>();
    let mut rows = vec![BTreeMap::new(); n_states * N_ACTIONS];
    for s in 0..n_states {
        for &a in &ids[..n_actions] {
            let total = if rng.random::<f64>() < 0.2 {
                rng.random_range(0..=5)
            } else {
                rng.random_range(6..80)
            };
            let row: &mut BTreeMap<u32, u64> = &mut rows[s * N_ACTIONS + a];
            for _ in 0..total {
                let succ = rng.random_range(0..n_states as u32 + 2);
                *row.entry(succ).or_insert(0) += 1;
            }
        }
    }
    MdpModel::from_counts(n_states, rows, gamma, 5).unwrap()
}

/// Shapley values as the average marginal contribution over all `d!`
/// orderings, each coalition valued by averaging over the background.
pub fn shapley_by_orderings(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    background: &[Vec<f64>],
) -> Vec<f64> {
    let d = x.len();
    let value = |present: &[bool]| -> f64 {
        background
            .iter()
            .map(|b| {
                let z: Vec<f64> = (0..d)
                    .map(|j| if present[j] { x[j] } else { b[j] })
                    .collect();
                f(&z)
            })
            .sum::<f64>()
            / background.len() as f64
    };
    let mut phi = vec![0.0; d];
    let mut order: Vec<usize> = (0..d).collect();
    let mut count = 0usize;
    heap_permutations(&mut order, d, &mut |perm| {
        let mut present = vec![false; d];
        let mut prev = value(&present);
        for &j in perm {
            present[j] = true;
            let v = value(&present);
            phi[j] += v - prev;
            prev = v;
        }
        count += 1;
    });
    phi.iter().map(|p| p / count as f64).collect()
}

fn heap_permutations(a: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k <= 1 {
        visit(a);
        return;
    }
    heap_permutations(a, k - 1, visit);
    for i in 0..k - 1 {
        if k.is_multiple_of(2) {
            a.swap(i, k - 1);
        } else {
            a.swap(0, k - 1);
        }
        heap_permutations(a, k - 1, visit);
    }
}

/// Index of the nearest row by exhaustive scan; first index wins ties.
pub fn brute_nearest(rows: &[Vec<f64>], z: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, r) in rows.iter().enumerate() {
        let d: f64 = r.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// `(Xᵀ X)⁻¹ Xᵀ y` by the normal equations, for regression oracles.
pub fn ols_normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = x[0].len();
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..k {
            xty[i] += row[i] * yi;
            for j in 0..k {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    gauss_solve(xtx, xty)
}

/// HC1 covariance `n/(n−k) (XᵀX)⁻¹ Xᵀ diag(e²) X (XᵀX)⁻¹`, returned as
/// standard errors.
pub fn hc1_standard_errors(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let (n, k) = (x.len(), x[0].len());
    let beta = ols_normal_equations(x, y);
    let mut xtx = vec![vec![0.0; k]; k];
    let mut meat = vec![vec![0.0; k]; k];
    for (row, &yi) in x.iter().zip(y) {
        let e: f64 = yi - row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..k {
            for j in 0..k {
                xtx[i][j] += row[i] * row[j];
                meat[i][j] += row[i] * row[j] * e * e;
            }
        }
    }
    // invert column by column
    let inv: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut e = vec![0.0; k];
            e[c] = 1.0;
            gauss_solve(xtx.clone(), e)
        })
        .collect(); // inv[c] is column c; XᵀX is symmetric so also row c
    let mut se = vec![0.0; k];
    for i in 0..k {
        let mut v = 0.0;
        for a in 0..k {
            for b in 0..k {
                v += inv[i][a] * meat[a][b] * inv[b][i];
            }
        }
        se[i] = (v * n as f64 / (n - k) as f64).sqrt();
    }
    se
}
