//! Shapley attributions with the background sample marginalising absent features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::scalar::Scalar;
use crate::seeding;

/// Largest dimension handled by full subset enumeration under [`ShapleyMethod::Auto`].
pub const EXACT_MAX_FEATURES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    /// Exact up to [`EXACT_MAX_FEATURES`], permutation sampling above.
    #[default]
    Auto,
    Exact,
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyConfig {
    pub method: ShapleyMethod,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        Self {
            method: ShapleyMethod::Auto,
            n_perm: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution<T> {
    pub values: Vec<T>,
    /// Monte-Carlo standard error per feature; zero when exact.
    pub std_errors: Vec<T>,
    /// Standard error of the attribution sum.
    pub total_std_error: T,
    /// Mean score over the background.
    pub baseline: T,
    pub score: T,
    pub exact: bool,
}

impl<T: Scalar> Attribution<T> {
    /// `Σ φ − (score − baseline)`.
    pub fn efficiency_gap(&self) -> T {
        self.values.iter().copied().sum::<T>() - (self.score - self.baseline)
    }
}

/// Mean score over the background with the features in `present` taken from
/// the instance.
fn coalition_value<T: Scalar, S: Scorer<T> + ?Sized>(
    scorer: &S,
    x: &[T],
    background: &[Vec<T>],
    present: &[bool],
) -> T {
    let mut z = vec![T::zero(); x.len()];
    let mut total = T::zero();
    for b in background {
        for j in 0..x.len() {
            z[j] = if present[j] { x[j] } else { b[j] };
        }
        total += scorer.score(&z);
    }
    total / T::from_usize_lossy(background.len())
}

/// Panics if `background` is empty, the instance is empty, or `n_perm` is 0
/// for sampling.
pub fn shapley_attribution<T: Scalar, S: Scorer<T> + ?Sized>(
    scorer: &S,
    instance: &[T],
    background: &[Vec<T>],
    config: &ShapleyConfig,
) -> Attribution<T> {
    let exact = match config.method {
        ShapleyMethod::Exact => true,
        ShapleyMethod::Permutation => false,
        ShapleyMethod::Auto => instance.len() <= EXACT_MAX_FEATURES,
    };
    if exact {
        exact_shapley(scorer, instance, background)
    } else {
        permutation_shapley(scorer, instance, background, config.n_perm, config.seed)
    }
}

/// Enumerates all `2^d` coalitions.
pub fn exact_shapley<T: Scalar, S: Scorer<T> + ?Sized>(
    scorer: &S,
    x: &[T],
    background: &[Vec<T>],
) -> Attribution<T> {
    assert!(!background.is_empty(), "background must be non-empty");
    let d = x.len();
    assert!(d < 25, "exact enumeration over {d} features");
    let n_sets = 1usize << d;
    let v: Vec<T> = (0..n_sets)
        .map(|mask| {
            let present: Vec<bool> = (0..d).map(|j| mask >> j & 1 == 1).collect();
            coalition_value(scorer, x, background, &present)
        })
        .collect();
    // weight(s) = s! (d − s − 1)! / d!
    let mut fact = vec![1.0f64; d + 1];
    for i in 1..=d {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<T> = (0..d)
        .map(|s| T::lit(fact[s] * fact[d - s - 1] / fact[d]))
        .collect();
    let mut values = vec![T::zero(); d];
    for mask in 0..n_sets {
        let s = mask.count_ones() as usize;
        for (j, phi) in values.iter_mut().enumerate() {
            if mask >> j & 1 == 0 {
                *phi += weight[s] * (v[mask | 1 << j] - v[mask]);
            }
        }
    }
    Attribution {
        values,
        std_errors: vec![T::zero(); d],
        total_std_error: T::zero(),
        baseline: v[0],
        score: scorer.score(x),
        exact: true,
    }
}

/// Averages marginal contributions over `n_perm` seeded random orderings.
pub fn permutation_shapley<T: Scalar, S: Scorer<T> + ?Sized>(
    scorer: &S,
    x: &[T],
    background: &[Vec<T>],
    n_perm: usize,
    seed: u64,
) -> Attribution<T> {
    assert!(!background.is_empty(), "background must be non-empty");
    assert!(n_perm >= 1, "n_perm must be at least 1");
    let d = x.len();
    let mut rng = seeding::stream(seed, 0);
    let mut order: Vec<usize> = (0..d).collect();
    let mut sum = vec![T::zero(); d];
    let mut sum_sq = vec![T::zero(); d];
    let (mut tot, mut tot_sq) = (T::zero(), T::zero());
    let baseline = coalition_value(scorer, x, background, &vec![false; d]);
    let mut z: Vec<Vec<T>> = background.to_vec();
    let nb = T::from_usize_lossy(background.len());
    for _ in 0..n_perm {
        order.shuffle(&mut rng);
        z.clone_from_slice(background);
        let mut prev = baseline;
        let mut perm_total = T::zero();
        for &j in &order {
            let mut v = T::zero();
            for row in z.iter_mut() {
                row[j] = x[j];
                v += scorer.score(row);
            }
            v /= nb;
            let delta = v - prev;
            sum[j] += delta;
            sum_sq[j] += delta * delta;
            perm_total += delta;
            prev = v;
        }
        tot += perm_total;
        tot_sq += perm_total * perm_total;
    }
    let n = T::from_usize_lossy(n_perm);
    let se = |s: T, s2: T| {
        if n_perm < 2 {
            return T::zero();
        }
        let var = ((s2 - s * s / n) / (n - T::one())).max(T::zero());
        (var / n).sqrt()
    };
    Attribution {
        values: sum.iter().map(|&s| s / n).collect(),
        std_errors: sum.iter().zip(&sum_sq).map(|(&s, &s2)| se(s, s2)).collect(),
        total_std_error: se(tot, tot_sq),
        baseline,
        score: scorer.score(x),
        exact: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scorer_closed_form() {
        let w = [2.0, -1.0, 0.5];
        let f = |x: &[f64]| x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let bg = vec![vec![1.0, 2.0, 3.0], vec![3.0, 0.0, 1.0]];
        let x = [4.0, 4.0, 4.0];
        let a = exact_shapley(&f, &x, &bg);
        let mu = [2.0, 1.0, 2.0];
        for j in 0..3 {
            assert!((a.values[j] - w[j] * (x[j] - mu[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_equal_to_background_is_zero() {
        let f = |x: &[f64]| x[0] * x[1] + x[2].sin();
        let bg = vec![vec![0.3, -1.0, 2.0]];
        for a in [
            exact_shapley(&f, &bg[0], &bg),
            permutation_shapley(&f, &bg[0], &bg, 8, 3),
        ] {
            assert!(a.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn permutation_sums_telescope() {
        let f = |x: &[f64]| (x[0] * x[1]).tanh() + x[2] * x[3];
        let bg: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![i as f64, 1.0 - i as f64, 0.5, i as f64 * 0.1])
            .collect();
        let a = permutation_shapley(&f, &[1.0, 2.0, -1.0, 3.0], &bg, 17, 9);
        assert!(a.efficiency_gap().abs() <= 3.0 * a.total_std_error + 1e-12);
    }
}
