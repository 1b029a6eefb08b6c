//! Histogram gradient-boosted trees with logistic loss.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::scalar::Scalar;
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Candidate split thresholds per feature.
    pub max_bins: usize,
    pub min_child_hessian: f64,
    /// Rows kept for training; larger sets are subsampled with the seed.
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.3,
            lambda: 1.0,
            max_bins: 32,
            min_child_hessian: 1e-3,
            max_rows: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node<T> {
    /// `x[feature] <= threshold` goes left; NaN goes right.
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
    Leaf(T),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<T> {
    pub nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tree<T> {
    pub fn predict(&self, x: &[T]) -> T {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go<T>(nodes: &[Node<T>], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// Boosted ensemble; [`Scorer::score`] returns the log-odds margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbdt<T> {
    pub base: T,
    pub trees: Vec<Tree<T>>,
    pub n_features: usize,
}

impl<T: Scalar> Gbdt<T> {
    pub fn margin(&self, x: &[T]) -> T {
        self.trees
            .iter()
            .fold(self.base, |acc, t| acc + t.predict(x))
    }

    pub fn probability(&self, x: &[T]) -> T {
        sigmoid(self.margin(x))
    }
}

impl<T: Scalar> Scorer<T> for Gbdt<T> {
    fn score(&self, x: &[T]) -> T {
        self.margin(x)
    }
}

fn sigmoid<T: Scalar>(m: T) -> T {
    T::one() / (T::one() + (-m).exp())
}

/// Positives first (up to half the budget), then negatives, both drawn
/// without replacement from the seeded stream.
fn subsample(labels: &[bool], max_rows: usize, seed: u64) -> Vec<usize> {
    if labels.len() <= max_rows {
        return (0..labels.len()).collect();
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let n_pos = pos
        .len()
        .min(max_rows / 2)
        .max(max_rows.saturating_sub(neg.len()));
    let n_neg = (max_rows - n_pos).min(neg.len());
    let mut rng = seeding::stream(seed, 0);
    let mut rows: Vec<usize> = sample(&mut rng, pos.len(), n_pos)
        .into_iter()
        .map(|i| pos[i])
        .collect();
    rows.extend(
        sample(&mut rng, neg.len(), n_neg)
            .into_iter()
            .map(|i| neg[i]),
    );
    rows.sort_unstable();
    rows
}

struct Binned<T> {
    /// Per feature, ascending candidate thresholds.
    thresholds: Vec<Vec<T>>,
    /// Per feature, per row: number of thresholds strictly below the value
    /// (NaN maps past the last threshold).
    bins: Vec<Vec<u16>>,
}

fn bin_features<T: Scalar>(rows: &[&[T]], d: usize, max_bins: usize) -> Binned<T> {
    let mut thresholds = Vec::with_capacity(d);
    let mut bins = Vec::with_capacity(d);
    for j in 0..d {
        let mut vals: Vec<T> = rows.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        let thr: Vec<T> = if vals.len() <= max_bins {
            // midpoints are not used so that thresholds stay data values
            vals.iter()
                .take(vals.len().saturating_sub(1))
                .copied()
                .collect()
        } else {
            let mut t: Vec<T> = (1..max_bins)
                .map(|q| vals[q * (vals.len() - 1) / max_bins])
                .collect();
            t.dedup();
            t
        };
        let b = rows
            .iter()
            .map(|r| {
                if r[j].is_nan() {
                    thr.len() as u16
                } else {
                    thr.partition_point(|t| *t < r[j]) as u16
                }
            })
            .collect();
        thresholds.push(thr);
        bins.push(b);
    }
    Binned { thresholds, bins }
}

struct Builder<'a, T> {
    binned: &'a Binned<T>,
    grad: &'a [T],
    hess: &'a [T],
    config: &'a GbdtConfig,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn leaf_value(&self, g: T, h: T) -> T {
        -T::lit(self.config.learning_rate) * g / (h + T::lit(self.config.lambda))
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let g: T = rows.iter().map(|&i| self.grad[i]).sum();
        let h: T = rows.iter().map(|&i| self.hess[i]).sum();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.leaf_value(g, h)));
        if depth >= self.config.max_depth || rows.len() < 2 {
            return id;
        }
        let lambda = T::lit(self.config.lambda);
        let min_h = T::lit(self.config.min_child_hessian);
        let parent = g * g / (h + lambda);
        let mut best: Option<(T, usize, usize)> = None;
        for (j, thr) in self.binned.thresholds.iter().enumerate() {
            if thr.is_empty() {
                continue;
            }
            let mut hg = vec![T::zero(); thr.len() + 1];
            let mut hh = vec![T::zero(); thr.len() + 1];
            for &i in rows {
                let b = self.binned.bins[j][i] as usize;
                hg[b] += self.grad[i];
                hh[b] += self.hess[i];
            }
            let (mut gl, mut hl) = (T::zero(), T::zero());
            for b in 0..thr.len() {
                gl += hg[b];
                hl += hh[b];
                let (gr, hr) = (g - gl, h - hl);
                if hl < min_h || hr < min_h {
                    continue;
                }
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if gain > T::lit(1e-12) && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, j, b));
                }
            }
        }
        let Some((_, feature, b)) = best else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| (self.binned.bins[feature][i] as usize) <= b);
        let left = self.build(&left_rows, depth + 1);
        let right = self.build(&right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold: self.binned.thresholds[feature][b],
            left,
            right,
        };
        id
    }
}

/// Fits a binary classifier; deterministic given `config.seed`.
pub fn fit_gbdt<T: Scalar>(x: &[Vec<T>], y: &[bool], config: &GbdtConfig) -> Gbdt<T> {
    assert_eq!(x.len(), y.len());
    let d = x.first().map_or(0, |r| r.len());
    let keep = subsample(y, config.max_rows, config.seed);
    let rows: Vec<&[T]> = keep.iter().map(|&i| x[i].as_slice()).collect();
    let labels: Vec<bool> = keep.iter().map(|&i| y[i]).collect();
    let n = rows.len();
    let pos = labels.iter().filter(|&&l| l).count();
    // clamp so that single-class sets still get a finite base margin
    let p0 = ((pos as f64 + 0.5) / (n as f64 + 1.0)).clamp(1e-6, 1.0 - 1e-6);
    let base = T::lit((p0 / (1.0 - p0)).ln());
    let binned = bin_features(&rows, d, config.max_bins.max(2));
    let mut margin = vec![base; n];
    let mut trees = Vec::with_capacity(config.n_trees);
    let all: Vec<usize> = (0..n).collect();
    for _ in 0..config.n_trees {
        let p: Vec<T> = margin.iter().map(|&m| sigmoid(m)).collect();
        let grad: Vec<T> = p
            .iter()
            .zip(&labels)
            .map(|(&p, &l)| if l { p - T::one() } else { p })
            .collect();
        let hess: Vec<T> = p
            .iter()
            .map(|&p| (p * (T::one() - p)).max(T::lit(1e-12)))
            .collect();
        let mut b = Builder {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            config,
            nodes: Vec::new(),
        };
        b.build(&all, 0);
        let tree = Tree { nodes: b.nodes };
        if matches!(tree.nodes[..], [Node::Leaf(v)] if v.abs() < T::lit(1e-12)) {
            break;
        }
        for (m, r) in margin.iter_mut().zip(&rows) {
            *m += tree.predict(r);
        }
        trees.push(tree);
    }
    Gbdt {
        base,
        trees,
        n_features: d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn threshold_data(n: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![(i * 37 % 101) as f64, (i * 13 % 7) as f64])
            .collect();
        let y = x.iter().map(|r| r[0] > 60.0).collect();
        (x, y)
    }

    #[test]
    fn single_threshold_is_learned() {
        let (x, y) = threshold_data(600);
        let m = fit_gbdt(&x, &y, &GbdtConfig::default());
        let (tx, ty) = threshold_data(1000);
        let correct = tx
            .iter()
            .zip(&ty)
            .filter(|(r, &l)| (m.margin(r) > 0.0) == l)
            .count();
        assert!(correct as f64 / 1000.0 >= 0.99);
        assert!(m.trees.iter().all(|t| t.depth() <= 3));
        assert!(m.trees.len() <= 100);
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = threshold_data(9000);
        let cfg = GbdtConfig {
            n_trees: 5,
            ..Default::default()
        };
        assert_eq!(fit_gbdt(&x, &y, &cfg), fit_gbdt(&x, &y, &cfg));
    }

    #[test]
    fn subsample_respects_budget() {
        let labels: Vec<bool> = (0..100).map(|i| i < 3).collect();
        let rows = subsample(&labels, 10, 1);
        assert_eq!(rows.len(), 10);
        assert_eq!(rows.iter().filter(|&&i| labels[i]).count(), 3);
    }
}
