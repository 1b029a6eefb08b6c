//! Lloyd's algorithm with k-means++ seeding over row-major data.

use rand::Rng;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun<T> {
    pub centroids: Vec<T>,
    pub labels: Vec<usize>,
    pub wcss: T,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub trace: Vec<T>,
}

#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn plus_plus_init<T: Scalar, R: Rng>(data: &[T], d: usize, k: usize, rng: &mut R) -> Vec<T> {
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_d: Vec<T> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = min_d.iter().map(|x| x.as_f64()).sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, x) in min_d.iter().enumerate() {
                acc += x.as_f64();
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for i in 0..n {
            let dd = sq_dist(row(i), &c);
            if dd < min_d[i] {
                min_d[i] = dd;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Assigns each point to its nearest centroid (lowest index on ties);
/// returns the WCSS and per-point squared distances.
fn assign<T: Scalar>(
    data: &[T],
    d: usize,
    centroids: &[T],
    labels: &mut [usize],
    dists: &mut [T],
) -> T {
    let k = centroids.len() / d;
    let mut wcss = T::zero();
    for (i, x) in data.chunks_exact(d).enumerate() {
        let mut best = 0;
        let mut best_d = T::infinity();
        for c in 0..k {
            let dd = sq_dist(x, &centroids[c * d..(c + 1) * d]);
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
        wcss += best_d;
    }
    wcss
}

pub fn kmeans<T: Scalar, R: Rng>(
    data: &[T],
    d: usize,
    k: usize,
    rng: &mut R,
    max_iter: usize,
) -> KMeansRun<T> {
    let n = data.len() / d;
    assert!(n >= k && k >= 1, "kmeans needs at least k points");
    let mut centroids = plus_plus_init(data, d, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut dists = vec![T::zero(); n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut wcss;
    loop {
        wcss = assign(data, d, &centroids, &mut next, &mut dists);
        trace.push(wcss);
        let changed = next != labels;
        std::mem::swap(&mut labels, &mut next);
        if !changed || iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![T::zero(); k * d];
        let mut counts = vec![0usize; k];
        for (i, x) in data.chunks_exact(d).enumerate() {
            let c = labels[i];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::one() / T::from_usize_lossy(counts[c]);
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] * inv;
                }
            }
        }
        // reseed empty clusters at the points farthest from their centroids
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dists[b].partial_cmp(&dists[a]).unwrap().then(a.cmp(&b)));
            for (c, &p) in empty.iter().zip(&order) {
                centroids[c * d..(c + 1) * d].copy_from_slice(&data[p * d..(p + 1) * d]);
            }
        }
    }
    KMeansRun {
        centroids,
        labels,
        wcss,
        iterations,
        trace,
    }
}
