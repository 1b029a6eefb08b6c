//! Regression with cluster-robust standard errors and multiple-testing
//! adjustment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::linalg::{collinear_columns, Matrix};
use crate::scalar::Scalar;

pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
/// Linear predictor magnitude treated as a fitted probability of exactly 0 or 1.
const SEPARATION_ETA: f64 = 30.0;
pub const SMALL_SAMPLE_CORRECTION: &str = "G/(G-1) * (N-1)/(N-K)";

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 condition levels, got {0}")]
    TooFewLevels(usize),
    #[error("need at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("design matrix is rank deficient; collinear columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("input lengths differ: {0}")]
    Length(String),
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
    #[error("outcome is constant")]
    ConstantOutcome,
    #[error("perfect separation: {0}")]
    Separation(String),
    #[error("IRLS did not converge in {} iterations; max coefficient change per iteration: {trace:?}", trace.len())]
    NoConvergence { trace: Vec<f64> },
}

/// Intercept, one dummy per non-reference level (level 0 is the reference)
/// and any extra columns.
#[derive(Debug, Clone)]
pub struct Design<T> {
    pub x: Matrix<T>,
    pub names: Vec<String>,
    /// Columns of the level dummies.
    pub condition_columns: Vec<usize>,
}

pub fn design_matrix<T: Scalar>(
    levels: &[usize],
    level_names: &[String],
    covariates: &[(String, Vec<T>)],
) -> Result<Design<T>, StatsError> {
    let n = levels.len();
    let l = level_names.len();
    if l < 2 {
        return Err(StatsError::TooFewLevels(l));
    }
    if let Some(&bad) = levels.iter().find(|&&v| v >= l) {
        return Err(StatsError::Length(format!(
            "level index {bad} with only {l} levels"
        )));
    }
    if let Some((name, _)) = covariates.iter().find(|(_, c)| c.len() != n) {
        return Err(StatsError::Length(format!(
            "covariate {name} length differs from outcome"
        )));
    }
    let k = l + covariates.len();
    let mut x = Matrix::zeros(n, k);
    for (i, &lv) in levels.iter().enumerate() {
        x[(i, 0)] = T::one();
        if lv > 0 {
            x[(i, lv)] = T::one();
        }
        for (c, (_, col)) in covariates.iter().enumerate() {
            x[(i, l + c)] = col[i];
        }
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(level_names[1..].iter().cloned());
    names.extend(covariates.iter().map(|(n, _)| n.clone()));
    Ok(Design {
        x,
        names,
        condition_columns: (1..l).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit<T> {
    pub names: Vec<String>,
    pub coef: Vec<T>,
    pub se: Vec<T>,
    /// Cluster-robust covariance, row-major.
    pub cov: Vec<T>,
    pub n: usize,
    pub n_clusters: usize,
    pub small_sample_factor: T,
    pub correction: String,
    /// Wald F for all condition coefficients jointly; absent when their
    /// covariance is singular (e.g. a constant outcome).
    pub f_stat: Option<T>,
    pub f_df: (usize, usize),
    pub f_p_value: Option<T>,
    pub iterations: usize,
}

impl<T: Scalar> RegressionFit<T> {
    fn cov_at(&self, i: usize, j: usize) -> T {
        self.cov[i * self.coef.len() + j]
    }

    /// Difference of two condition effects (index 0 is the reference level)
    /// with its robust SE and two-sided p from t with `G − 1` df.
    pub fn contrast(&self, condition_columns: &[usize], a: usize, b: usize) -> (T, T, T) {
        let col = |lv: usize| {
            if lv == 0 {
                None
            } else {
                Some(condition_columns[lv - 1])
            }
        };
        let val = |c: Option<usize>| c.map_or(T::zero(), |c| self.coef[c]);
        let (ca, cb) = (col(a), col(b));
        let diff = val(cb) - val(ca);
        let mut var = T::zero();
        for (ci, si) in [(cb, T::one()), (ca, -T::one())] {
            for (cj, sj) in [(cb, T::one()), (ca, -T::one())] {
                if let (Some(i), Some(j)) = (ci, cj) {
                    var += si * sj * self.cov_at(i, j);
                }
            }
        }
        let se = var.max(T::zero()).sqrt();
        let p = two_sided_t(diff, se, self.n_clusters - 1);
        (diff, se, p)
    }
}

fn two_sided_t<T: Scalar>(est: T, se: T, df: usize) -> T {
    if se <= T::zero() {
        return T::lit(if est == T::zero() { 1.0 } else { 0.0 });
    }
    let t = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    T::lit(2.0 * t.sf((est / se).as_f64().abs()))
}

fn cluster_index<K: Ord + Clone>(ids: &[K]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let idx = ids
        .iter()
        .map(|k| {
            let next = map.len();
            *map.entry(k.clone()).or_insert(next)
        })
        .collect();
    (idx, map.len())
}

/// `c · B⁻¹ (Σ_g s_g s_gᵀ) B⁻¹` where `s_g` sums the rows' score
/// contributions `x_i · u_i` within cluster `g`.
fn sandwich<T: Scalar>(
    bread_inv: &Matrix<T>,
    x: &Matrix<T>,
    u: &[T],
    cluster: &[usize],
    g: usize,
    factor: T,
) -> Matrix<T> {
    let k = x.cols();
    let mut scores = Matrix::zeros(g, k);
    for i in 0..x.rows() {
        for j in 0..k {
            scores[(cluster[i], j)] += x[(i, j)] * u[i];
        }
    }
    let meat = scores.gram(None);
    let mut v = bread_inv.matmul(&meat).matmul(bread_inv);
    for i in 0..k {
        for j in 0..k {
            v[(i, j)] *= factor;
        }
    }
    v
}

fn wald_f<T: Scalar>(
    coef: &[T],
    cov: &Matrix<T>,
    cols: &[usize],
    df2: usize,
) -> (Option<T>, Option<T>) {
    let q = cols.len();
    let mut sub = Matrix::zeros(q, q);
    for (a, &i) in cols.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            sub[(a, b)] = cov[(i, j)];
        }
    }
    let Ok(inv) = sub.inverse() else {
        return (None, None);
    };
    let beta: Vec<T> = cols.iter().map(|&c| coef[c]).collect();
    let ib = inv.matvec(&beta);
    let f = beta.iter().zip(&ib).map(|(&a, &b)| a * b).sum::<T>() / T::from_usize_lossy(q);
    if !f.is_finite() || f < T::zero() {
        return (None, None);
    }
    let dist = FisherSnedecor::new(q as f64, df2 as f64).expect("positive df");
    (Some(f), Some(T::lit(dist.sf(f.as_f64()))))
}

fn check_design<T: Scalar>(
    d: &Design<T>,
    n_obs: usize,
    n_clusters: usize,
) -> Result<(), StatsError> {
    if d.x.rows() != n_obs {
        return Err(StatsError::Length("design rows differ from outcome".into()));
    }
    if n_clusters < 2 {
        return Err(StatsError::TooFewClusters(n_clusters));
    }
    let bad = collinear_columns(&d.x);
    if !bad.is_empty() || d.x.rows() <= d.x.cols() {
        let names = if bad.is_empty() {
            d.names.clone()
        } else {
            bad.iter().map(|&c| d.names[c].clone()).collect()
        };
        return Err(StatsError::RankDeficient(names));
    }
    Ok(())
}

/// OLS with respondent-clustered sandwich covariance.
pub fn ols_cluster<T: Scalar, K: Ord + Clone>(
    y: &[T],
    design: &Design<T>,
    clusters: &[K],
) -> Result<RegressionFit<T>, StatsError> {
    if clusters.len() != y.len() {
        return Err(StatsError::Length("cluster ids differ from outcome".into()));
    }
    let (cl, g) = cluster_index(clusters);
    check_design(design, y.len(), g)?;
    let x = &design.x;
    let (n, k) = (x.rows(), x.cols());
    let bread_inv = x
        .gram(None)
        .inverse()
        .map_err(|_| StatsError::RankDeficient(design.names.clone()))?;
    let coef = bread_inv.matvec(&x.t_matvec(y));
    let fitted = x.matvec(&coef);
    let resid: Vec<T> = y.iter().zip(&fitted).map(|(&a, &b)| a - b).collect();
    let factor = finite_cluster_factor::<T>(n, k, g);
    let cov = sandwich(&bread_inv, x, &resid, &cl, g, factor);
    finish(design, coef, cov, n, g, factor, 1)
}

fn finite_cluster_factor<T: Scalar>(n: usize, k: usize, g: usize) -> T {
    let f = |v: usize| T::from_usize_lossy(v);
    f(g) / f(g - 1) * (f(n - 1) / f(n - k))
}

fn finish<T: Scalar>(
    design: &Design<T>,
    coef: Vec<T>,
    cov: Matrix<T>,
    n: usize,
    g: usize,
    factor: T,
    iterations: usize,
) -> Result<RegressionFit<T>, StatsError> {
    let k = coef.len();
    let se = (0..k).map(|i| cov[(i, i)].max(T::zero()).sqrt()).collect();
    let (f_stat, f_p_value) = wald_f(&coef, &cov, &design.condition_columns, g - 1);
    Ok(RegressionFit {
        names: design.names.clone(),
        coef,
        se,
        cov: cov.as_slice().to_vec(),
        n,
        n_clusters: g,
        small_sample_factor: factor,
        correction: SMALL_SAMPLE_CORRECTION.into(),
        f_stat,
        f_df: (design.condition_columns.len(), g - 1),
        f_p_value,
        iterations,
    })
}

fn sigmoid<T: Scalar>(eta: T) -> T {
    T::one() / (T::one() + (-eta).exp())
}

/// Logistic regression by IRLS with cluster-robust SEs on the score
/// contributions.
pub fn logit_cluster<T: Scalar, K: Ord + Clone>(
    y: &[bool],
    design: &Design<T>,
    clusters: &[K],
) -> Result<RegressionFit<T>, StatsError> {
    if clusters.len() != y.len() {
        return Err(StatsError::Length("cluster ids differ from outcome".into()));
    }
    let (cl, g) = cluster_index(clusters);
    check_design(design, y.len(), g)?;
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(StatsError::ConstantOutcome);
    }
    let x = &design.x;
    let (n, k) = (x.rows(), x.cols());
    // a 0/1 column whose rows all share one outcome can be pushed to ±∞
    for j in 1..k {
        let rows: Vec<usize> = (0..n).filter(|&i| x[(i, j)] != T::zero()).collect();
        let is_indicator = (0..n).all(|i| x[(i, j)] == T::zero() || x[(i, j)] == T::one());
        if is_indicator && !rows.is_empty() && rows.iter().all(|&i| y[i] == y[rows[0]]) {
            return Err(StatsError::Separation(format!(
                "every observation with {} = 1 has outcome {}",
                design.names[j], y[rows[0]] as u8
            )));
        }
    }
    let yt: Vec<T> = y
        .iter()
        .map(|&v| if v { T::one() } else { T::zero() })
        .collect();
    let mut beta = vec![T::zero(); k];
    let mut trace = Vec::new();
    for it in 1..=IRLS_MAX_ITER {
        let eta = x.matvec(&beta);
        if let Some(i) = eta.iter().position(|e| e.abs().as_f64() > SEPARATION_ETA) {
            return Err(StatsError::Separation(format!(
                "fitted probability of row {i} reached 0 or 1"
            )));
        }
        let p: Vec<T> = eta.iter().map(|&e| sigmoid(e)).collect();
        let w: Vec<T> = p.iter().map(|&p| p * (T::one() - p)).collect();
        let resid: Vec<T> = yt.iter().zip(&p).map(|(&a, &b)| a - b).collect();
        let h = x.gram(Some(&w));
        let step = crate::linalg::solve(h, &x.t_matvec(&resid))
            .map_err(|_| StatsError::Separation("information matrix became singular".into()))?;
        let change = step.iter().fold(T::zero(), |m, s| m.max(s.abs()));
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += *s;
        }
        trace.push(change.as_f64());
        if change < T::lit(IRLS_TOLERANCE) {
            let eta = x.matvec(&beta);
            let p: Vec<T> = eta.iter().map(|&e| sigmoid(e)).collect();
            let w: Vec<T> = p.iter().map(|&p| p * (T::one() - p)).collect();
            let u: Vec<T> = yt.iter().zip(&p).map(|(&a, &b)| a - b).collect();
            let bread_inv = x
                .gram(Some(&w))
                .inverse()
                .map_err(|_| StatsError::Separation("singular information".into()))?;
            let factor = finite_cluster_factor::<T>(n, k, g);
            let cov = sandwich(&bread_inv, x, &u, &cl, g, factor);
            return finish(design, beta, cov, n, g, factor, it);
        }
    }
    Err(StatsError::NoConvergence { trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmResult {
    pub reject: bool,
    pub adjusted_p: f64,
}

/// Step-down Holm adjustment; results are in input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<HolmResult>, StatsError> {
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidPValue(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut out = vec![
        HolmResult {
            reject: false,
            adjusted_p: 1.0
        };
        m
    ];
    let mut running = 0.0f64;
    let mut still_rejecting = true;
    for (rank, &i) in order.iter().enumerate() {
        let scale = (m - rank) as f64;
        running = running.max((scale * p_values[i]).min(1.0));
        still_rejecting &= p_values[i] <= alpha / scale;
        out[i] = HolmResult {
            reject: still_rejecting,
            adjusted_p: running,
        };
    }
    Ok(out)
}
