//! Discrete patient states: z-scored features clustered by k-means.

mod kmeans;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeansRun};

use crate::cohort::{Demographics, PatientTrajectory, TimestepRecord};
use crate::scalar::Scalar;

pub const DEFAULT_K: usize = 750;
pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_ITERATIONS: usize = 300;
pub const STATE_MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("insufficient data: {distinct} distinct feature vectors for k = {k}")]
    InsufficientData { distinct: usize, k: usize },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("patient {patient_id} bin {bin}: feature {feature} is missing or not finite")]
    NonFinite {
        patient_id: String,
        bin: u32,
        feature: String,
    },
    #[error("every clustering feature is constant")]
    NoVariation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateModel<T> {
    pub schema_version: u32,
    /// Retained features, in centroid column order.
    pub features: Vec<String>,
    pub means: Vec<T>,
    pub stds: Vec<T>,
    pub k: usize,
    /// Row-major `k × features.len()`, standardized space.
    pub centroids: Vec<T>,
    pub seed: u64,
    pub n_restarts: usize,
    pub wcss: T,
    /// Constant features removed before clustering.
    #[serde(default)]
    pub dropped_features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<T> {
    pub runs: Vec<KMeansRun<T>>,
    pub best_run: usize,
    /// Timestep labels of the best run, in cohort order.
    pub labels: Vec<usize>,
}

/// Fits standardization and k-means over every timestep of the cohort.
pub fn fit_states<T: Scalar>(
    cohort: &[PatientTrajectory],
    features: &[String],
    k: usize,
    seed: u64,
    n_restarts: usize,
) -> Result<StateModel<T>, StateError> {
    fit_states_traced(cohort, features, k, seed, n_restarts).map(|(m, _)| m)
}

pub fn fit_states_traced<T: Scalar>(
    cohort: &[PatientTrajectory],
    features: &[String],
    k: usize,
    seed: u64,
    n_restarts: usize,
) -> Result<(StateModel<T>, FitReport<T>), StateError> {
    if k < 2 {
        return Err(StateError::InvalidK(k));
    }
    let d0 = features.len();
    let mut raw: Vec<f64> = Vec::new();
    for p in cohort {
        for (t, r) in p.timesteps.iter().enumerate() {
            for name in features {
                match p.feature_value(t, name) {
                    Some(x) if x.is_finite() => raw.push(x),
                    _ => {
                        return Err(StateError::NonFinite {
                            patient_id: p.patient_id.clone(),
                            bin: r.bin_index,
                            feature: name.clone(),
                        })
                    }
                }
            }
        }
    }
    let n = raw.len().checked_div(d0).unwrap_or(0);

    // population mean / std per feature
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    for j in 0..d0 {
        let col = || (0..n).map(|i| T::lit(raw[i * d0 + j]));
        let nn = T::from_usize_lossy(n.max(1));
        let mean = col().sum::<T>() / nn;
        let var = col().map(|x| (x - mean) * (x - mean)).sum::<T>() / nn;
        if var > T::zero() {
            keep.push(j);
            means.push(mean);
            stds.push(var.sqrt());
        } else {
            dropped.push(features[j].clone());
        }
    }
    if keep.is_empty() && n > 0 {
        return Err(StateError::NoVariation);
    }
    let d = keep.len();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for (c, &j) in keep.iter().enumerate() {
            data.push((T::lit(raw[i * d0 + j]) - means[c]) / stds[c]);
        }
    }

    let distinct = {
        let mut seen = HashSet::new();
        for i in 0..n {
            let key: Vec<u64> = data[i * d..(i + 1) * d]
                .iter()
                .map(|x| x.as_f64().to_bits())
                .collect();
            seen.insert(key);
            if seen.len() >= k {
                break;
            }
        }
        seen.len()
    };
    if distinct < k {
        return Err(StateError::InsufficientData { distinct, k });
    }

    let runs: Vec<KMeansRun<T>> = (0..n_restarts.max(1))
        .map(|r| {
            let mut rng = crate::seeding::stream(seed, r as u64);
            kmeans(&data, d, k, &mut rng, MAX_ITERATIONS)
        })
        .collect();
    let mut best_run = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.wcss < runs[best_run].wcss {
            best_run = i;
        }
    }
    let best = &runs[best_run];
    let model = StateModel {
        schema_version: STATE_MODEL_VERSION,
        features: keep.iter().map(|&j| features[j].clone()).collect(),
        means,
        stds,
        k,
        centroids: best.centroids.clone(),
        seed,
        n_restarts: n_restarts.max(1),
        wcss: best.wcss,
        dropped_features: dropped,
    };
    let labels = best.labels.clone();
    Ok((
        model,
        FitReport {
            runs,
            best_run,
            labels,
        },
    ))
}

impl<T: Scalar> StateModel<T> {
    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn centroid(&self, i: usize) -> &[T] {
        &self.centroids[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<T> {
        raw.iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&x, &m), &s)| (T::lit(x) - m) / s)
            .collect()
    }

    /// Raw-space feature vector located exactly at centroid `i`.
    pub fn centroid_raw(&self, i: usize) -> Vec<f64> {
        self.centroid(i)
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&z, &m), &s)| (z * s + m).as_f64())
            .collect()
    }

    /// Nearest centroid in standardized space; the lowest id wins ties.
    pub fn nearest(&self, z: &[T]) -> usize {
        let d = self.dim();
        let mut best = 0;
        let mut best_d = T::infinity();
        for c in 0..self.k {
            let row = &self.centroids[c * d..(c + 1) * d];
            let dist: T = row.iter().zip(z).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        best
    }

    /// State of a raw feature vector given in `self.features` order.
    pub fn assign_raw(&self, raw: &[f64]) -> usize {
        self.nearest(&self.standardize(raw))
    }

    pub fn assign_state(&self, demographics: &Demographics, record: &TimestepRecord) -> usize {
        let raw: Vec<f64> = self
            .features
            .iter()
            .map(|n| match n.as_str() {
                "age" => demographics.age,
                "weight" => demographics.weight,
                _ => record.features.get(n).copied().unwrap_or(f64::NAN),
            })
            .collect();
        self.assign_raw(&raw)
    }

    pub fn assign_trajectory(&self, p: &PatientTrajectory, t: usize) -> usize {
        self.assign_state(&p.demographics, &p.timesteps[t])
    }

    /// Bit-exact conversion to `f64` for serialization.
    pub fn to_f64(&self) -> StateModel<f64> {
        let cv = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        StateModel {
            schema_version: self.schema_version,
            features: self.features.clone(),
            means: cv(&self.means),
            stds: cv(&self.stds),
            k: self.k,
            centroids: cv(&self.centroids),
            seed: self.seed,
            n_restarts: self.n_restarts,
            wcss: self.wcss.as_f64(),
            dropped_features: self.dropped_features.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Demographics;
    use std::collections::BTreeMap;

    fn cohort(points: &[(f64, f64)]) -> Vec<PatientTrajectory> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| PatientTrajectory {
                patient_id: format!("p{i}"),
                demographics: Demographics {
                    age: 50.0,
                    gender: "F".into(),
                    weight: 70.0,
                    comorbidities: BTreeMap::new(),
                },
                timesteps: vec![TimestepRecord {
                    bin_index: 0,
                    features: [("x".to_string(), x), ("y".to_string(), y)]
                        .into_iter()
                        .collect(),
                    fluid_dose: 0.0,
                    vaso_dose: 0.0,
                    mech_vent: false,
                    sofa: 0,
                    sirs: 0,
                    imputed: vec![],
                }],
                died: false,
            })
            .collect()
    }

    fn feats() -> Vec<String> {
        vec!["x".into(), "y".into(), "age".into()]
    }

    fn two_groups() -> Vec<PatientTrajectory> {
        let mut pts = Vec::new();
        for i in 0..10 {
            let e = (i as f64 - 4.5) * 0.01;
            pts.push((0.0 + e, 0.0 - e));
            pts.push((10.0 + e, 10.0 - e));
        }
        cohort(&pts)
    }

    #[test]
    fn separated_groups_recover_means_and_wcss() {
        let (m, report) = fit_states_traced::<f64>(&two_groups(), &feats(), 2, 7, 3).unwrap();
        assert_eq!(m.dropped_features, vec!["age".to_string()]);
        // standardized: group means at ±5 / std on each axis
        let mut cs: Vec<Vec<f64>> = (0..2).map(|i| m.centroid(i).to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        for (c, sign) in cs.iter().zip([-1.0, 1.0]) {
            let (wx, wy) = (sign * 5.0 / m.stds[0], sign * 5.0 / m.stds[1]);
            assert!(
                (c[0] - wx).abs() < 1e-12 && (c[1] - wy).abs() < 1e-12,
                "{c:?}"
            );
        }
        // analytic within-group sum of squares in standardized units
        let std = m.stds[0];
        let within: f64 = (0..10)
            .map(|i| ((i as f64 - 4.5) * 0.01).powi(2))
            .sum::<f64>()
            * 2.0
            * 2.0
            / (std * std);
        assert!((m.wcss - within).abs() < 1e-12, "{} vs {}", m.wcss, within);
        assert!(report.labels[0] != report.labels[1]);
    }

    #[test]
    fn same_seed_same_model() {
        let a = fit_states::<f64>(&two_groups(), &feats(), 3, 11, 2).unwrap();
        let b = fit_states::<f64>(&two_groups(), &feats(), 3, 11, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_distinct_points() {
        let c = cohort(&[(1.0, 1.0), (1.0, 1.0), (2.0, 2.0)]);
        assert!(matches!(
            fit_states::<f64>(&c, &feats(), 3, 0, 1),
            Err(StateError::InsufficientData { distinct: 2, k: 3 })
        ));
    }

    #[test]
    fn non_finite_is_rejected() {
        let c = cohort(&[(1.0, f64::NAN), (2.0, 2.0)]);
        assert!(matches!(
            fit_states::<f64>(&c, &feats(), 2, 0, 1),
            Err(StateError::NonFinite { .. })
        ));
    }

    #[test]
    fn equidistant_record_goes_to_lower_id() {
        let m = StateModel::<f64> {
            schema_version: 1,
            features: vec!["x".into()],
            means: vec![0.0],
            stds: vec![1.0],
            k: 5,
            centroids: vec![-10.0, -1.0, 20.0, 30.0, 1.0],
            seed: 0,
            n_restarts: 1,
            wcss: 0.0,
            dropped_features: vec![],
        };
        assert_eq!(m.assign_raw(&[0.0]), 1);
        assert_eq!(m.assign_raw(&[30.0]), 3);
        for i in 0..5 {
            assert_eq!(m.assign_raw(&m.centroid_raw(i)), i);
        }
    }

    #[test]
    fn standardized_training_features_are_unit() {
        let c = two_groups();
        let m = fit_states::<f64>(&c, &feats(), 2, 1, 1).unwrap();
        let zs: Vec<Vec<f64>> = c
            .iter()
            .map(|p| m.standardize(&p.feature_vector(0, &m.features)))
            .collect();
        for j in 0..m.dim() {
            let n = zs.len() as f64;
            let mean: f64 = zs.iter().map(|z| z[j]).sum::<f64>() / n;
            let var: f64 = zs.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
