use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{FeatureSchema, PatientTrajectory, TimestepRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin: Option<u32>,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub timesteps: usize,
    pub deaths: usize,
    /// Fraction of timesteps in which each feature was imputed rather than observed.
    pub missingness: BTreeMap<String, f64>,
    pub violations: Vec<Violation>,
}

impl CohortSummary {
    /// Training refuses cohorts with any violation.
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_cohort(cohort: &[PatientTrajectory]) -> CohortSummary {
    let mut violations = Vec::new();
    let mut v = |pid: Option<&str>, bin: Option<u32>, rule: String| {
        violations.push(Violation {
            patient_id: pid.map(str::to_string),
            bin,
            rule,
        })
    };
    if cohort.is_empty() {
        v(None, None, "cohort empty".into());
    }
    let mut seen = HashSet::new();
    let mut imputed: BTreeMap<String, usize> = BTreeMap::new();
    let mut timesteps = 0;
    for p in cohort {
        let pid = Some(p.patient_id.as_str());
        if !seen.insert(p.patient_id.as_str()) {
            v(pid, None, "duplicate patient_id".into());
        }
        if p.timesteps.is_empty() {
            v(pid, None, "trajectory has no timesteps".into());
        }
        if !(p.demographics.weight > 0.0) {
            v(
                pid,
                None,
                format!("weight {} must be > 0", p.demographics.weight),
            );
        }
        if !(p.demographics.age >= 0.0) {
            v(
                pid,
                None,
                format!("age {} must be >= 0", p.demographics.age),
            );
        }
        for (i, r) in p.timesteps.iter().enumerate() {
            timesteps += 1;
            let bin = Some(r.bin_index);
            if r.bin_index as usize != i {
                v(
                    pid,
                    bin,
                    format!(
                        "bin index {} at position {} is not consecutive from 0",
                        r.bin_index, i
                    ),
                );
            }
            if !(r.fluid_dose >= 0.0) {
                v(
                    pid,
                    bin,
                    format!("fluid_dose {} must be >= 0", r.fluid_dose),
                );
            }
            if !(r.vaso_dose >= 0.0) {
                v(pid, bin, format!("vaso_dose {} must be >= 0", r.vaso_dose));
            }
            if !(0..=24).contains(&r.sofa) {
                v(pid, bin, format!("sofa {} outside [0, 24]", r.sofa));
            }
            if !(0..=4).contains(&r.sirs) {
                v(pid, bin, format!("sirs {} outside [0, 4]", r.sirs));
            }
            for (name, x) in &r.features {
                imputed.entry(name.clone()).or_insert(0);
                if !x.is_finite() {
                    v(pid, bin, format!("feature {name} is not finite"));
                }
            }
            for name in &r.imputed {
                *imputed.entry(name.clone()).or_insert(0) += 1;
            }
        }
    }
    let missingness = imputed
        .into_iter()
        .map(|(k, n)| {
            (
                k,
                if timesteps == 0 {
                    0.0
                } else {
                    n as f64 / timesteps as f64
                },
            )
        })
        .collect();
    CohortSummary {
        patients: cohort.len(),
        timesteps,
        deaths: cohort.iter().filter(|p| p.died).count(),
        missingness,
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbnormalFlag {
    Below,
    Normal,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbnormalFlags {
    pub flags: BTreeMap<String, AbnormalFlag>,
    /// Features present on the record but absent from the schema (labelled normal).
    pub unknown_features: usize,
}

/// Labels each feature against its reference range; values equal to a bound
/// are normal.
pub fn flag_abnormal(record: &TimestepRecord, schema: &FeatureSchema) -> AbnormalFlags {
    let mut unknown_features = 0;
    let flags = record
        .features
        .iter()
        .map(|(name, &x)| {
            let flag = match schema.get(name) {
                None => {
                    unknown_features += 1;
                    AbnormalFlag::Normal
                }
                Some(spec) if x < spec.lo => AbnormalFlag::Below,
                Some(spec) if x > spec.hi => AbnormalFlag::Above,
                Some(_) => AbnormalFlag::Normal,
            };
            (name.clone(), flag)
        })
        .collect();
    AbnormalFlags {
        flags,
        unknown_features,
    }
}
