//! Patient trajectories: the data model, 4-hour binning of raw events,
//! cohort validation and abnormal-value flagging.

mod ingest;
mod io;
mod validate;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_events, DemographicsRow, EventRow, IngestReport, RejectedRow};
pub use io::{
    read_demographics_csv, read_events_csv, read_jsonl, to_event_rows, write_demographics_csv,
    write_events_csv, write_jsonl,
};
pub use validate::{
    flag_abnormal, validate_cohort, AbnormalFlag, AbnormalFlags, CohortSummary, Violation,
};

/// Width of one timestep bin.
pub const BIN_MINUTES: i64 = 240;

/// Channel carrying IV fluid volume events (mL, summed per bin).
pub const FLUID_CHANNEL: &str = "fluid_ml";
/// Channel carrying vasopressor rate events (mcg/kg/min, max per bin).
pub const VASO_CHANNEL: &str = "vaso_rate";
pub const MECH_VENT_CHANNEL: &str = "mech_vent";
pub const SOFA_CHANNEL: &str = "sofa";
pub const SIRS_CHANNEL: &str = "sirs";

/// Demographic columns that enter the state features alongside the schema's
/// clinical observations.
pub const DEMOGRAPHIC_FEATURES: [&str; 2] = ["age", "weight"];

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("empty cohort")]
    EmptyCohort,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: negative dose {value} on channel {channel}")]
    NegativeDose {
        line: usize,
        channel: String,
        value: f64,
    },
    #[error("patient {0} has events but no demographics row")]
    MissingDemographics(String),
    #[error("feature {0} has no observations anywhere in the cohort")]
    NoObservations(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayGroup {
    Demographics,
    Vitals,
    Labs,
    Ventilation,
    Fluids,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    /// Lower bound of the normal reference range.
    pub lo: f64,
    /// Upper bound of the normal reference range.
    pub hi: f64,
    pub group: DisplayGroup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    pub features: Vec<FeatureSpec>,
    /// Comorbidity flag columns expected in the demographics file.
    #[serde(default)]
    pub comorbidities: Vec<String>,
}

fn schema_v1() -> u32 {
    1
}

impl FeatureSchema {
    pub fn new(
        features: Vec<FeatureSpec>,
        comorbidities: Vec<String>,
    ) -> Result<Self, CohortError> {
        let schema = Self {
            schema_version: 1,
            features,
            comorbidities,
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn from_json(s: &str) -> Result<Self, CohortError> {
        let schema: Self = serde_json::from_str(s)?;
        schema.check()?;
        Ok(schema)
    }

    fn check(&self) -> Result<(), CohortError> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(CohortError::Schema(format!("duplicate feature {}", f.name)));
            }
            if is_reserved_channel(&f.name) || DEMOGRAPHIC_FEATURES.contains(&f.name.as_str()) {
                return Err(CohortError::Schema(format!(
                    "feature name {} is reserved",
                    f.name
                )));
            }
            if !(f.lo < f.hi) {
                return Err(CohortError::Schema(format!(
                    "feature {}: reference range lo {} must be < hi {}",
                    f.name, f.lo, f.hi
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    /// Features the state abstraction clusters on: every vitals, labs and
    /// ventilation feature in schema order, then age and weight.
    pub fn clustering_features(&self) -> Vec<String> {
        self.features
            .iter()
            .filter(|f| {
                matches!(
                    f.group,
                    DisplayGroup::Vitals | DisplayGroup::Labs | DisplayGroup::Ventilation
                )
            })
            .map(|f| f.name.clone())
            .chain(DEMOGRAPHIC_FEATURES.iter().map(|s| s.to_string()))
            .collect()
    }
}

pub fn is_reserved_channel(name: &str) -> bool {
    matches!(
        name,
        FLUID_CHANNEL | VASO_CHANNEL | MECH_VENT_CHANNEL | SOFA_CHANNEL | SIRS_CHANNEL
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    /// Years.
    pub age: f64,
    pub gender: String,
    /// Kilograms.
    pub weight: f64,
    #[serde(default)]
    pub comorbidities: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepRecord {
    pub bin_index: u32,
    pub features: BTreeMap<String, f64>,
    /// mL administered during the bin.
    pub fluid_dose: f64,
    /// Maximum norepinephrine-equivalent rate during the bin (mcg/kg/min).
    pub vaso_dose: f64,
    pub mech_vent: bool,
    pub sofa: i32,
    pub sirs: i32,
    /// Features whose value was filled in rather than observed in this bin.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub imputed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    pub patient_id: String,
    pub demographics: Demographics,
    pub timesteps: Vec<TimestepRecord>,
    pub died: bool,
}

impl PatientTrajectory {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Value of a named feature at timestep position `t`; `age` and `weight`
    /// resolve to demographics.
    pub fn feature_value(&self, t: usize, name: &str) -> Option<f64> {
        match name {
            "age" => Some(self.demographics.age),
            "weight" => Some(self.demographics.weight),
            _ => self.timesteps.get(t)?.features.get(name).copied(),
        }
    }

    /// Feature vector at position `t` in the given order; missing names yield NaN.
    pub fn feature_vector(&self, t: usize, order: &[String]) -> Vec<f64> {
        order
            .iter()
            .map(|n| self.feature_value(t, n).unwrap_or(f64::NAN))
            .collect()
    }

    pub fn position_of_bin(&self, bin: u32) -> Option<usize> {
        self.timesteps.iter().position(|r| r.bin_index == bin)
    }

    pub fn max_sofa(&self) -> i32 {
        self.timesteps.iter().map(|r| r.sofa).max().unwrap_or(0)
    }

    pub fn max_sirs(&self) -> i32 {
        self.timesteps.iter().map(|r| r.sirs).max().unwrap_or(0)
    }
}
