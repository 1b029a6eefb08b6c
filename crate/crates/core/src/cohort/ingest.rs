use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{
    CohortError, Demographics, FeatureSchema, PatientTrajectory, TimestepRecord, BIN_MINUTES,
    FLUID_CHANNEL, MECH_VENT_CHANNEL, SIRS_CHANNEL, SOFA_CHANNEL, VASO_CHANNEL,
};
use crate::quantile::median;

/// One raw observation. `timestamp` is seconds since the Unix epoch (UTC).
#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub line: usize,
    pub patient_id: String,
    pub timestamp: i64,
    pub channel: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemographicsRow {
    pub patient_id: String,
    pub demographics: Demographics,
    pub died: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub rejected: Vec<RejectedRow>,
    /// Demographics rows with no surviving events; these patients are skipped.
    pub patients_without_events: Vec<String>,
}

#[derive(Default)]
struct BinAcc {
    sums: BTreeMap<String, (f64, u32)>,
    fluid: f64,
    vaso: f64,
    mech_vent: Option<bool>,
    sofa: Option<f64>,
    sirs: Option<f64>,
}

fn max_opt(slot: &mut Option<f64>, v: f64) {
    *slot = Some(slot.map_or(v, |cur| cur.max(v)));
}

/// Bins raw events into 4-hour timesteps anchored at each patient's first
/// event, aggregates within bins (mean observations, summed fluids, max
/// vasopressor rate), forward-fills gaps and imputes leading gaps with the
/// cohort median. Patients are returned sorted by id.
pub fn ingest_events(
    events: &[EventRow],
    demographics: &[DemographicsRow],
    schema: &FeatureSchema,
) -> Result<(Vec<PatientTrajectory>, IngestReport), CohortError> {
    if events.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let mut report = IngestReport::default();
    let mut by_patient: BTreeMap<&str, Vec<&EventRow>> = BTreeMap::new();
    for row in events {
        let known = schema.get(&row.channel).is_some() || super::is_reserved_channel(&row.channel);
        if !known {
            report.rejected.push(RejectedRow {
                line: row.line,
                reason: format!("unknown channel {}", row.channel),
            });
            continue;
        }
        if !row.value.is_finite() {
            report.rejected.push(RejectedRow {
                line: row.line,
                reason: "non-finite value".into(),
            });
            continue;
        }
        if (row.channel == FLUID_CHANNEL || row.channel == VASO_CHANNEL) && row.value < 0.0 {
            return Err(CohortError::NegativeDose {
                line: row.line,
                channel: row.channel.clone(),
                value: row.value,
            });
        }
        by_patient
            .entry(row.patient_id.as_str())
            .or_default()
            .push(row);
    }
    if by_patient.is_empty() {
        return Err(CohortError::EmptyCohort);
    }

    let demo: BTreeMap<&str, &DemographicsRow> = demographics
        .iter()
        .map(|d| (d.patient_id.as_str(), d))
        .collect();
    for d in demographics {
        if !by_patient.contains_key(d.patient_id.as_str()) {
            report.patients_without_events.push(d.patient_id.clone());
        }
    }

    // Aggregate per patient into bins.
    let mut binned: Vec<(&str, Vec<BinAcc>)> = Vec::with_capacity(by_patient.len());
    for (pid, mut rows) in by_patient {
        if !demo.contains_key(pid) {
            return Err(CohortError::MissingDemographics(pid.to_string()));
        }
        rows.sort_by_key(|r| (r.timestamp, r.line));
        let t0 = rows[0].timestamp;
        let n_bins = ((rows[rows.len() - 1].timestamp - t0) / (BIN_MINUTES * 60)) as usize + 1;
        let mut bins: Vec<BinAcc> = (0..n_bins).map(|_| BinAcc::default()).collect();
        for r in rows {
            let b = &mut bins[((r.timestamp - t0) / (BIN_MINUTES * 60)) as usize];
            match r.channel.as_str() {
                FLUID_CHANNEL => b.fluid += r.value,
                VASO_CHANNEL => b.vaso = b.vaso.max(r.value),
                MECH_VENT_CHANNEL => {
                    b.mech_vent = Some(b.mech_vent.unwrap_or(false) || r.value > 0.0)
                }
                SOFA_CHANNEL => max_opt(&mut b.sofa, r.value),
                SIRS_CHANNEL => max_opt(&mut b.sirs, r.value),
                name => {
                    let e = b.sums.entry(name.to_string()).or_insert((0.0, 0));
                    e.0 += r.value;
                    e.1 += 1;
                }
            }
        }
        binned.push((pid, bins));
    }

    // Cohort medians over observed bin-level values.
    let mut medians = BTreeMap::new();
    for name in schema.names() {
        let observed: Vec<f64> = binned
            .iter()
            .flat_map(|(_, bins)| bins.iter())
            .filter_map(|b| b.sums.get(name).map(|&(s, c)| s / c as f64))
            .collect();
        let m = median(&observed).ok_or_else(|| CohortError::NoObservations(name.to_string()))?;
        medians.insert(name, m);
    }

    let mut cohort = Vec::with_capacity(binned.len());
    for (pid, bins) in binned {
        let d = demo[pid];
        let mut last: BTreeMap<&str, f64> = BTreeMap::new();
        let (mut last_vent, mut last_sofa, mut last_sirs) = (false, 0.0, 0.0);
        let mut timesteps = Vec::with_capacity(bins.len());
        for (i, b) in bins.into_iter().enumerate() {
            let mut features = BTreeMap::new();
            let mut imputed = BTreeSet::new();
            for name in schema.names() {
                let v = match b.sums.get(name) {
                    Some(&(s, c)) => {
                        let v = s / c as f64;
                        last.insert(name, v);
                        v
                    }
                    None => {
                        imputed.insert(name.to_string());
                        last.get(name).copied().unwrap_or(medians[name])
                    }
                };
                features.insert(name.to_string(), v);
            }
            last_vent = b.mech_vent.unwrap_or(last_vent);
            last_sofa = b.sofa.unwrap_or(last_sofa);
            last_sirs = b.sirs.unwrap_or(last_sirs);
            timesteps.push(TimestepRecord {
                bin_index: i as u32,
                features,
                fluid_dose: b.fluid,
                vaso_dose: b.vaso,
                mech_vent: last_vent,
                sofa: last_sofa.round() as i32,
                sirs: last_sirs.round() as i32,
                imputed: imputed.into_iter().collect(),
            });
        }
        cohort.push(PatientTrajectory {
            patient_id: pid.to_string(),
            demographics: d.demographics.clone(),
            timesteps,
            died: d.died,
        });
    }
    Ok((cohort, report))
}
