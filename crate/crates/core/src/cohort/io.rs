//! CSV and JSON-lines encodings of events, demographics and trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use chrono::{DateTime, NaiveDateTime};

use super::ingest::{DemographicsRow, EventRow};
use super::{
    CohortError, Demographics, FeatureSchema, PatientTrajectory, BIN_MINUTES, FLUID_CHANNEL,
    MECH_VENT_CHANNEL, SIRS_CHANNEL, SOFA_CHANNEL, VASO_CHANNEL,
};

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
    .map(|dt| dt.and_utc().timestamp())
}

fn format_timestamp(secs: i64) -> String {
    DateTime::from_timestamp(secs, 0)
        .expect("timestamp in range")
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "y" => Some(true),
        "false" | "0" | "no" | "n" | "" => Some(false),
        _ => None,
    }
}

fn header_check(headers: &csv::StringRecord, want: &[&str]) -> Result<(), CohortError> {
    let got: Vec<&str> = headers.iter().take(want.len()).collect();
    if got != want {
        return Err(CohortError::Parse {
            line: 1,
            message: format!(
                "expected header starting with {}, got {}",
                want.join(","),
                got.join(",")
            ),
        });
    }
    Ok(())
}

/// Reads `patient_id,timestamp,channel,value`. Line numbers are 1-based and
/// count the header.
pub fn read_events_csv<R: Read>(reader: R) -> Result<Vec<EventRow>, CohortError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    header_check(
        rdr.headers()?,
        &["patient_id", "timestamp", "channel", "value"],
    )?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let timestamp = parse_timestamp(field(1)).ok_or_else(|| CohortError::Parse {
            line,
            message: format!("unparseable timestamp {:?}", field(1)),
        })?;
        let value: f64 = field(3).parse().map_err(|_| CohortError::Parse {
            line,
            message: format!("unparseable value {:?}", field(3)),
        })?;
        out.push(EventRow {
            line,
            patient_id: field(0).to_string(),
            timestamp,
            channel: field(2).to_string(),
            value,
        });
    }
    Ok(out)
}

/// Reads `patient_id,age,gender,weight,died,<comorbidity flags...>`.
pub fn read_demographics_csv<R: Read>(reader: R) -> Result<Vec<DemographicsRow>, CohortError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    header_check(&headers, &["patient_id", "age", "gender", "weight", "died"])?;
    let flags: Vec<String> = headers.iter().skip(5).map(str::to_string).collect();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let num = |k: usize, what: &str| -> Result<f64, CohortError> {
            field(k).parse().map_err(|_| CohortError::Parse {
                line,
                message: format!("unparseable {what} {:?}", field(k)),
            })
        };
        let flag = |k: usize, what: &str| -> Result<bool, CohortError> {
            parse_bool(field(k)).ok_or_else(|| CohortError::Parse {
                line,
                message: format!("unparseable {what} {:?}", field(k)),
            })
        };
        let mut comorbidities = BTreeMap::new();
        for (j, name) in flags.iter().enumerate() {
            comorbidities.insert(name.clone(), flag(5 + j, name)?);
        }
        out.push(DemographicsRow {
            patient_id: field(0).to_string(),
            demographics: Demographics {
                age: num(1, "age")?,
                gender: field(2).to_string(),
                weight: num(3, "weight")?,
                comorbidities,
            },
            died: flag(4, "died")?,
        });
    }
    Ok(out)
}

/// Flattens trajectories back into raw events: one row per observed feature,
/// nonzero dose and score per bin. Bin `b` events are stamped
/// `base + b·4h + j` minutes where `j` is the channel position, so
/// re-ingesting reproduces the same bins.
pub fn to_event_rows(
    cohort: &[PatientTrajectory],
    schema: &FeatureSchema,
    base: i64,
) -> Vec<EventRow> {
    let mut out = Vec::new();
    for p in cohort {
        for r in &p.timesteps {
            let t0 = base + r.bin_index as i64 * BIN_MINUTES * 60;
            let mut push = |j: i64, channel: &str, value: f64| {
                out.push(EventRow {
                    line: out.len() + 2,
                    patient_id: p.patient_id.clone(),
                    timestamp: t0 + j * 60,
                    channel: channel.to_string(),
                    value,
                });
            };
            push(0, SOFA_CHANNEL, r.sofa as f64);
            push(1, SIRS_CHANNEL, r.sirs as f64);
            push(2, MECH_VENT_CHANNEL, if r.mech_vent { 1.0 } else { 0.0 });
            if r.fluid_dose > 0.0 {
                push(3, FLUID_CHANNEL, r.fluid_dose);
            }
            if r.vaso_dose > 0.0 {
                push(4, VASO_CHANNEL, r.vaso_dose);
            }
            for (j, name) in schema.names().enumerate() {
                if r.imputed.iter().any(|n| n == name) {
                    continue;
                }
                if let Some(&v) = r.features.get(name) {
                    push(5 + j as i64, name, v);
                }
            }
        }
    }
    out
}

pub fn write_events_csv<W: Write>(rows: &[EventRow], writer: W) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["patient_id", "timestamp", "channel", "value"])?;
    for r in rows {
        w.write_record([
            r.patient_id.as_str(),
            &format_timestamp(r.timestamp),
            &r.channel,
            &r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_demographics_csv<W: Write>(
    cohort: &[PatientTrajectory],
    writer: W,
) -> Result<(), CohortError> {
    let flags: BTreeSet<&str> = cohort
        .iter()
        .flat_map(|p| p.demographics.comorbidities.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id", "age", "gender", "weight", "died"];
    header.extend(flags.iter().copied());
    w.write_record(&header)?;
    for p in cohort {
        let d = &p.demographics;
        let mut rec = vec![
            p.patient_id.clone(),
            d.age.to_string(),
            d.gender.clone(),
            d.weight.to_string(),
            p.died.to_string(),
        ];
        rec.extend(flags.iter().map(|f| {
            d.comorbidities
                .get(*f)
                .copied()
                .unwrap_or(false)
                .to_string()
        }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One trajectory per line, keys in declaration order.
pub fn write_jsonl<W: Write>(
    cohort: &[PatientTrajectory],
    mut writer: W,
) -> Result<(), CohortError> {
    for p in cohort {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<PatientTrajectory>, CohortError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CohortError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps_accept_common_iso_forms() {
        let a = parse_timestamp("2100-01-01T04:00:00Z").unwrap();
        let b = parse_timestamp("2100-01-01T04:00:00").unwrap();
        let c = parse_timestamp("2100-01-01 04:00:00").unwrap();
        let d = parse_timestamp("2100-01-01T06:00:00+02:00").unwrap();
        assert!(a == b && b == c && c == d);
        assert_eq!(format_timestamp(a), "2100-01-01T04:00:00Z");
        assert!(parse_timestamp("yesterday").is_none());
    }

    #[test]
    fn demographics_round_trip() {
        let csv = "patient_id,age,gender,weight,died,diabetes\np1,70,F,65.5,true,1\n";
        let rows = read_demographics_csv(csv.as_bytes()).unwrap();
        assert_eq!(rows[0].demographics.weight, 65.5);
        assert!(rows[0].died);
        assert!(rows[0].demographics.comorbidities["diabetes"]);
    }

    #[test]
    fn bad_timestamp_names_line() {
        let csv =
            "patient_id,timestamp,channel,value\np1,2100-01-01T00:00:00Z,hr,80\np1,soon,hr,80\n";
        match read_events_csv(csv.as_bytes()) {
            Err(CohortError::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
