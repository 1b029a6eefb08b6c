//! Cohort directories: `schema.json` plus either raw `events.csv` and
//! `demographics.csv`, or already-binned `cohort.jsonl`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use sepsis_core::cohort::{
    ingest_events, read_demographics_csv, read_events_csv, read_jsonl, to_event_rows,
    write_demographics_csv, write_events_csv, write_jsonl, CohortError, FeatureSchema,
    IngestReport, PatientTrajectory,
};

use crate::config::sha256_hex;

pub const SCHEMA_FILE: &str = "schema.json";
pub const EVENTS_FILE: &str = "events.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const TRAJECTORIES_FILE: &str = "cohort.jsonl";

/// Fixed origin for exported event timestamps (2024-01-01T00:00:00Z).
pub const EXPORT_EPOCH: i64 = 1_704_067_200;

#[derive(Debug, thiserror::Error)]
#[error("{path}: {source}")]
pub struct DatasetError {
    pub path: String,
    #[source]
    pub source: CohortError,
}

fn at(path: &Path) -> impl Fn(CohortError) -> DatasetError + '_ {
    move |source| DatasetError {
        path: path.display().to_string(),
        source,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, DatasetError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| at(path)(e.into()))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub cohort: Vec<PatientTrajectory>,
    /// Present when the cohort was ingested from raw events.
    pub ingest: Option<IngestReport>,
}

impl Dataset {
    /// Loads a cohort directory, or a `.jsonl` file with `schema.json` beside it.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let (dir, jsonl): (PathBuf, Option<PathBuf>) = if path.is_file() {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                Some(path.to_path_buf()),
            )
        } else {
            (path.to_path_buf(), None)
        };
        let schema_path = dir.join(SCHEMA_FILE);
        let text = std::fs::read_to_string(&schema_path).map_err(|e| at(&schema_path)(e.into()))?;
        let schema = FeatureSchema::from_json(&text).map_err(at(&schema_path))?;

        let events = dir.join(EVENTS_FILE);
        let jsonl = jsonl.unwrap_or_else(|| dir.join(TRAJECTORIES_FILE));
        if path.is_dir() && events.exists() {
            let demo_path = dir.join(DEMOGRAPHICS_FILE);
            let rows = read_events_csv(open(&events)?).map_err(at(&events))?;
            let demo = read_demographics_csv(open(&demo_path)?).map_err(at(&demo_path))?;
            let (cohort, report) = ingest_events(&rows, &demo, &schema).map_err(at(&events))?;
            Ok(Self {
                schema,
                cohort,
                ingest: Some(report),
            })
        } else {
            let cohort = read_jsonl(open(&jsonl)?).map_err(at(&jsonl))?;
            Ok(Self {
                schema,
                cohort,
                ingest: None,
            })
        }
    }

    /// Writes `schema.json`, `events.csv` and `demographics.csv` into `dir`.
    pub fn write_events(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir).map_err(|e| at(dir)(e.into()))?;
        self.write_schema(dir)?;
        let events = dir.join(EVENTS_FILE);
        let rows = to_event_rows(&self.cohort, &self.schema, EXPORT_EPOCH);
        write_events_csv(&rows, create(&events)?).map_err(at(&events))?;
        let demo = dir.join(DEMOGRAPHICS_FILE);
        write_demographics_csv(&self.cohort, create(&demo)?).map_err(at(&demo))
    }

    /// Writes `schema.json` and `cohort.jsonl` into `dir`.
    pub fn write_jsonl(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir).map_err(|e| at(dir)(e.into()))?;
        self.write_schema(dir)?;
        let path = dir.join(TRAJECTORIES_FILE);
        write_jsonl(&self.cohort, create(&path)?).map_err(at(&path))
    }

    fn write_schema(&self, dir: &Path) -> Result<(), DatasetError> {
        let path = dir.join(SCHEMA_FILE);
        let text = serde_json::to_string_pretty(&self.schema).map_err(|e| at(&path)(e.into()))?;
        std::fs::write(&path, text + "\n").map_err(|e| at(&path)(e.into()))
    }

    /// SHA-256 over the binned trajectories in JSON-lines form.
    pub fn cohort_hash(&self) -> String {
        let mut buf = Vec::new();
        write_jsonl(&self.cohort, &mut buf).expect("in-memory write");
        sha256_hex(&buf)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, DatasetError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| at(path)(e.into()))
}
