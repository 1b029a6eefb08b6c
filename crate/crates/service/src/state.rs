//! What the server holds: an immutable snapshot of model, cohort and study
//! references, swapped whole on reload, plus the decision log.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sepsis_core::cohort::PatientTrajectory;
use sepsis_core::explain::{ExplainConfig, Explainer};
use sepsis_core::recommend::{find_discordant_cases, DiscordantCase};
use sepsis_core::study::ReferenceDecisions;

use crate::bundle::{BundleError, ModelBundle};
use crate::dataset::{Dataset, DatasetError};
use crate::decisions::{DecisionLog, LogError};
use crate::pseudonym;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bundle: PathBuf,
    pub cohort: PathBuf,
    pub decisions: PathBuf,
    pub references: Option<PathBuf>,
    pub token: Option<String>,
    pub pseudonym_seed: u64,
    /// Only condition-gated recommendation views are served.
    pub study_mode: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("cohort does not match the model: {0}")]
    Mismatch(String),
    #[error("{path}: {message}")]
    References { path: String, message: String },
}

pub struct Served {
    pub bundle: ModelBundle,
    pub cohort: Vec<PatientTrajectory>,
    pub references: ReferenceDecisions,
    pub pseudonyms: HashMap<String, String>,
    pub discordant: Vec<DiscordantCase>,
    /// Built over the served cohort; classifiers are fitted per state on first use.
    pub explainer: Explainer<f64>,
    index: HashMap<String, usize>,
}

impl Served {
    /// Cross-checks the parts: feature schemas must match, and every study
    /// case that names a timestep must point into the cohort.
    pub fn new(
        bundle: ModelBundle,
        data: Dataset,
        references: ReferenceDecisions,
        seed: u64,
    ) -> Result<Self, LoadError> {
        if bundle.schema.features != data.schema.features {
            return Err(LoadError::Mismatch("feature schemas differ".into()));
        }
        let missing: Vec<&String> = bundle
            .schema
            .comorbidities
            .iter()
            .filter(|c| !data.schema.comorbidities.contains(c))
            .collect();
        if !missing.is_empty() {
            return Err(LoadError::Mismatch(format!(
                "cohort schema lacks comorbidities {missing:?}"
            )));
        }
        let cohort = data.cohort;
        let index: HashMap<String, usize> = cohort
            .iter()
            .enumerate()
            .map(|(i, p)| (p.patient_id.clone(), i))
            .collect();
        for (case, r) in &references {
            if let Some(pid) = &r.patient_id {
                let ok = index.get(pid).is_some_and(|&i| {
                    r.bin_index
                        .is_none_or(|b| cohort[i].position_of_bin(b).is_some())
                });
                if !ok {
                    return Err(LoadError::Mismatch(format!(
                        "case {case} points at a timestep outside the cohort"
                    )));
                }
            }
        }
        let ids: Vec<String> = cohort.iter().map(|p| p.patient_id.clone()).collect();
        let b = &bundle;
        let discordant = find_discordant_cases(&cohort, &b.mdp, &b.states, &b.action_space);
        let explainer = Explainer::new(
            &cohort,
            &b.states,
            ExplainConfig {
                seed: b.provenance.seed,
                ..Default::default()
            },
        );
        Ok(Self {
            pseudonyms: pseudonym::assign(&ids, seed),
            discordant,
            explainer,
            index,
            references,
            cohort,
            bundle,
        })
    }

    pub fn load(config: &ServeConfig) -> Result<Self, LoadError> {
        let bundle = ModelBundle::load(&config.bundle)?;
        let data = Dataset::load(&config.cohort)?;
        let references = match &config.references {
            Some(p) => read_references(p)?,
            None => ReferenceDecisions::new(),
        };
        Self::new(bundle, data, references, config.pseudonym_seed)
    }

    pub fn patient(&self, id: &str) -> Option<&PatientTrajectory> {
        self.index.get(id).map(|&i| &self.cohort[i])
    }
}

pub fn read_references(path: &Path) -> Result<ReferenceDecisions, LoadError> {
    let err = |message: String| LoadError::References {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

pub struct AppState {
    served: RwLock<Arc<Served>>,
    log: DecisionLog,
    config: ServeConfig,
}

impl AppState {
    pub fn load(config: ServeConfig) -> Result<Arc<Self>, LoadError> {
        let served = Served::load(&config)?;
        let log = DecisionLog::open(&config.decisions)?;
        Ok(Self::from_parts(served, log, config))
    }

    pub fn from_parts(served: Served, log: DecisionLog, config: ServeConfig) -> Arc<Self> {
        Arc::new(Self {
            served: RwLock::new(Arc::new(served)),
            log,
            config,
        })
    }

    /// The snapshot a request works against from start to finish.
    pub fn current(&self) -> Arc<Served> {
        self.served.read().unwrap().clone()
    }

    /// Loads everything again from the configured paths and swaps it in;
    /// on failure the old snapshot stays.
    pub fn reload(&self) -> Result<(), LoadError> {
        let fresh = Arc::new(Served::load(&self.config)?);
        *self.served.write().unwrap() = fresh;
        Ok(())
    }

    pub fn log(&self) -> &DecisionLog {
        &self.log
    }

    pub fn token(&self) -> Option<&str> {
        self.config.token.as_deref()
    }

    pub fn study_mode(&self) -> bool {
        self.config.study_mode
    }
}
