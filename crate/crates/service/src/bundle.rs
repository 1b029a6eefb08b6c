//! On-disk model bundle: a directory with a JSON manifest and little-endian
//! f64 blobs for the matrices JSON cannot carry exactly (the Q matrix marks
//! unestimated actions with NaN).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sepsis_core::cohort::{CohortSummary, FeatureSchema, DEMOGRAPHIC_FEATURES};
use sepsis_core::mdp::{
    decode_f64_blob, encode_f64_blob, ActionId, ActionSpace, Solution, N_ACTIONS,
};
use sepsis_core::ope::WisEstimate;
use sepsis_core::{Mdp, States};

use crate::config::{sha256_hex, TrainConfig};

pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "bundle.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
const Q_BLOB: &str = "q.bin";
const BEHAVIOR_BLOB: &str = "behavior.bin";
const VALUES_BLOB: &str = "values.bin";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("bundle is inconsistent: {0}")]
    Inconsistent(String),
    #[error("{0} already exists")]
    Exists(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 of the binned training cohort (train and test patients).
    pub cohort_hash: String,
    pub trained_at: String,
    pub n_train_patients: usize,
    pub n_test_patients: usize,
    pub tool_version: String,
}

/// Held-out evaluation written next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    /// WIS estimate of the softened learned policy on held-out patients.
    pub wis: WisEstimate<f64>,
    /// Mean discounted return the clinicians achieved on the same patients.
    pub clinician_return: f64,
    pub n_test_episodes: usize,
    pub n_test_timesteps: usize,
    /// States whose policy falls back to the clinicians' plurality action.
    pub uncovered_states: usize,
    /// (state, action) pairs above the visit threshold.
    pub estimated_pairs: usize,
    pub cohort: CohortSummary,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub provenance: Provenance,
    pub config: TrainConfig,
    pub schema: FeatureSchema,
    pub states: States,
    pub action_space: ActionSpace,
    /// Solved model.
    pub mdp: Mdp,
    pub evaluation: Option<EvaluationReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobRef {
    file: String,
    sha256: String,
    /// Number of f64 values.
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredMdp {
    k: usize,
    gamma: f64,
    min_count: u64,
    survive_reward: f64,
    die_reward: f64,
    transitions: Vec<BTreeMap<u32, u64>>,
    visits: Vec<u64>,
    policy: Vec<ActionId>,
    uncovered: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    provenance: Provenance,
    config: TrainConfig,
    schema: FeatureSchema,
    states: States,
    action_space: ActionSpace,
    mdp: StoredMdp,
    blobs: BTreeMap<String, BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evaluation: Option<EvaluationReport>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> BundleError {
    BundleError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

impl ModelBundle {
    /// Checks that the parts describe one model.
    pub fn check(&self) -> Result<(), BundleError> {
        let bad = |m: String| Err(BundleError::Inconsistent(m));
        let (k, mdp) = (self.states.k, &self.mdp);
        if mdp.k != k {
            return bad(format!("state model has {k} states, MDP has {}", mdp.k));
        }
        if self.config.hash() != self.provenance.config_hash {
            return bad("config hash does not match provenance".into());
        }
        if self.config.k != k {
            return bad(format!(
                "config k = {} but the model has {k} states",
                self.config.k
            ));
        }
        for f in &self.states.features {
            if self.schema.get(f).is_none() && !DEMOGRAPHIC_FEATURES.contains(&f.as_str()) {
                return bad(format!("state feature {f} is not in the schema"));
            }
        }
        let Some(sol) = &mdp.solution else {
            return bad("the MDP is not solved".into());
        };
        let cells = k * N_ACTIONS;
        if sol.q.len() != cells
            || mdp.behavior.len() != cells
            || mdp.visits.len() != cells
            || sol.values.len() != k
        {
            return bad("matrix dimensions do not match the state count".into());
        }
        if sol.policy.len() != k || sol.policy.iter().any(|&a| a as usize >= N_ACTIONS) {
            return bad("policy does not cover every state with a grid action".into());
        }
        Ok(())
    }

    /// Writes the bundle into an existing directory.
    pub fn write_into(&self, dir: &Path) -> Result<(), BundleError> {
        self.check()?;
        let sol = self.mdp.solution.as_ref().expect("checked");
        let mut blobs = BTreeMap::new();
        for (name, values) in [
            (Q_BLOB, &sol.q),
            (BEHAVIOR_BLOB, &self.mdp.behavior),
            (VALUES_BLOB, &sol.values),
        ] {
            let bytes = encode_f64_blob(values);
            let path = dir.join(name);
            std::fs::write(&path, &bytes).map_err(io_err(&path))?;
            blobs.insert(
                name.trim_end_matches(".bin").to_string(),
                BlobRef {
                    file: name.into(),
                    sha256: sha256_hex(&bytes),
                    len: values.len(),
                },
            );
        }
        let m = &self.mdp;
        let manifest = Manifest {
            schema_version: BUNDLE_VERSION,
            provenance: self.provenance.clone(),
            config: self.config.clone(),
            schema: self.schema.clone(),
            states: self.states.clone(),
            action_space: self.action_space.clone(),
            mdp: StoredMdp {
                k: m.k,
                gamma: m.gamma,
                min_count: m.min_count,
                survive_reward: m.survive_reward,
                die_reward: m.die_reward,
                transitions: m.transitions.clone(),
                visits: m.visits.clone(),
                policy: sol.policy.clone(),
                uncovered: sol.uncovered.clone(),
            },
            blobs,
            evaluation: self.evaluation.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text =
            serde_json::to_string(&manifest).map_err(|e| format_err(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(io_err(&path))?;
        if let Some(eval) = &self.evaluation {
            let path = dir.join(EVALUATION_FILE);
            let text =
                serde_json::to_string_pretty(eval).map_err(|e| format_err(&path, e.to_string()))?;
            std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Writes into a fresh sibling directory and renames it to `out`, so a
    /// failed write leaves nothing behind. `out` must not exist.
    pub fn save(&self, out: &Path) -> Result<(), BundleError> {
        if out.exists() {
            return Err(BundleError::Exists(out.display().to_string()));
        }
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).map_err(io_err(&parent))?;
        let tmp = tempfile::Builder::new()
            .prefix(".bundle-")
            .tempdir_in(&parent)
            .map_err(io_err(&parent))?;
        self.write_into(tmp.path())?;
        let staged = tmp.keep();
        std::fs::rename(&staged, out).map_err(|e| {
            let _ = std::fs::remove_dir_all(&staged);
            io_err(out)(e)
        })
    }

    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
        if m.schema_version != BUNDLE_VERSION {
            return Err(format_err(
                &path,
                format!("unsupported bundle version {}", m.schema_version),
            ));
        }
        let blob = |name: &str| -> Result<Vec<f64>, BundleError> {
            let r = m
                .blobs
                .get(name)
                .ok_or_else(|| format_err(&path, format!("missing blob {name}")))?;
            let p = dir.join(&r.file);
            let bytes = std::fs::read(&p).map_err(io_err(&p))?;
            if sha256_hex(&bytes) != r.sha256 {
                return Err(format_err(&p, "checksum mismatch"));
            }
            let values = decode_f64_blob(&bytes)
                .ok_or_else(|| format_err(&p, "length is not a multiple of 8"))?;
            if values.len() != r.len {
                return Err(format_err(
                    &p,
                    format!("expected {} values, found {}", r.len, values.len()),
                ));
            }
            Ok(values)
        };
        let (q, behavior, values) = (blob("q")?, blob("behavior")?, blob("values")?);
        let s = m.mdp;
        let mdp = Mdp {
            k: s.k,
            gamma: s.gamma,
            min_count: s.min_count,
            survive_reward: s.survive_reward,
            die_reward: s.die_reward,
            transitions: s.transitions,
            visits: s.visits,
            behavior,
            solution: Some(Solution {
                q,
                values,
                policy: s.policy,
                uncovered: s.uncovered,
                trace: Vec::new(),
            }),
        };
        let bundle = Self {
            provenance: m.provenance,
            config: m.config,
            schema: m.schema,
            states: m.states,
            action_space: m.action_space,
            mdp,
            evaluation: m.evaluation,
        };
        bundle.check()?;
        Ok(bundle)
    }
}

/// Bitwise equality of every numeric matrix, NaN included.
pub fn matrices_identical(a: &ModelBundle, b: &ModelBundle) -> bool {
    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }
    let (sa, sb) = (a.mdp.solution.as_ref(), b.mdp.solution.as_ref());
    match (sa, sb) {
        (Some(x), Some(y)) => {
            bits(&x.q) == bits(&y.q)
                && bits(&x.values) == bits(&y.values)
                && x.policy == y.policy
                && bits(&a.mdp.behavior) == bits(&b.mdp.behavior)
                && a.mdp.transitions == b.mdp.transitions
                && bits(&a.states.centroids) == bits(&b.states.centroids)
                && bits(&a.states.means) == bits(&b.states.means)
                && bits(&a.states.stds) == bits(&b.states.stds)
                && a.action_space == b.action_space
        }
        _ => false,
    }
}
