//! Decision capture for the visualization study and its analysis:
//! concordance against reference decisions and regressions on Likert ratings.

pub mod stats;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use stats::{
    design_matrix, holm_bonferroni, logit_cluster, ols_cluster, HolmResult, RegressionFit,
    StatsError,
};

pub const DECISION_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const LIKERT_MAX: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Attending,
    Fellow,
    App,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoAi,
    TextOnly,
    FeatureExplanation,
    AlternativeTreatments,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::NoAi,
        Condition::TextOnly,
        Condition::FeatureExplanation,
        Condition::AlternativeTreatments,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::NoAi => "no_ai",
            Condition::TextOnly => "text_only",
            Condition::FeatureExplanation => "feature_explanation",
            Condition::AlternativeTreatments => "alternative_treatments",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn shows_ai(self) -> bool {
        self != Condition::NoAi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Increase,
    Decrease,
    NoChange,
}

/// A treatment decision on both channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub fluid: Choice,
    pub vaso: Choice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Likert {
    pub confidence: u8,
    pub difficulty: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usefulness: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_confidence_effect: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub schema_version: u32,
    pub record_id: String,
    pub participant_id: String,
    pub role: Role,
    pub years_experience: String,
    pub case_id: String,
    pub condition: Condition,
    pub fluid_choice: Choice,
    pub vaso_choice: Choice,
    pub likert: Likert,
    pub timestamp: String,
    /// Record this one corrects; the log itself is never edited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

/// Whether each channel's dose is zero at the presented timestep; a zero
/// dose cannot be decreased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DoseContext {
    pub fluid_zero: bool,
    pub vaso_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordViolation {
    pub field: String,
    pub message: String,
}

impl DecisionRecord {
    pub fn decision(&self) -> Decision {
        Decision {
            fluid: self.fluid_choice,
            vaso: self.vaso_choice,
        }
    }

    pub fn validate(&self, dose: DoseContext) -> Result<(), Vec<RecordViolation>> {
        let mut out = Vec::new();
        let mut bad = |field: &str, message: &str| {
            out.push(RecordViolation {
                field: field.into(),
                message: message.into(),
            })
        };
        for (field, v) in [
            ("likert.confidence", Some(self.likert.confidence)),
            ("likert.difficulty", Some(self.likert.difficulty)),
        ]
        .into_iter()
        .chain([
            ("likert.usefulness", self.likert.usefulness),
            (
                "likert.ai_confidence_effect",
                self.likert.ai_confidence_effect,
            ),
        ]) {
            if v.is_some_and(|v| !(1..=LIKERT_MAX).contains(&v)) {
                bad(field, "must be between 1 and 7");
            }
        }
        let ai_fields = [self.likert.usefulness, self.likert.ai_confidence_effect];
        if self.condition.shows_ai() {
            if ai_fields.iter().any(Option::is_none) {
                bad(
                    "likert",
                    "usefulness and ai_confidence_effect are required when the AI is shown",
                );
            }
        } else if ai_fields.iter().any(Option::is_some) {
            bad(
                "likert",
                "usefulness and ai_confidence_effect must be absent in the no_ai condition",
            );
        }
        if dose.fluid_zero && self.fluid_choice == Choice::Decrease {
            bad(
                "fluid_choice",
                "decrease is not available when no fluids are being given",
            );
        }
        if dose.vaso_zero && self.vaso_choice == Choice::Decrease {
            bad(
                "vaso_choice",
                "decrease is not available when no vasopressor is being given",
            );
        }
        for (field, v) in [
            ("participant_id", &self.participant_id),
            ("case_id", &self.case_id),
            ("record_id", &self.record_id),
        ] {
            if v.trim().is_empty() {
                bad(field, "must not be empty");
            }
        }
        if self.supersedes.as_deref() == Some(self.record_id.as_str()) {
            bad("supersedes", "a record cannot supersede itself");
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

/// Drops every record that a later record supersedes.
pub fn effective_records(log: &[DecisionRecord]) -> Vec<&DecisionRecord> {
    let superseded: HashSet<&str> = log.iter().filter_map(|r| r.supersedes.as_deref()).collect();
    log.iter()
        .filter(|r| !superseded.contains(r.record_id.as_str()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Ai,
    OriginalClinician,
    MajorityAttending,
}

impl ReferenceKind {
    pub const ALL: [ReferenceKind; 3] = [
        ReferenceKind::Ai,
        ReferenceKind::OriginalClinician,
        ReferenceKind::MajorityAttending,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceKind::Ai => "ai",
            ReferenceKind::OriginalClinician => "original_clinician",
            ReferenceKind::MajorityAttending => "majority_attending",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReferences {
    pub ai: Decision,
    pub original_clinician: Decision,
    pub majority_attending: Decision,
    /// Presented patient and timestep, when the case comes from the served cohort.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_index: Option<u32>,
    #[serde(default)]
    pub dose: DoseContext,
}

impl CaseReferences {
    pub fn get(&self, kind: ReferenceKind) -> Decision {
        match kind {
            ReferenceKind::Ai => self.ai,
            ReferenceKind::OriginalClinician => self.original_clinician,
            ReferenceKind::MajorityAttending => self.majority_attending,
        }
    }
}

/// Reference decisions keyed by case id.
pub type ReferenceDecisions = BTreeMap<String, CaseReferences>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concordance {
    pub full: bool,
    pub any: bool,
}

pub fn concordance(a: Decision, b: Decision) -> Concordance {
    let fluid = a.fluid == b.fluid;
    let vaso = a.vaso == b.vaso;
    Concordance {
        full: fluid && vaso,
        any: fluid || vaso,
    }
}

/// Most common no-AI decision among attendings per case; ties go to the
/// smallest decision in (fluid, vaso) order.
pub fn majority_attending(log: &[DecisionRecord]) -> BTreeMap<String, Decision> {
    let mut tallies: BTreeMap<&str, BTreeMap<(Choice, Choice), usize>> = BTreeMap::new();
    for r in effective_records(log) {
        if r.role == Role::Attending && r.condition == Condition::NoAi {
            *tallies
                .entry(&r.case_id)
                .or_default()
                .entry((r.fluid_choice, r.vaso_choice))
                .or_default() += 1;
        }
    }
    tallies
        .into_iter()
        .map(|(case, t)| {
            let mut best = None;
            for (d, n) in t {
                if best.is_none_or(|(_, bn)| n > bn) {
                    best = Some((d, n));
                }
            }
            let ((fluid, vaso), _) = best.unwrap();
            (case.to_string(), Decision { fluid, vaso })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    #[default]
    Normal,
    Wilson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

const Z95: f64 = 1.959963984540054;

pub fn rate_interval(successes: usize, n: usize, method: IntervalMethod) -> Option<Rate> {
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let (lo, hi) = match method {
        IntervalMethod::Normal => {
            let h = Z95 * (p * (1.0 - p) / nf).sqrt();
            (p - h, p + h)
        }
        IntervalMethod::Wilson => {
            let z2 = Z95 * Z95;
            let centre = (p + z2 / (2.0 * nf)) / (1.0 + z2 / nf);
            let h = Z95 / (1.0 + z2 / nf) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
            (centre - h, centre + h)
        }
    };
    Some(Rate {
        rate: p,
        lo: lo.clamp(0.0, 1.0),
        hi: hi.clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceRow {
    pub condition: Condition,
    pub reference: ReferenceKind,
    pub n: usize,
    pub full_matches: usize,
    pub any_matches: usize,
    /// Absent when the condition has no decisions.
    pub full: Option<Rate>,
    pub any: Option<Rate>,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum StudyError {
    #[error("record {record_id}: case {case_id} has no reference decisions")]
    UnknownCase { record_id: String, case_id: String },
    #[error("decision log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Rows for every condition × reference over the effective log.
pub fn concordance_rates(
    log: &[DecisionRecord],
    refs: &ReferenceDecisions,
    method: IntervalMethod,
) -> Result<Vec<ConcordanceRow>, StudyError> {
    let records = effective_records(log);
    for r in &records {
        if !refs.contains_key(&r.case_id) {
            return Err(StudyError::UnknownCase {
                record_id: r.record_id.clone(),
                case_id: r.case_id.clone(),
            });
        }
    }
    let mut rows = Vec::new();
    for cond in Condition::ALL {
        for kind in ReferenceKind::ALL {
            let (mut n, mut full, mut any) = (0, 0, 0);
            for r in records.iter().filter(|r| r.condition == cond) {
                let c = concordance(r.decision(), refs[&r.case_id].get(kind));
                n += 1;
                full += c.full as usize;
                any += c.any as usize;
            }
            rows.push(ConcordanceRow {
                condition: cond,
                reference: kind,
                n,
                full_matches: full,
                any_matches: any,
                full: rate_interval(full, n, method),
                any: rate_interval(any, n, method),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: Condition,
    pub b: Condition,
    /// Effect of `b` minus effect of `a`.
    pub difference: f64,
    pub se: f64,
    pub p_value: f64,
    pub adjusted_p: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub outcome: String,
    pub conditions: Vec<Condition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<RegressionFit<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub pairwise: Vec<PairwiseComparison>,
    /// Mean outcome per condition.
    pub means: Vec<(Condition, f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub n_records: usize,
    pub n_effective: usize,
    pub n_participants: usize,
    pub alpha: f64,
    pub interval_method: IntervalMethod,
    pub small_sample_correction: String,
    pub likert_models: Vec<ModelResult>,
    pub concordance: Vec<ConcordanceRow>,
    pub concordance_models: Vec<ModelResult>,
}

fn pairwise(
    fit: &RegressionFit<f64>,
    design: &stats::Design<f64>,
    conds: &[Condition],
    alpha: f64,
) -> Vec<PairwiseComparison> {
    let mut raw = Vec::new();
    for a in 0..conds.len() {
        for b in a + 1..conds.len() {
            let (d, se, p) = fit.contrast(&design.condition_columns, a, b);
            raw.push((a, b, d, se, p));
        }
    }
    let ps: Vec<f64> = raw.iter().map(|r| r.4).collect();
    let holm = holm_bonferroni(&ps, alpha).expect("p-values from the t distribution lie in [0, 1]");
    raw.into_iter()
        .zip(holm)
        .map(|((a, b, difference, se, p_value), h)| PairwiseComparison {
            a: conds[a],
            b: conds[b],
            difference,
            se,
            p_value,
            adjusted_p: h.adjusted_p,
            reject: h.reject,
        })
        .collect()
}

enum Outcome<'a> {
    Likert(&'a str, fn(&Likert) -> Option<u8>),
    Concordance(ReferenceKind, bool),
}

fn fit_model(
    records: &[&DecisionRecord],
    refs: &ReferenceDecisions,
    outcome: Outcome<'_>,
    alpha: f64,
) -> ModelResult {
    let mut y = Vec::new();
    let mut cond = Vec::new();
    let mut cluster = Vec::new();
    let name = match &outcome {
        Outcome::Likert(n, _) => n.to_string(),
        Outcome::Concordance(k, full) => {
            format!("{}_{}", if *full { "full" } else { "any" }, k.as_str())
        }
    };
    for r in records {
        let v = match &outcome {
            Outcome::Likert(_, get) => get(&r.likert).map(f64::from),
            Outcome::Concordance(k, full) => refs.get(&r.case_id).map(|c| {
                let cc = concordance(r.decision(), c.get(*k));
                (if *full { cc.full } else { cc.any }) as u8 as f64
            }),
        };
        if let Some(v) = v {
            y.push(v);
            cond.push(r.condition);
            cluster.push(r.participant_id.as_str());
        }
    }
    let conds: Vec<Condition> = cond
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let means = conds
        .iter()
        .map(|c| {
            let vals: Vec<f64> = y
                .iter()
                .zip(&cond)
                .filter(|(_, k)| *k == c)
                .map(|(v, _)| *v)
                .collect();
            (*c, vals.iter().sum::<f64>() / vals.len() as f64, vals.len())
        })
        .collect();
    let levels: Vec<usize> = cond
        .iter()
        .map(|c| conds.iter().position(|k| k == c).unwrap())
        .collect();
    let level_names: Vec<String> = conds.iter().map(|c| c.as_str().to_string()).collect();
    let fitted = design_matrix::<f64>(&levels, &level_names, &[]).and_then(|d| {
        let fit = match outcome {
            Outcome::Likert(..) => ols_cluster(&y, &d, &cluster)?,
            Outcome::Concordance(..) => {
                let yb: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
                logit_cluster(&yb, &d, &cluster)?
            }
        };
        Ok((fit, d))
    });
    match fitted {
        Ok((fit, d)) => {
            let pw = pairwise(&fit, &d, &conds, alpha);
            ModelResult {
                outcome: name,
                conditions: conds,
                fit: Some(fit),
                error: None,
                pairwise: pw,
                means,
            }
        }
        Err(e) => ModelResult {
            outcome: name,
            conditions: conds,
            fit: None,
            error: Some(e.to_string()),
            pairwise: vec![],
            means,
        },
    }
}

/// Full analysis: OLS per Likert item, concordance rates, and logistic
/// models of concordance, all clustered by participant.
pub fn analyze(
    log: &[DecisionRecord],
    refs: &ReferenceDecisions,
    alpha: f64,
    method: IntervalMethod,
) -> Result<StudyReport, StudyError> {
    let concordance = concordance_rates(log, refs, method)?;
    let records = effective_records(log);
    let likert: [Outcome; 4] = [
        Outcome::Likert("confidence", |l| Some(l.confidence)),
        Outcome::Likert("difficulty", |l| Some(l.difficulty)),
        Outcome::Likert("usefulness", |l| l.usefulness),
        Outcome::Likert("ai_confidence_effect", |l| l.ai_confidence_effect),
    ];
    let likert_models = likert
        .into_iter()
        .map(|o| fit_model(&records, refs, o, alpha))
        .collect();
    let concordance_models = ReferenceKind::ALL
        .into_iter()
        .flat_map(|k| {
            [
                Outcome::Concordance(k, true),
                Outcome::Concordance(k, false),
            ]
        })
        .map(|o| fit_model(&records, refs, o, alpha))
        .collect();
    let participants: BTreeSet<&str> = records.iter().map(|r| r.participant_id.as_str()).collect();
    Ok(StudyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_records: log.len(),
        n_effective: records.len(),
        n_participants: participants.len(),
        alpha,
        interval_method: method,
        small_sample_correction: stats::SMALL_SAMPLE_CORRECTION.into(),
        likert_models,
        concordance,
        concordance_models,
    })
}

impl StudyReport {
    /// Plain-text tables: Likert means and model tests, then concordance rates.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "decisions: {} ({} after corrections), participants: {}",
            self.n_records, self.n_effective, self.n_participants
        );
        let _ = writeln!(
            s,
            "\nLikert outcomes (OLS, SEs clustered by participant, {})",
            self.small_sample_correction
        );
        for m in &self.likert_models {
            let _ = writeln!(s, "\n  {}", m.outcome);
            for (c, mean, n) in &m.means {
                let _ = writeln!(s, "    {:<24} mean {:>5.2}  n {:>4}", c.as_str(), mean, n);
            }
            match (&m.fit, &m.error) {
                (Some(f), _) => {
                    let fs = f.f_stat.map_or("n/a".into(), |v| format!("{v:.3}"));
                    let ps = f.f_p_value.map_or("n/a".into(), |v| format!("{v:.4}"));
                    let _ = writeln!(s, "    F({}, {}) = {fs}, p = {ps}", f.f_df.0, f.f_df.1);
                }
                (None, Some(e)) => {
                    let _ = writeln!(s, "    not fitted: {e}");
                }
                _ => {}
            }
            for p in &m.pairwise {
                let _ = writeln!(
                    s,
                    "    {} vs {}: diff {:+.2} (se {:.2}), p {:.4}, Holm p {:.4}{}",
                    p.b.as_str(),
                    p.a.as_str(),
                    p.difference,
                    p.se,
                    p.p_value,
                    p.adjusted_p,
                    if p.reject { " *" } else { "" }
                );
            }
        }
        let _ = writeln!(
            s,
            "\nConcordance ({:?} 95% intervals)",
            self.interval_method
        );
        let _ = writeln!(
            s,
            "  {:<24} {:<20} {:>4} {:>22} {:>22}",
            "condition", "reference", "n", "full", "any"
        );
        let fmt = |r: &Option<Rate>| {
            r.map_or("-".to_string(), |r| {
                format!("{:.2} [{:.2}, {:.2}]", r.rate, r.lo, r.hi)
            })
        };
        for r in &self.concordance {
            let _ = writeln!(
                s,
                "  {:<24} {:<20} {:>4} {:>22} {:>22}",
                r.condition.as_str(),
                r.reference.as_str(),
                r.n,
                fmt(&r.full),
                fmt(&r.any)
            );
        }
        s
    }
}

/// Reads a JSON-lines decision log; blank lines are skipped.
pub fn read_decision_log(text: &str) -> Result<Vec<DecisionRecord>, StudyError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StudyError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
