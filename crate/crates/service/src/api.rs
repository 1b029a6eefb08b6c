//! REST/JSON API. Every response body carries `schema_version`; every error
//! is a JSON object with an `error` code and a `message`.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use sepsis_core::cohort::{flag_abnormal, AbnormalFlag, PatientTrajectory};
use sepsis_core::recommend::{
    build_payload, filter_cohort, summarize, Bounds, CohortFilter, FieldError, Outcome,
    RecommendError, RecommendationPayload, SortKey,
};
use sepsis_core::study::{
    analyze, Choice, Condition, DecisionRecord, DoseContext, IntervalMethod, Likert,
    RecordViolation, Role, DECISION_SCHEMA_VERSION,
};

use crate::decisions::{Appended, LogError};
use crate::state::{AppState, Served};

pub const API_VERSION: u32 = 1;
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    extra: Map<String, Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            extra: Map::new(),
        }
    }

    fn with(mut self, key: &str, value: impl serde::Serialize) -> Self {
        self.extra.insert(
            key.into(),
            serde_json::to_value(value).expect("serializable"),
        );
        self
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn bad_fields(errors: Vec<FieldError>) -> Self {
        Self::new(
            StatusCode::BAD_REQUEST,
            "invalid_parameters",
            "one or more query parameters are invalid",
        )
        .with("field_errors", errors)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = Map::new();
        body.insert("schema_version".into(), API_VERSION.into());
        body.insert("error".into(), self.code.into());
        body.insert("message".into(), self.message.into());
        body.extend(self.extra);
        (self.status, Json(Value::Object(body))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/patients", get(list_patients))
        .route("/patients/{id}", get(patient_detail))
        .route(
            "/patients/{id}/timesteps/{t}/recommendation",
            get(recommendation),
        )
        .route("/patients/{id}/timesteps/{t}/payload", get(full_payload))
        .route("/study/decisions", post(submit_decision))
        .route("/study/report", get(study_report))
        .route("/study/cases", get(study_cases))
        .route("/admin/reload", post(reload))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .fallback(|| async { ApiError::not_found("not_found", "no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(
                StatusCode::METHOD_NOT_ALLOWED,
                "method_not_allowed",
                "method not allowed on this endpoint",
            )
        })
        .with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = state.token() {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or invalid bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}

fn model_summary(s: &Served) -> Value {
    let p = &s.bundle.provenance;
    json!({
        "k": s.bundle.states.k,
        "config_hash": p.config_hash,
        "cohort_hash": p.cohort_hash,
        "trained_at": p.trained_at,
        "seed": p.seed,
    })
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let s = state.current();
    Json(json!({
        "schema_version": API_VERSION,
        "status": "ok",
        "model": model_summary(&s),
        "patients": s.cohort.len(),
        "study_mode": state.study_mode(),
    }))
}

async fn reload(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let st = state.clone();
    blocking(move || st.reload()).await?.map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "reload_failed",
            e.to_string(),
        )
    })?;
    let s = state.current();
    Ok(Json(
        json!({ "schema_version": API_VERSION, "model": model_summary(&s), "patients": s.cohort.len() }),
    ))
}

// ---- patient browsing ----

#[derive(Debug, Clone, PartialEq)]
pub struct ListQuery {
    pub filter: CohortFilter,
    pub sort: Option<SortKey>,
    pub descending: bool,
    pub offset: usize,
    pub limit: Option<usize>,
}

fn parse_one<T: FromStr>(field: &str, v: &str, errs: &mut Vec<FieldError>) -> Option<T> {
    match v.trim().parse() {
        Ok(x) => Some(x),
        Err(_) => {
            errs.push(FieldError {
                field: field.into(),
                message: format!("cannot parse {v:?}"),
            });
            None
        }
    }
}

fn parse_list<T: FromStr + Ord>(field: &str, v: &str, errs: &mut Vec<FieldError>) -> BTreeSet<T> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .filter_map(|s| parse_one(field, s, errs))
        .collect()
}

/// Parses browse parameters: `age_min`, `age_max`, `gender`, `comorbidity`,
/// `outcome`, `sofa_min`, `sofa_max`, `sirs_min`, `sirs_max`,
/// `clinician_action`, `model_action`, `sort`, `order`, `offset`, `limit`.
/// Lists are comma-separated; a missing bound is open.
pub fn parse_list_query(pairs: &[(String, String)]) -> Result<ListQuery, Vec<FieldError>> {
    let mut errs = Vec::new();
    let mut q = ListQuery {
        filter: CohortFilter::default(),
        sort: None,
        descending: false,
        offset: 0,
        limit: None,
    };
    let (mut age, mut sofa, mut sirs) = ((None, None), (None, None), (None, None));
    let mut seen = BTreeSet::new();
    for (k, v) in pairs {
        if !seen.insert(k.as_str()) {
            errs.push(FieldError {
                field: k.clone(),
                message: "given more than once".into(),
            });
            continue;
        }
        let e = &mut errs;
        match k.as_str() {
            "age_min" => age.0 = parse_one::<f64>(k, v, e),
            "age_max" => age.1 = parse_one::<f64>(k, v, e),
            "sofa_min" => sofa.0 = parse_one::<i32>(k, v, e),
            "sofa_max" => sofa.1 = parse_one::<i32>(k, v, e),
            "sirs_min" => sirs.0 = parse_one::<i32>(k, v, e),
            "sirs_max" => sirs.1 = parse_one::<i32>(k, v, e),
            "gender" => {
                q.filter.gender = Some(
                    v.split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect(),
                )
            }
            "comorbidity" => {
                q.filter.comorbidities = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "outcome" => match v.as_str() {
                "survived" => q.filter.outcome = Some(Outcome::Survived),
                "died" => q.filter.outcome = Some(Outcome::Died),
                _ => e.push(FieldError {
                    field: k.clone(),
                    message: "expected survived or died".into(),
                }),
            },
            "clinician_action" => q.filter.clinician_actions = Some(parse_list(k, v, e)),
            "model_action" => q.filter.model_actions = Some(parse_list(k, v, e)),
            "sort" => match v.as_str() {
                "age" => q.sort = Some(SortKey::Age),
                "sofa" => q.sort = Some(SortKey::Sofa),
                "length" => q.sort = Some(SortKey::Length),
                "discordant" => q.sort = Some(SortKey::Discordant),
                _ => e.push(FieldError {
                    field: k.clone(),
                    message: "expected age, sofa, length or discordant".into(),
                }),
            },
            "order" => match v.as_str() {
                "asc" => q.descending = false,
                "desc" => q.descending = true,
                _ => e.push(FieldError {
                    field: k.clone(),
                    message: "expected asc or desc".into(),
                }),
            },
            "offset" => q.offset = parse_one(k, v, e).unwrap_or(0),
            "limit" => q.limit = parse_one(k, v, e),
            _ => e.push(FieldError {
                field: k.clone(),
                message: "unknown parameter".into(),
            }),
        }
    }
    if age.0.is_some() || age.1.is_some() {
        q.filter.age = Some(Bounds {
            lo: age.0.unwrap_or(f64::NEG_INFINITY),
            hi: age.1.unwrap_or(f64::INFINITY),
        });
    }
    for (b, slot) in [(sofa, &mut q.filter.sofa), (sirs, &mut q.filter.sirs)] {
        if b.0.is_some() || b.1.is_some() {
            *slot = Some(Bounds {
                lo: b.0.unwrap_or(i32::MIN),
                hi: b.1.unwrap_or(i32::MAX),
            });
        }
    }
    if let Err(mut more) = q.filter.validate() {
        errs.append(&mut more);
    }
    if errs.is_empty() {
        Ok(q)
    } else {
        Err(errs)
    }
}

fn query_pairs(
    q: Result<Query<Vec<(String, String)>>, QueryRejection>,
) -> ApiResult<Vec<(String, String)>> {
    q.map(|Query(p)| p).map_err(|e| {
        ApiError::bad_fields(vec![FieldError {
            field: "query".into(),
            message: e.body_text(),
        }])
    })
}

async fn list_patients(
    State(state): State<Arc<AppState>>,
    q: Result<Query<Vec<(String, String)>>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let pairs = query_pairs(q)?;
    let lq = parse_list_query(&pairs).map_err(ApiError::bad_fields)?;
    let s = state.current();
    blocking(move || {
        let b = &s.bundle;
        let matches = filter_cohort(&s.cohort, &b.mdp, &b.states, &b.action_space, &lq.filter);
        let mut rows = summarize(&s.cohort, matches, &s.discordant, lq.sort.unwrap_or(SortKey::Age), lq.descending);
        if lq.sort.is_none() {
            rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        }
        let total = rows.len();
        let page: Vec<Value> = rows
            .into_iter()
            .skip(lq.offset)
            .take(lq.limit.unwrap_or(usize::MAX))
            .map(|r| {
                let mut v = serde_json::to_value(&r).expect("serializable");
                v["pseudonym"] = s.pseudonyms.get(&r.patient_id).cloned().into();
                v
            })
            .collect();
        Json(json!({ "schema_version": API_VERSION, "total": total, "offset": lq.offset, "patients": page }))
    })
    .await
}

fn find_patient<'a>(s: &'a Served, id: &str) -> ApiResult<&'a PatientTrajectory> {
    s.patient(id)
        .ok_or_else(|| ApiError::not_found("patient_not_found", format!("no patient {id}")))
}

fn flag_name(f: AbnormalFlag) -> &'static str {
    match f {
        AbnormalFlag::Below => "below",
        AbnormalFlag::Normal => "normal",
        AbnormalFlag::Above => "above",
    }
}

/// Timeline with abnormal flags and changes against the previous bin.
pub fn patient_view(s: &Served, p: &PatientTrajectory) -> Value {
    let b = &s.bundle;
    let mut timesteps = Vec::with_capacity(p.len());
    for (t, r) in p.timesteps.iter().enumerate() {
        let flags = flag_abnormal(r, &b.schema).flags;
        let prev = t.checked_sub(1).map(|u| &p.timesteps[u]);
        let features: Vec<Value> = b
            .schema
            .features
            .iter()
            .filter_map(|spec| {
                let v = *r.features.get(&spec.name)?;
                let delta = prev.and_then(|q| q.features.get(&spec.name)).map(|&u| v - u);
                let trend = delta.map(|d| if d > 0.0 { "up" } else if d < 0.0 { "down" } else { "flat" });
                Some(json!({
                    "name": spec.name,
                    "value": v,
                    "flag": flag_name(flags.get(&spec.name).copied().unwrap_or(AbnormalFlag::Normal)),
                    "delta": delta,
                    "trend": trend,
                    "imputed": r.imputed.contains(&spec.name),
                }))
            })
            .collect();
        timesteps.push(json!({
            "bin_index": r.bin_index,
            "state_id": b.states.assign_trajectory(p, t),
            "features": features,
            "fluid_dose": r.fluid_dose,
            "vaso_dose": r.vaso_dose,
            "clinician_action": b.action_space.discretize_action(r.fluid_dose, r.vaso_dose),
            "mech_vent": r.mech_vent,
            "sofa": r.sofa,
            "sirs": r.sirs,
        }));
    }
    json!({
        "schema_version": API_VERSION,
        "patient_id": p.patient_id,
        "pseudonym": s.pseudonyms.get(&p.patient_id),
        "demographics": p.demographics,
        "died": p.died,
        "feature_specs": b.schema.features,
        "timesteps": timesteps,
    })
}

async fn patient_detail(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let s = state.current();
    find_patient(&s, &id)?;
    blocking(move || Json(patient_view(&s, s.patient(&id).expect("checked")))).await
}

/// The payload fields a participant may see under `condition`. The
/// recommendation text accompanies every AI condition; the explanation and
/// the ranked alternatives are each shown only in their own condition.
pub fn gate(p: RecommendationPayload, condition: Condition) -> Value {
    let mut out = json!({
        "schema_version": p.schema_version,
        "patient_id": p.patient_id,
        "bin_index": p.bin_index,
        "condition": condition,
    });
    if condition.shows_ai() {
        out["recommendation"] = json!({
            "action_id": p.recommended_action,
            "dose": p.recommended,
            "low_data": p.low_data,
        });
    }
    match condition {
        Condition::FeatureExplanation => {
            out["explanation"] = serde_json::to_value(&p.explanation).expect("serializable")
        }
        Condition::AlternativeTreatments => {
            out["alternatives"] = serde_json::to_value(&p.alternatives).expect("serializable")
        }
        _ => {}
    }
    out
}

fn parse_bin(t: &str) -> ApiResult<u32> {
    t.parse().map_err(|_| {
        ApiError::bad_fields(vec![FieldError {
            field: "t".into(),
            message: format!("{t:?} is not a bin index"),
        }])
    })
}

async fn payload_for(
    s: Arc<Served>,
    id: String,
    bin: u32,
    explain: bool,
) -> ApiResult<RecommendationPayload> {
    find_patient(&s, &id)?;
    blocking(move || {
        let p = s.patient(&id).expect("checked");
        let b = &s.bundle;
        build_payload(
            &b.mdp,
            &b.states,
            &b.action_space,
            explain.then_some(&s.explainer),
            p,
            bin,
        )
    })
    .await?
    .map_err(|e| match e {
        RecommendError::BinNotFound { .. } => {
            ApiError::not_found("timestep_not_found", e.to_string())
        }
        _ => ApiError::internal(e.to_string()),
    })
}

async fn recommendation(
    State(state): State<Arc<AppState>>,
    Path((id, t)): Path<(String, String)>,
    q: Result<Query<Vec<(String, String)>>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let mut errs = Vec::new();
    let mut condition = None;
    for (k, v) in query_pairs(q)? {
        match k.as_str() {
            "condition" => match Condition::parse(&v) {
                Some(c) => condition = Some(c),
                None => errs.push(FieldError {
                    field: k,
                    message:
                        "expected no_ai, text_only, feature_explanation or alternative_treatments"
                            .into(),
                }),
            },
            _ => errs.push(FieldError {
                field: k,
                message: "unknown parameter".into(),
            }),
        }
    }
    if condition.is_none() && errs.is_empty() {
        errs.push(FieldError {
            field: "condition".into(),
            message: "required".into(),
        });
    }
    if !errs.is_empty() {
        return Err(ApiError::bad_fields(errs));
    }
    let condition = condition.expect("checked");
    let bin = parse_bin(&t)?;
    let s = state.current();
    if condition == Condition::NoAi {
        // nothing is computed, but unknown patients and bins still 404
        let p = find_patient(&s, &id)?;
        if p.position_of_bin(bin).is_none() {
            return Err(ApiError::not_found(
                "timestep_not_found",
                format!("patient {id} has no timestep with bin index {bin}"),
            ));
        }
        return Ok(Json(json!({
            "schema_version": sepsis_core::recommend::PAYLOAD_VERSION,
            "patient_id": id,
            "bin_index": bin,
            "condition": condition,
        })));
    }
    let payload = payload_for(s, id, bin, condition == Condition::FeatureExplanation).await?;
    Ok(Json(gate(payload, condition)))
}

/// Everything the model knows about a timestep, for the explorer. Disabled
/// in study mode, where only condition-gated views are served.
async fn full_payload(
    State(state): State<Arc<AppState>>,
    Path((id, t)): Path<(String, String)>,
) -> ApiResult<Json<RecommendationPayload>> {
    if state.study_mode() {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "study_mode",
            "full payloads are disabled in study mode",
        ));
    }
    let bin = parse_bin(&t)?;
    Ok(Json(payload_for(state.current(), id, bin, true).await?))
}

// ---- study ----

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionSubmission {
    pub participant_id: String,
    pub role: Role,
    pub years_experience: String,
    pub case_id: String,
    pub condition: Condition,
    pub fluid_choice: Choice,
    pub vaso_choice: Choice,
    pub likert: Likert,
    #[serde(default)]
    pub supersedes: Option<String>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

fn violations(status: StatusCode, v: Vec<RecordViolation>) -> ApiError {
    let msg = v
        .iter()
        .map(|v| format!("{}: {}", v.field, v.message))
        .collect::<Vec<_>>()
        .join("; ");
    ApiError::new(status, "invalid_decision", msg).with("violations", v)
}

fn violation(field: &str, message: impl Into<String>) -> ApiError {
    violations(
        StatusCode::UNPROCESSABLE_ENTITY,
        vec![RecordViolation {
            field: field.into(),
            message: message.into(),
        }],
    )
}

async fn submit_decision(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let sub: DecisionSubmission = serde_json::from_slice(&body).map_err(|e| {
        if e.is_data() {
            violation("body", e.to_string())
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string())
        }
    })?;
    let header_key = match headers.get(IDEMPOTENCY_HEADER) {
        None => None,
        Some(v) => Some(
            v.to_str()
                .map_err(|_| {
                    ApiError::new(
                        StatusCode::BAD_REQUEST,
                        "malformed_header",
                        "idempotency key is not text",
                    )
                })?
                .to_string(),
        ),
    };
    let key = match (header_key, sub.idempotency_key.clone()) {
        (Some(h), Some(b)) if h != b => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "malformed_body",
                "idempotency key differs between header and body",
            ))
        }
        (h, b) => h.or(b),
    };
    if key.as_deref().is_some_and(str::is_empty) {
        return Err(violation("idempotency_key", "must not be empty"));
    }

    let s = state.current();
    let Some(refs) = s.references.get(&sub.case_id) else {
        return Err(violation(
            "case_id",
            format!("unknown case {}", sub.case_id),
        ));
    };
    let dose = match (&refs.patient_id, refs.bin_index) {
        (Some(pid), Some(bin)) => {
            let r = s
                .patient(pid)
                .and_then(|p| p.position_of_bin(bin).map(|t| &p.timesteps[t]))
                .ok_or_else(|| {
                    ApiError::internal(format!("case {} points at a missing timestep", sub.case_id))
                })?;
            DoseContext {
                fluid_zero: r.fluid_dose == 0.0,
                vaso_zero: r.vaso_dose == 0.0,
            }
        }
        _ => refs.dose,
    };
    let record = DecisionRecord {
        schema_version: DECISION_SCHEMA_VERSION,
        record_id: uuid::Uuid::new_v4().to_string(),
        participant_id: sub.participant_id,
        role: sub.role,
        years_experience: sub.years_experience,
        case_id: sub.case_id,
        condition: sub.condition,
        fluid_choice: sub.fluid_choice,
        vaso_choice: sub.vaso_choice,
        likert: sub.likert,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        supersedes: sub.supersedes,
        idempotency_key: key,
    };
    if let Err(v) = record.validate(dose) {
        return Err(violations(StatusCode::UNPROCESSABLE_ENTITY, v));
    }
    let (status, record, created) = match state.log().append(record).await {
        Ok(Appended::Created(r)) => (StatusCode::CREATED, r, true),
        Ok(Appended::Replayed(r)) => (StatusCode::OK, r, false),
        Err(e @ LogError::KeyConflict(_)) => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "idempotency_conflict",
                e.to_string(),
            ))
        }
        Err(e @ (LogError::UnknownSupersedes(_) | LogError::ForeignSupersedes(_))) => {
            return Err(violation("supersedes", e.to_string()))
        }
        Err(e) => return Err(ApiError::internal(e.to_string())),
    };
    Ok((
        status,
        Json(json!({ "schema_version": API_VERSION, "created": created, "record": record })),
    )
        .into_response())
}

async fn study_report(
    State(state): State<Arc<AppState>>,
    q: Result<Query<Vec<(String, String)>>, QueryRejection>,
) -> ApiResult<Response> {
    let mut errs = Vec::new();
    let (mut text, mut alpha, mut method) = (false, 0.05, IntervalMethod::Normal);
    for (k, v) in query_pairs(q)? {
        match k.as_str() {
            "format" => match v.as_str() {
                "json" => text = false,
                "text" => text = true,
                _ => errs.push(FieldError {
                    field: k,
                    message: "expected json or text".into(),
                }),
            },
            "alpha" => match v.parse::<f64>() {
                Ok(a) if a > 0.0 && a < 1.0 => alpha = a,
                _ => errs.push(FieldError {
                    field: k,
                    message: "expected a number in (0, 1)".into(),
                }),
            },
            "interval" => match v.as_str() {
                "normal" => method = IntervalMethod::Normal,
                "wilson" => method = IntervalMethod::Wilson,
                _ => errs.push(FieldError {
                    field: k,
                    message: "expected normal or wilson".into(),
                }),
            },
            _ => errs.push(FieldError {
                field: k,
                message: "unknown parameter".into(),
            }),
        }
    }
    if !errs.is_empty() {
        return Err(ApiError::bad_fields(errs));
    }
    let log = state.log().snapshot().await;
    let s = state.current();
    let report = blocking(move || analyze(&log, &s.references, alpha, method))
        .await?
        .map_err(|e| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "analysis_failed",
                e.to_string(),
            )
        })?;
    Ok(if text {
        (
            [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
            report.to_text(),
        )
            .into_response()
    } else {
        Json(report).into_response()
    })
}

/// Case ids with their presented timestep; reference decisions stay private.
async fn study_cases(State(state): State<Arc<AppState>>) -> Json<Value> {
    let s = state.current();
    let cases: Vec<Value> = s
        .references
        .iter()
        .map(|(id, r)| {
            json!({
                "case_id": id,
                "patient_id": r.patient_id,
                "bin_index": r.bin_index,
                "pseudonym": r.patient_id.as_ref().and_then(|p| s.pseudonyms.get(p)),
            })
        })
        .collect();
    Json(json!({ "schema_version": API_VERSION, "cases": cases }))
}
