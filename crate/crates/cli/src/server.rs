//! Read-only HTTP service over a loaded fit.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mvemu::emulator::FittedEmulator;
use mvemu::rng::Seed;
use mvemu::schema::{Point, RawValue, VariableKind};
use mvemu::sensitivity::{conditional_effect, default_grid, EmulatorSurface, InputDistribution, SensitivityResult};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::commands::{RunContext, ServeArgs};
use crate::error::{CliError, CliResult};
use crate::fitfile::load_fit;
use crate::io::read_json;

pub const DEFAULT_EFFECT_MC: usize = 2_000;
const MAX_EFFECT_MC: usize = 1_000_000;

pub struct AppState {
    pub fit: FittedEmulator,
    pub sensitivity: Option<SensitivityResult>,
    pub seed: u64,
    pub effect_mc: usize,
}

#[derive(Debug, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Error response: 400 for schema violations, 422 for out-of-range values.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub errors: Vec<FieldError>,
}

impl ApiError {
    fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            errors: vec![FieldError {
                field: field.into(),
                message: message.into(),
            }],
        }
    }

    fn internal(message: String) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            errors: vec![FieldError {
                field: String::new(),
                message,
            }],
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = match self.status {
            StatusCode::BAD_REQUEST => "schema",
            StatusCode::UNPROCESSABLE_ENTITY => "out-of-range",
            StatusCode::NOT_FOUND => "not-found",
            _ => "internal",
        };
        (self.status, Json(json!({ "error": kind, "errors": self.errors }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/predict", post(predict))
        .route("/predict-batch", post(predict_batch))
        .route("/conditional-effect", post(effect))
        .route("/sensitivity", get(sensitivity))
        .with_state(state)
}

pub fn serve(a: &ServeArgs, ctx: RunContext) -> CliResult<()> {
    let state = Arc::new(AppState {
        fit: load_fit(&a.fit)?,
        sensitivity: a.sensitivity.as_deref().map(read_json).transpose()?,
        seed: ctx.seed,
        effect_mc: ctx.mc_size.unwrap_or(DEFAULT_EFFECT_MC),
    });
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
        eprintln!("serving on http://{addr}");
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::Usage(format!("server error: {e}")))
    })
}

async fn schema(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(serde_json::to_value(st.fit.schema()).expect("schema serializes"))
}

async fn sensitivity(State(st): State<Arc<AppState>>) -> Result<Json<SensitivityResult>, ApiError> {
    st.sensitivity.clone().map(Json).ok_or(ApiError {
        status: StatusCode::NOT_FOUND,
        errors: vec![FieldError {
            field: String::new(),
            message: "no sensitivity result loaded; run `mvemu sensitivity` and restart with --sensitivity".into(),
        }],
    })
}

fn parse_body(body: &Bytes) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::schema("", format!("invalid JSON: {e}")))
}

fn object<'a>(v: &'a Value, field: &str) -> Result<&'a serde_json::Map<String, Value>, ApiError> {
    v.as_object().ok_or_else(|| ApiError::schema(field, "expected a JSON object"))
}

/// Converts one JSON value for variable `user` into a raw value.
fn raw_value(st: &AppState, user: usize, v: &Value, field: &str) -> Result<RawValue, ApiError> {
    let var = &st.fit.variables().variables()[user];
    match (&var.kind, v) {
        (VariableKind::Continuous { .. }, Value::Number(n)) => Ok(RawValue::Number(n.as_f64().unwrap_or(f64::NAN))),
        (VariableKind::Continuous { .. }, _) => Err(ApiError::schema(field, "expected a number")),
        (VariableKind::Categorical { levels }, Value::String(s)) if levels.contains(s) => Ok(RawValue::Level(s.clone())),
        (VariableKind::Categorical { levels }, Value::Number(n)) if levels.contains(&n.to_string()) => {
            Ok(RawValue::Level(n.to_string()))
        }
        (VariableKind::Categorical { levels }, _) => Err(ApiError::schema(
            field,
            format!("expected one of the levels {}", levels.join(", ")),
        )),
    }
}

/// Parses an input given as an array in schema order or an object keyed by name.
/// Every problem is reported; schema problems take precedence over range problems.
fn parse_input(st: &AppState, v: &Value, field: &str) -> Result<Point, ApiError> {
    let vars = st.fit.variables();
    let names: Vec<&str> = vars.variables().iter().map(|v| v.name.as_str()).collect();
    let mut schema_errs = Vec::new();
    let mut raw = Vec::with_capacity(names.len());
    match v {
        Value::Array(items) => {
            if items.len() != names.len() {
                return Err(ApiError::schema(
                    field,
                    format!("expected {} values ({}), got {}", names.len(), names.join(", "), items.len()),
                ));
            }
            for (u, item) in items.iter().enumerate() {
                match raw_value(st, u, item, &format!("{field}[{u}]")) {
                    Ok(r) => raw.push(r),
                    Err(e) => schema_errs.extend(e.errors),
                }
            }
        }
        Value::Object(map) => {
            for k in map.keys().filter(|k| !names.contains(&k.as_str())) {
                schema_errs.push(FieldError {
                    field: format!("{field}.{k}"),
                    message: "unknown variable".into(),
                });
            }
            for (u, name) in names.iter().enumerate() {
                let f = format!("{field}.{name}");
                match map.get(*name) {
                    None => schema_errs.push(FieldError {
                        field: f,
                        message: "missing".into(),
                    }),
                    Some(item) => match raw_value(st, u, item, &f) {
                        Ok(r) => raw.push(r),
                        Err(e) => schema_errs.extend(e.errors),
                    },
                }
            }
        }
        _ => return Err(ApiError::schema(field, "expected an array or an object of input values")),
    }
    if !schema_errs.is_empty() {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            errors: schema_errs,
        });
    }
    let mut range_errs = Vec::new();
    for (u, r) in raw.iter().enumerate() {
        if let (VariableKind::Continuous { range: [lo, hi] }, RawValue::Number(x)) = (&vars.variables()[u].kind, r) {
            if !(x >= lo && x <= hi) {
                range_errs.push(FieldError {
                    field: format!("{field}.{}", names[u]),
                    message: format!("{x} outside [{lo}, {hi}]"),
                });
            }
        }
    }
    if !range_errs.is_empty() {
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            errors: range_errs,
        });
    }
    vars.to_point(&raw).map_err(|e| ApiError::schema(field, e.to_string()))
}

fn level_of(body: &Value) -> Result<f64, ApiError> {
    match body.get("level") {
        None | Some(Value::Null) => Ok(0.95),
        Some(v) => match v.as_f64() {
            Some(l) if l > 0.0 && l < 1.0 => Ok(l),
            _ => Err(ApiError::schema("level", "expected a number in (0, 1)")),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub outputs: Vec<String>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub scale: Vec<f64>,
    pub dof: f64,
    pub level: f64,
}

fn predictions(st: &AppState, points: &[Point], level: f64) -> Result<Vec<PredictResponse>, ApiError> {
    let marg = st
        .fit
        .predict_marginals(points)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((0..points.len())
        .map(|u| {
            let mut r = PredictResponse {
                outputs: st.fit.schema().outputs.clone(),
                mean: Vec::new(),
                lower: Vec::new(),
                upper: Vec::new(),
                scale: Vec::new(),
                dof: marg.dof,
                level,
            };
            for s in 0..st.fit.k() {
                let t = marg.marginal(u, s);
                let (lo, hi) = t.interval(level);
                r.mean.push(t.location);
                r.lower.push(lo);
                r.upper.push(hi);
                r.scale.push(t.scale());
            }
            r
        })
        .collect())
}

async fn predict(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<PredictResponse> {
    let body = parse_body(&body)?;
    object(&body, "")?;
    let level = level_of(&body)?;
    let input = body.get("inputs").ok_or_else(|| ApiError::schema("inputs", "missing"))?;
    let x = parse_input(&st, input, "inputs")?;
    Ok(Json(predictions(&st, &[x], level)?.remove(0)))
}

#[derive(Debug, Serialize)]
pub struct BatchResponse {
    pub predictions: Vec<PredictResponse>,
}

async fn predict_batch(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<BatchResponse> {
    let body = parse_body(&body)?;
    object(&body, "")?;
    let level = level_of(&body)?;
    let items = body
        .get("inputs")
        .and_then(Value::as_array)
        .ok_or_else(|| ApiError::schema("inputs", "expected an array of inputs"))?;
    let mut points = Vec::with_capacity(items.len());
    let mut worst: Option<ApiError> = None;
    for (i, item) in items.iter().enumerate() {
        match parse_input(&st, item, &format!("inputs[{i}]")) {
            Ok(x) => points.push(x),
            Err(e) => match &mut worst {
                Some(w) if w.status == e.status => w.errors.extend(e.errors),
                Some(w) if w.status == StatusCode::UNPROCESSABLE_ENTITY && e.status == StatusCode::BAD_REQUEST => {
                    *w = e
                }
                Some(_) => {}
                None => worst = Some(e),
            },
        }
    }
    if let Some(e) = worst {
        return Err(e);
    }
    Ok(Json(BatchResponse {
        predictions: predictions(&st, &points, level)?,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectResponse {
    pub variable: String,
    pub conditioning: BTreeMap<String, Value>,
    /// Grid in raw units (numbers or level names).
    pub grid: Vec<Value>,
    pub effect: Vec<f64>,
    pub se: Vec<f64>,
    /// Monte Carlo band `effect -/+ 1.96 se`.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
}

/// Internal coordinate of a raw JSON value for variable `name`.
fn internal_of(st: &AppState, name: &str, v: &Value, field: &str) -> Result<f64, ApiError> {
    let vars = st.fit.variables();
    let i = vars
        .internal_index(name)
        .ok_or_else(|| ApiError::schema(field, format!("unknown variable `{name}`")))?;
    let user = vars.user_index(i);
    let raw = raw_value(st, user, v, field)?;
    match (&vars.variable(i).kind, raw) {
        (VariableKind::Continuous { range: [lo, hi] }, RawValue::Number(x)) => {
            if !(x >= *lo && x <= *hi) {
                return Err(ApiError {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    errors: vec![FieldError {
                        field: field.into(),
                        message: format!("{x} outside [{lo}, {hi}]"),
                    }],
                });
            }
            Ok(((x - lo) / (hi - lo)).clamp(0.0, 1.0))
        }
        (VariableKind::Categorical { levels }, RawValue::Level(l)) => {
            Ok(levels.iter().position(|x| *x == l).unwrap_or(0) as f64)
        }
        _ => Err(ApiError::schema(field, "value does not match the variable kind")),
    }
}

fn raw_json(st: &AppState, name: &str, internal: f64) -> Value {
    let vars = st.fit.variables();
    let i = vars.internal_index(name).unwrap_or(0);
    match &vars.variable(i).kind {
        VariableKind::Continuous { range: [lo, hi] } => json!(lo + internal * (hi - lo)),
        VariableKind::Categorical { levels } => json!(levels[internal as usize]),
    }
}

async fn effect(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<EffectResponse> {
    let body = parse_body(&body)?;
    object(&body, "")?;
    let variable = body
        .get("variable")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::schema("variable", "expected a variable name"))?
        .to_string();
    if st.fit.variables().internal_index(&variable).is_none() {
        return Err(ApiError::schema("variable", format!("unknown variable `{variable}`")));
    }
    let mut fixed = Vec::new();
    let mut conditioning = BTreeMap::new();
    if let Some(c) = body.get("conditioning").filter(|v| !v.is_null()) {
        for (name, v) in object(c, "conditioning")? {
            fixed.push((name.clone(), internal_of(&st, name, v, &format!("conditioning.{name}"))?));
            conditioning.insert(name.clone(), v.clone());
        }
    }
    let grid = match body.get("grid").filter(|v| !v.is_null()) {
        None => default_grid(st.fit.variables(), &variable).map_err(|e| ApiError::schema("variable", e.to_string()))?,
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(g, v)| internal_of(&st, &variable, v, &format!("grid[{g}]")))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(ApiError::schema("grid", "expected an array of raw values")),
    };
    let n_mc = match body.get("n_mc").filter(|v| !v.is_null()) {
        None => st.effect_mc,
        Some(v) => match v.as_u64() {
            Some(n) if n >= 2 && n as usize <= MAX_EFFECT_MC => n as usize,
            _ => return Err(ApiError::schema("n_mc", format!("expected an integer in [2, {MAX_EFFECT_MC}]"))),
        },
    };
    let seed = match body.get("seed").filter(|v| !v.is_null()) {
        None => st.seed,
        Some(v) => v.as_u64().ok_or_else(|| ApiError::schema("seed", "expected a non-negative integer"))?,
    };
    let st2 = st.clone();
    let grid2 = grid.clone();
    let var2 = variable.clone();
    let curve = tokio::task::spawn_blocking(move || {
        let dist = InputDistribution::uniform(st2.fit.variables());
        let surface = EmulatorSurface::plugin(&st2.fit);
        conditional_effect(&surface, &dist, &var2, &fixed, &grid2, n_mc, Seed(seed).named("effects", 0))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::schema("conditioning", e.to_string()))?;
    Ok(Json(EffectResponse {
        grid: grid.iter().map(|g| raw_json(&st, &variable, *g)).collect(),
        lower: curve.effect.iter().zip(&curve.se).map(|(e, s)| e - 1.96 * s).collect(),
        upper: curve.effect.iter().zip(&curve.se).map(|(e, s)| e + 1.96 * s).collect(),
        effect: curve.effect,
        se: curve.se,
        variable,
        conditioning,
        n_mc,
        seed,
    }))
}
