use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::Engine;
use imagerep_core::analysis::{analyze as run_analysis, effective_model, AnalysisMethod, AnalysisOptions, RepresentativityReport};
use imagerep_core::image::{load_image, FormatHint};
use imagerep_core::uncertainty::{required_size_for, SizeRecommendation};
use imagerep_core::{Error, PhaseFraction};
use serde::{Deserialize, Serialize};

use crate::AppState;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    /// Base64-encoded PNG, TIFF or raw bytes.
    pub image: String,
    #[serde(default)]
    pub format: Option<String>,
    #[serde(default)]
    pub dims: Option<Vec<usize>>,
    #[serde(default)]
    pub phase: Option<u8>,
    #[serde(default)]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub target_pct: Option<f64>,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub calibration: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub decode_ms: f64,
    pub analysis_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResponse {
    #[serde(flatten)]
    pub report: RepresentativityReport,
    pub calibration_id: String,
    pub timings: Timings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequiredSizeRequest {
    pub cls: f64,
    pub dims: Vec<usize>,
    pub phi_obs: f64,
    #[serde(default)]
    pub confidence: Option<f64>,
    pub target_pct: f64,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub calibration: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub calibrations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub(crate) struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidArgument", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::DegeneratePhaseFraction(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Numerical(_) | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn body_error(status: StatusCode, text: String) -> ApiError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "PayloadTooLarge", text)
    } else {
        ApiError::bad(text)
    }
}

fn parse_dims(text: &str) -> Result<Vec<usize>, ApiError> {
    let text = text.trim().trim_start_matches('[').trim_end_matches(']');
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| ApiError::bad(format!("bad dims '{text}'"))))
        .collect()
}

fn parse_field<T: FromStr>(name: &str, text: &str) -> Result<T, ApiError> {
    text.trim()
        .parse()
        .map_err(|_| ApiError::bad(format!("bad value for '{name}': '{text}'")))
}

/// Collects a multipart form into the JSON request shape plus raw bytes.
async fn read_multipart(mut form: Multipart) -> Result<(AnalyzeRequest, Vec<u8>), ApiError> {
    let mut req = AnalyzeRequest::default();
    let mut image: Option<Vec<u8>> = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| body_error(e.status(), e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| body_error(e.status(), e.body_text()))?;
        if name == "image" {
            if image.is_some() {
                return Err(ApiError::bad("exactly one image part is allowed"));
            }
            image = Some(data.to_vec());
            continue;
        }
        let text = String::from_utf8(data.to_vec()).map_err(|_| ApiError::bad(format!("field '{name}' is not UTF-8")))?;
        match name.as_str() {
            "format" => req.format = Some(text),
            "dims" => req.dims = Some(parse_dims(&text)?),
            "phase" => req.phase = Some(parse_field("phase", &text)?),
            "confidence" => req.confidence = Some(parse_field("confidence", &text)?),
            "target_pct" => req.target_pct = Some(parse_field("target_pct", &text)?),
            "method" => req.method = Some(text),
            "calibration" => req.calibration = Some(text),
            other => return Err(ApiError::bad(format!("unknown field '{other}'"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::bad("missing image part"))?;
    Ok((req, image))
}

async fn read_json<T: serde::de::DeserializeOwned>(req: Request) -> Result<T, ApiError> {
    let bytes = Bytes::from_request(req, &())
        .await
        .map_err(|e| body_error(e.status(), e.body_text()))?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::bad(format!("invalid JSON body: {e}")))
}

fn method_of(text: Option<&str>) -> Result<AnalysisMethod, ApiError> {
    Ok(text.map(AnalysisMethod::from_str).transpose()?.unwrap_or_default())
}

pub(crate) async fn analyze(State(state): State<Arc<AppState>>, req: Request) -> Result<Json<AnalysisResponse>, ApiError> {
    let start = Instant::now();
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (params, bytes) = if multipart {
        let form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad(e.body_text()))?;
        read_multipart(form).await?
    } else {
        let mut params: AnalyzeRequest = read_json(req).await?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(std::mem::take(&mut params.image).trim())
            .map_err(|e| ApiError::bad(format!("image is not valid base64: {e}")))?;
        (params, bytes)
    };
    let hint = match params.format.as_deref() {
        Some(f) => FormatHint::from_str(f)?,
        None => FormatHint::Auto,
    };
    let options = AnalysisOptions {
        phase: params.phase,
        confidence: params.confidence.unwrap_or(0.95),
        target_pct: params.target_pct,
        method: method_of(params.method.as_deref())?,
        ..Default::default()
    };
    let calibrations = state.calibrations();
    let calibration = params.calibration.clone();

    let (report, id, decode_ms, analysis_ms) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let t0 = Instant::now();
        let img = load_image(&bytes, hint, params.dims.as_deref())?;
        let decode_ms = t0.elapsed().as_secs_f64() * 1e3;
        let (id, model) = calibrations.resolve(calibration.as_deref(), img.domain().ndim())?;
        let t1 = Instant::now();
        let report = run_analysis(&img, &options, model)?;
        Ok((report, id, decode_ms, t1.elapsed().as_secs_f64() * 1e3))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;

    Ok(Json(AnalysisResponse {
        report,
        calibration_id: id,
        timings: Timings {
            decode_ms,
            analysis_ms,
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    }))
}

pub(crate) async fn required_size(State(state): State<Arc<AppState>>, req: Request) -> Result<Json<SizeRecommendation>, ApiError> {
    let body: RequiredSizeRequest = read_json(req).await?;
    let ndim = body.dims.len();
    if !(ndim == 2 || ndim == 3) || body.dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidDimensions(format!("dims {:?} must be 2 or 3 positive edges", body.dims)).into());
    }
    let method = method_of(body.method.as_deref())?;
    let calibrations = state.calibrations();
    let (_, model) = calibrations.resolve(body.calibration.as_deref(), ndim)?;
    let volume = body.dims.iter().product::<usize>() as f64;
    let rec = required_size_for(
        body.cls,
        ndim,
        volume,
        PhaseFraction::new(body.phi_obs)?,
        body.confidence.unwrap_or(0.95),
        body.target_pct,
        effective_model(method, model),
    )?;
    Ok(Json(rec))
}

fn health_of(state: &AppState) -> Health {
    Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        calibrations: state.calibrations().ids(),
    }
}

pub(crate) async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(health_of(&state))
}

pub(crate) async fn reload(State(state): State<Arc<AppState>>) -> Result<Json<Health>, ApiError> {
    let st = state.clone();
    tokio::task::spawn_blocking(move || st.reload())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok(Json(health_of(&state)))
}
