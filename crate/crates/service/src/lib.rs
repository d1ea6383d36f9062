//! HTTP front end for the representativity pipeline.
//!
//! Routes:
//! - `POST /api/analyze`: JSON with a base64 `image`, or multipart with an `image` file part
//! - `POST /api/required-size`
//! - `GET /api/health`
//! - `POST /api/admin/reload-calibration`

mod api;
mod calibrations;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::CorsLayer;
use tower_http::timeout::TimeoutLayer;

pub use api::{AnalysisResponse, AnalyzeRequest, ErrorBody, Health, RequiredSizeRequest, Timings};
pub use calibrations::CalibrationSet;

pub const DEFAULT_MAX_BODY: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Directory of `*.json` calibration models; file stems become ids.
    pub calibration_dir: Option<PathBuf>,
    pub max_body_bytes: usize,
    pub request_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            calibration_dir: None,
            max_body_bytes: DEFAULT_MAX_BODY,
            request_timeout: Duration::from_secs(120),
        }
    }
}

pub struct AppState {
    config: ServiceConfig,
    calibrations: RwLock<Arc<CalibrationSet>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> imagerep_core::Result<Self> {
        let set = CalibrationSet::load(config.calibration_dir.as_deref())?;
        Ok(Self {
            config,
            calibrations: RwLock::new(Arc::new(set)),
        })
    }

    /// The current calibration snapshot; requests keep theirs across a reload.
    pub fn calibrations(&self) -> Arc<CalibrationSet> {
        self.calibrations.read().expect("calibration lock poisoned").clone()
    }

    /// Re-reads the calibration directory and swaps it in whole.
    pub fn reload(&self) -> imagerep_core::Result<Arc<CalibrationSet>> {
        let fresh = Arc::new(CalibrationSet::load(self.config.calibration_dir.as_deref())?);
        *self.calibrations.write().expect("calibration lock poisoned") = fresh.clone();
        Ok(fresh)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    let timeout = state.config.request_timeout;
    Router::new()
        .route("/api/analyze", post(api::analyze))
        .route("/api/required-size", post(api::required_size))
        .route("/api/health", get(api::health))
        .route("/api/admin/reload-calibration", post(api::reload))
        .layer(DefaultBodyLimit::max(limit))
        .layer(TimeoutLayer::new(timeout))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(config).map_err(std::io::Error::other)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
