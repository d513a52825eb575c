//! HTTP edit service.
//!
//! Rasters travel as base64 PNG strings inside JSON bodies: slices and edits
//! as 16-bit grayscale, sketches and masks as 8-bit with 0 background and
//! 255 stroke.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use skedit_core::bundle::{ModelBundle, ModelVersions};
use skedit_core::data::{list_record_dirs, Modality, RecordMeta, META_FILE};
use skedit_core::edit::EditOptions;
use skedit_core::ldm::SamplerConfig;
use skedit_core::metrics::{nrmse, psnr, ssim};
use skedit_core::{png_io, Error as CoreError, Image};

pub const DEFAULT_PORT: u16 = 8787;
pub const VERSIONS_HEADER: &str = "x-model-versions";

pub struct AppState {
    pub models: Option<ModelBundle<f32>>,
    pub versions: ModelVersions,
    pub data_root: Option<PathBuf>,
    pub edit_defaults: EditOptions,
    pub save_dir: Option<PathBuf>,
}

impl AppState {
    /// Loads whatever checkpoints `model_dir` holds; a partial set leaves the
    /// service up but unhealthy.
    pub fn load(model_dir: &Path, data_root: Option<PathBuf>, edit_defaults: EditOptions) -> Self {
        let versions = ModelVersions::scan(model_dir);
        let models = match ModelBundle::load(model_dir) {
            Ok(m) => Some(m),
            Err(e) => {
                tracing::warn!("models unavailable: {e}");
                None
            }
        };
        Self {
            models,
            versions,
            data_root,
            edit_defaults,
            save_dir: None,
        }
    }
}

type Shared = Arc<AppState>;

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    incident_id: Option<String>,
    model_versions: &'a ModelVersions,
}

fn error(st: &AppState, status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    let incident_id = (status == StatusCode::INTERNAL_SERVER_ERROR).then(|| uuid::Uuid::new_v4().to_string());
    let message = message.into();
    if let Some(id) = &incident_id {
        tracing::error!("incident {id}: {message}");
    }
    let body = ErrorBody {
        error: code,
        message,
        incident_id,
        model_versions: &st.versions,
    };
    (status, Json(body)).into_response()
}

fn bad_request(st: &AppState, message: impl Into<String>) -> Response {
    error(st, StatusCode::BAD_REQUEST, "bad_request", message)
}

fn core_error(st: &AppState, e: CoreError) -> Response {
    match e {
        CoreError::OpenContour => error(st, StatusCode::UNPROCESSABLE_ENTITY, "open_contour", e.to_string()),
        CoreError::ShapeMismatch { .. } | CoreError::Png(_) => bad_request(st, e.to_string()),
        other => error(st, StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
    }
}

pub fn b64_png(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn decode_b64_png(s: &str) -> Result<Image, String> {
    let bytes = B64.decode(s.trim()).map_err(|e| format!("invalid base64: {e}"))?;
    png_io::decode_gray(&bytes).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub id: String,
    pub slices: usize,
    pub spacing: [f64; 3],
    pub modality: Modality,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineRequest {
    pub volume_id: Option<String>,
    pub slice_index: Option<usize>,
    /// Base64 8-bit PNG.
    pub sketch: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineResponse {
    /// Soft refiner output, 8-bit PNG.
    pub soft: String,
    /// Thresholded sketch, 8-bit {0, 255} PNG.
    pub binary: String,
    pub model_versions: ModelVersions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub volume_id: String,
    pub slice_index: usize,
    pub sketch: String,
    pub spacing: [f64; 3],
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sampler_steps: Option<usize>,
    /// Base64 16-bit PNG replacing the stored slice, for chained edits.
    #[serde(default)]
    pub base_image: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EditMetrics {
    pub nrmse: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResponse {
    /// 16-bit PNG.
    pub edited: String,
    pub interior_mask: String,
    /// 16-bit PNG.
    pub reference_map: String,
    /// 8-bit PNG of `|edited - source| / difference_scale`.
    pub difference_map: String,
    pub difference_scale: f64,
    pub metrics: EditMetrics,
    pub seed: u64,
    pub model_versions: ModelVersions,
}

fn volume_dir(st: &AppState, id: &str) -> Option<PathBuf> {
    let root = st.data_root.as_ref()?;
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return None;
    }
    let dir = root.join(id);
    dir.join(META_FILE).is_file().then_some(dir)
}

fn slice_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("slice_{k:04}.png"))
}

fn parse_json<T: for<'de> Deserialize<'de>>(st: &AppState, body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| bad_request(st, format!("invalid request body: {e}")))
}

async fn health(State(st): State<Shared>) -> Response {
    let (status, text) = if st.models.is_some() {
        (StatusCode::OK, "ok")
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, "unavailable")
    };
    let body = json!({
        "status": text,
        "missing": st.versions.missing(),
        "model_versions": st.versions,
    });
    (status, Json(body)).into_response()
}

async fn volumes(State(st): State<Shared>) -> Response {
    let Some(root) = &st.data_root else {
        return error(&st, StatusCode::NOT_FOUND, "no_dataset", "no dataset mounted");
    };
    let dirs = match list_record_dirs(root) {
        Ok(d) => d,
        Err(e) => return core_error(&st, e),
    };
    let mut out = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let meta: RecordMeta = match std::fs::read(dir.join(META_FILE))
            .map_err(CoreError::from)
            .and_then(|b| serde_json::from_slice(&b).map_err(CoreError::from))
        {
            Ok(m) => m,
            Err(e) => return core_error(&st, e),
        };
        let slices = (0..).take_while(|&k| slice_path(&dir, k).is_file()).count();
        out.push(VolumeInfo {
            id: meta.id,
            slices,
            spacing: meta.spacing.0,
            modality: meta.modality,
        });
    }
    Json(json!({ "volumes": out, "model_versions": st.versions })).into_response()
}

async fn slice(State(st): State<Shared>, UrlPath((id, k)): UrlPath<(String, usize)>) -> Response {
    let Some(dir) = volume_dir(&st, &id) else {
        return error(&st, StatusCode::NOT_FOUND, "not_found", format!("unknown volume {id}"));
    };
    match std::fs::read(slice_path(&dir, k)) {
        Ok(bytes) => {
            let versions = serde_json::to_string(&st.versions).unwrap_or_default();
            let mut resp = ([(header::CONTENT_TYPE, "image/png")], bytes).into_response();
            if let Ok(v) = HeaderValue::from_str(&versions) {
                resp.headers_mut().insert(VERSIONS_HEADER, v);
            }
            resp
        }
        Err(_) => error(&st, StatusCode::NOT_FOUND, "not_found", format!("volume {id} has no slice {k}")),
    }
}

fn load_slice(st: &AppState, id: &str, k: usize) -> Result<Image, Response> {
    let dir = volume_dir(st, id).ok_or_else(|| error(st, StatusCode::NOT_FOUND, "not_found", format!("unknown volume {id}")))?;
    let path = slice_path(&dir, k);
    if !path.is_file() {
        return Err(error(st, StatusCode::NOT_FOUND, "not_found", format!("volume {id} has no slice {k}")));
    }
    skedit_core::data::read_slice_png(&path).map_err(|e| core_error(st, e))
}

fn check_dims(st: &AppState, sketch: &Image, dims: (usize, usize)) -> Result<(), Response> {
    if sketch.dims() != dims {
        return Err(bad_request(
            st,
            format!("sketch is {:?}, slice is {:?}", sketch.dims(), dims),
        ));
    }
    Ok(())
}

async fn refine(State(st): State<Shared>, body: Bytes) -> Response {
    let req: RefineRequest = match parse_json(&st, &body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    if st.models.is_none() {
        return error(&st, StatusCode::SERVICE_UNAVAILABLE, "models_unavailable", "checkpoints not loaded");
    }
    let sketch = match decode_b64_png(&req.sketch) {
        Ok(s) => s,
        Err(m) => return bad_request(&st, m),
    };
    match (&req.volume_id, req.slice_index) {
        (Some(id), Some(k)) => {
            let img = match load_slice(&st, id, k) {
                Ok(i) => i,
                Err(r) => return r,
            };
            if let Err(r) = check_dims(&st, &sketch, img.dims()) {
                return r;
            }
        }
        (None, None) => {}
        _ => return bad_request(&st, "volume_id and slice_index go together"),
    }
    let st2 = st.clone();
    let out = tokio::task::spawn_blocking(move || {
        let models = st2.models.as_ref().expect("checked above");
        let (soft, bin) = models.refiner.refine(&sketch)?;
        Ok::<_, CoreError>((png_io::encode_gray8(&soft)?, png_io::encode_mask(&bin)?))
    })
    .await;
    match out {
        Ok(Ok((soft, bin))) => Json(RefineResponse {
            soft: b64_png(&soft),
            binary: b64_png(&bin),
            model_versions: st.versions.clone(),
        })
        .into_response(),
        Ok(Err(e)) => core_error(&st, e),
        Err(e) => error(&st, StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

/// Difference raster scaled into [0, 1] and the divisor used.
pub fn scale_difference(diff: &Image) -> (Image, f64) {
    let max = diff.data().iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
    let scale = if max > 0.0 { max } else { 1.0 };
    (diff.map(|v| (v as f64 / scale) as f32), scale)
}

fn compute_edit(st: &AppState, models: &ModelBundle<f32>, req: EditRequest, source: Image, sketch: Image) -> Result<EditResponse, CoreError> {
    let mut opts = st.edit_defaults;
    opts.seed = req.seed.unwrap_or(opts.seed);
    if let Some(steps) = req.sampler_steps {
        opts.sampler = SamplerConfig { steps, ..opts.sampler };
    }
    let r = models.edit(&source, &sketch, req.spacing, &opts)?;
    let (diff, scale) = scale_difference(&r.difference);
    let edited_png = png_io::encode_gray16(&r.edited)?;
    if let Some(dir) = &st.save_dir {
        std::fs::create_dir_all(dir)?;
        let name = format!("{}_{:04}_seed{}.png", req.volume_id, req.slice_index, opts.seed);
        std::fs::write(dir.join(name), &edited_png)?;
    }
    Ok(EditResponse {
        edited: b64_png(&edited_png),
        interior_mask: b64_png(&png_io::encode_mask(r.interior.pixels())?),
        reference_map: b64_png(&png_io::encode_gray16(&r.reference)?),
        difference_map: b64_png(&png_io::encode_gray8(&diff)?),
        difference_scale: scale,
        metrics: EditMetrics {
            nrmse: nrmse(&source, &r.edited).ok().map(f64::from),
            ssim: ssim(&source, &r.edited).ok().map(f64::from),
            psnr: psnr(&source, &r.edited).ok().map(f64::from),
        },
        seed: opts.seed,
        model_versions: st.versions.clone(),
    })
}

async fn edit(State(st): State<Shared>, body: Bytes) -> Response {
    let req: EditRequest = match parse_json(&st, &body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    if st.models.is_none() {
        return error(&st, StatusCode::SERVICE_UNAVAILABLE, "models_unavailable", "checkpoints not loaded");
    }
    if !req.spacing.iter().all(|v| v.is_finite() && *v > 0.0) {
        return bad_request(&st, "spacing components must be positive");
    }
    let max_steps = st.models.as_ref().map_or(0, |m| m.ldm.schedule.len());
    if let Some(steps) = req.sampler_steps.filter(|&s| s == 0 || s > max_steps) {
        return bad_request(&st, format!("sampler_steps {steps} outside 1..={max_steps}"));
    }
    let sketch = match decode_b64_png(&req.sketch) {
        Ok(s) => s,
        Err(m) => return bad_request(&st, m),
    };
    let stored = match load_slice(&st, &req.volume_id, req.slice_index) {
        Ok(i) => i,
        Err(r) => return r,
    };
    let source = match &req.base_image {
        Some(b) => match decode_b64_png(b) {
            Ok(img) if img.dims() == stored.dims() => img,
            Ok(_) => return bad_request(&st, "base_image dimensions differ from the slice"),
            Err(m) => return bad_request(&st, m),
        },
        None => stored,
    };
    if let Err(r) = check_dims(&st, &sketch, source.dims()) {
        return r;
    }
    let st2 = st.clone();
    let out = tokio::task::spawn_blocking(move || {
        let models = st2.models.as_ref().expect("checked above");
        compute_edit(&st2, models, req, source, sketch)
    })
    .await;
    match out {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => core_error(&st, e),
        Err(e) => error(&st, StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/volumes", get(volumes))
        .route("/api/volumes/{id}/slices/{k}", get(slice))
        .route("/api/refine", post(refine))
        .route("/api/edit", post(edit))
        .layer(CorsLayer::permissive())
        .with_state(Arc::new(state))
}

pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
