//! Curation API. State is the loaded manifest with the verdict log replayed
//! on top; every mutation goes through one writer lock, is appended and
//! synced to the log, and only then becomes visible to readers.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{ImageFormat, RgbImage};
use refseg_core::dataset::{
    append_verdict, apply_verdicts, export_view, load_manifest, load_verdict_log, save_manifest,
    verdict_counts, Decision, Manifest, Split, TripletRecord, Verdict, VerdictCounts, VerdictEvent,
};
use refseg_core::exprgen::ExpressionSpan;
use refseg_core::raster::{load_rgb, BinaryMask};
use refseg_core::taxonomy::Taxonomy;
use serde::Serialize;
use tower_http::services::ServeDir;

pub const TINT: [u8; 3] = [255, 0, 0];
pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 1000;

pub struct ServerOptions {
    pub manifest_path: PathBuf,
    pub verdict_log: PathBuf,
    pub taxonomy: Taxonomy,
    pub static_dir: Option<PathBuf>,
    /// Export default when the request does not say.
    pub include_pending: bool,
}

pub struct AppState {
    base_dir: PathBuf,
    manifest_path: PathBuf,
    log_path: PathBuf,
    spans: HashMap<String, Vec<ExpressionSpan>>,
    /// Record indices sorted by id.
    order: Vec<usize>,
    index: HashMap<String, usize>,
    current: RwLock<Manifest>,
    writer: tokio::sync::Mutex<()>,
    include_pending: bool,
    static_dir: Option<PathBuf>,
}

impl AppState {
    /// Loads the manifest and replays the verdict log over it.
    pub fn load(opts: ServerOptions) -> anyhow::Result<Arc<AppState>> {
        let base = load_manifest(&opts.manifest_path)?;
        let log = load_verdict_log(&opts.verdict_log)?;
        let current = apply_verdicts(&base, &log)
            .with_context(|| format!("replaying {}", opts.verdict_log.display()))?;
        let spans = base
            .records
            .iter()
            .map(|r| Ok((r.id.clone(), r.expression.spans(&opts.taxonomy)?)))
            .collect::<anyhow::Result<_>>()?;
        let mut order: Vec<usize> = (0..base.records.len()).collect();
        order.sort_by(|&a, &b| base.records[a].id.cmp(&base.records[b].id));
        let index = base.records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        let base_dir = opts
            .manifest_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(Arc::new(AppState {
            base_dir,
            manifest_path: opts.manifest_path,
            log_path: opts.verdict_log,
            spans,
            order,
            index,
            current: RwLock::new(current),
            writer: tokio::sync::Mutex::new(()),
            include_pending: opts.include_pending,
            static_dir: opts.static_dir,
        }))
    }

    pub fn snapshot(&self) -> Manifest {
        self.current.read().expect("state lock poisoned").clone()
    }

    pub fn stats(&self) -> Stats {
        let (all, splits) = verdict_counts(&self.current.read().expect("state lock poisoned"));
        Stats {
            total: all.total(),
            pending: all.pending,
            keep: all.keep,
            discard: all.discard,
            splits,
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    fn export_path(&self) -> PathBuf {
        let stem = self
            .manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("manifest");
        self.base_dir.join(format!("{stem}.export.jsonl"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub total: usize,
    pub pending: usize,
    pub keep: usize,
    pub discard: usize,
    pub splits: BTreeMap<String, VerdictCounts>,
}

#[derive(Serialize)]
struct TripletView<'a> {
    #[serde(flatten)]
    record: &'a TripletRecord,
    spans: &'a [ExpressionSpan],
}

#[derive(Serialize)]
struct TripletPage<'a> {
    items: Vec<TripletView<'a>>,
    page: usize,
    page_size: usize,
    total: usize,
    total_pages: usize,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self(StatusCode::NOT_FOUND, msg.into())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/triplets", get(list_triplets))
        .route("/api/overlay/{id}", get(overlay))
        .route("/api/verdicts", post(post_verdict))
        .route("/api/export", post(export))
        .route("/api/stats", get(stats));
    let api = match &state.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn parse_positive(q: &HashMap<String, String>, key: &str, default: usize) -> ApiResult<usize> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ApiError::bad_request(format!("{key} must be a positive integer, got {v:?}"))),
        },
    }
}

async fn list_triplets(
    State(st): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let split = match q.get("split").map(String::as_str) {
        None => None,
        Some("unassigned") => Some(None),
        Some(s) => Some(Some(
            Split::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown split {s:?}")))?,
        )),
    };
    let status = match q.get("status") {
        None => None,
        Some(s) => Some(Verdict::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown status {s:?}")))?),
    };
    let page = parse_positive(&q, "page", 1)?;
    let page_size = parse_positive(&q, "page_size", DEFAULT_PAGE_SIZE)?;
    if page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!("page_size is limited to {MAX_PAGE_SIZE}")));
    }

    let current = st.current.read().expect("state lock poisoned");
    let matching: Vec<&TripletRecord> = st
        .order
        .iter()
        .map(|&i| &current.records[i])
        .filter(|r| split.is_none_or(|s| r.split == s) && status.is_none_or(|v| r.verdict == v))
        .collect();
    let total = matching.len();
    let total_pages = total.div_ceil(page_size);
    if page > total_pages.max(1) {
        return Err(ApiError::bad_request(format!("page {page} is past the last page ({total_pages})")));
    }
    let items = matching
        .into_iter()
        .skip((page - 1) * page_size)
        .take(page_size)
        .map(|record| TripletView {
            spans: &st.spans[&record.id],
            record,
        })
        .collect();
    let body = TripletPage {
        items,
        page,
        page_size,
        total,
        total_pages,
    };
    Ok(Json(body).into_response())
}

/// Blends `tint` over the masked pixels: `round((1 − α)·src + α·tint)`.
pub fn composite(image: &RgbImage, mask: &BinaryMask, alpha: f64, tint: [u8; 3]) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(x as usize, y as usize) {
            for (c, t) in px.0.iter_mut().zip(tint) {
                *c = ((1.0 - alpha) * f64::from(*c) + alpha * f64::from(t)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

async fn overlay(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let alpha = match q.get("alpha") {
        None => 0.5,
        Some(v) => v
            .parse::<f64>()
            .ok()
            .filter(|a| (0.0..=1.0).contains(a))
            .ok_or_else(|| ApiError::bad_request(format!("alpha must be in [0, 1], got {v:?}")))?,
    };
    let &i = st.index.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown triplet {id}")))?;
    let (image_path, mask_path) = {
        let current = st.current.read().expect("state lock poisoned");
        let r = &current.records[i];
        (st.resolve(&r.image_path), st.resolve(&r.mask_path))
    };
    let png = tokio::task::spawn_blocking(move || -> anyhow::Result<Vec<u8>> {
        let image = load_rgb(&image_path)?;
        let mask = BinaryMask::load_png(&mask_path)?;
        anyhow::ensure!(
            mask.dims() == (image.width() as usize, image.height() as usize),
            "mask {:?} does not match image {}x{}",
            mask.dims(),
            image.width(),
            image.height()
        );
        let mut buf = Cursor::new(Vec::new());
        composite(&image, &mask, alpha, TINT).write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::internal(format!("{e:#}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

/// Body parsed by hand so malformed input is a 400 rather than axum's 422.
fn parse_verdict_body(body: &[u8]) -> ApiResult<(String, Decision, Option<String>)> {
    let v: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))?;
    let id = v
        .get("id")
        .and_then(|x| x.as_str())
        .ok_or_else(|| ApiError::bad_request("missing string field id"))?;
    let verdict = match v.get("verdict").and_then(|x| x.as_str()) {
        Some("keep") => Decision::Keep,
        Some("discard") => Decision::Discard,
        other => return Err(ApiError::bad_request(format!("verdict must be keep or discard, got {other:?}"))),
    };
    let reason = match v.get("reason") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(ApiError::bad_request("reason must be a string")),
    };
    Ok((id.to_string(), verdict, reason))
}

async fn post_verdict(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<StatusCode> {
    let (id, verdict, reason) = parse_verdict_body(&body)?;
    let &i = st.index.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown triplet {id}")))?;
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let event = VerdictEvent {
        id,
        verdict,
        reason,
        timestamp,
    };

    let _writer = st.writer.lock().await;
    let log = st.log_path.clone();
    tokio::task::spawn_blocking(move || append_verdict(&log, &event))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    st.current.write().expect("state lock poisoned").records[i].verdict = verdict.into();
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Serialize)]
struct ExportResponse {
    path: String,
    records: usize,
    include_pending: bool,
}

async fn export(
    State(st): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<ExportResponse>> {
    let include_pending = match q.get("include_pending").map(String::as_str) {
        None => st.include_pending,
        Some("true") => true,
        Some("false") => false,
        Some(v) => return Err(ApiError::bad_request(format!("include_pending must be true or false, got {v:?}"))),
    };
    let _writer = st.writer.lock().await;
    let view = export_view(&st.snapshot(), include_pending);
    let path = st.export_path();
    let base = st.base_dir.clone();
    let target = path.clone();
    let records = view.records.len();
    tokio::task::spawn_blocking(move || -> anyhow::Result<()> {
        view.validate()?;
        view.verify_masks(&base)?;
        save_manifest(&view, &target)?;
        Ok(())
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::internal(format!("{e:#}")))?;
    Ok(Json(ExportResponse {
        path: path.display().to_string(),
        records,
        include_pending,
    }))
}

async fn stats(State(st): State<Arc<AppState>>) -> Json<Stats> {
    Json(st.stats())
}
