//! Human preference study: rank-to-weight scoring with abstentions, an
//! append-only response store, and the HTTP service volunteers use.
//!
//! A volunteer ranks every model for an item and dimension, or abstains.
//! Rank `p` of `n` earns `n + 1 − p` points. An item's score for a model is
//! the sum of its points divided by the number of volunteers the study
//! expected, so abstentions lower the item's total without changing the
//! relative order within it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Dynamics,
    Naturalness,
    TextCompliance,
    Overall,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Self::Dynamics, Self::Naturalness, Self::TextCompliance, Self::Overall];

    /// Guidance shown to volunteers.
    pub fn guidance(self) -> &'static str {
        match self {
            Self::Dynamics => {
                "Rank by range of movement. Consider frame consistency, completeness and range of motion \
                 (camera movement alone does not count), and whether the movement looks natural."
            }
            Self::Naturalness => "Rank by how much the video resembles the real world rather than a generated clip.",
            Self::TextCompliance => {
                "Rank by how well the video follows the text, recognising objects in the image and relating them to it."
            }
            Self::Overall => "Rank by overall video quality, following personal preference.",
        }
    }
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("rank {position} out of range 1..={n}")]
    RankOutOfRange { position: usize, n: usize },
    #[error("invalid study config: {0}")]
    Config(String),
    #[error("invalid record: {0}")]
    Record(String),
    #[error("duplicate response from {volunteer} for {item}/{dimension:?}")]
    Duplicate { volunteer: String, item: String, dimension: Dimension },
    #[error("{path} line {line}: {reason}")]
    StoreLine { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Points for 1-based rank `position` among `n` models.
pub fn weight_of_rank(position: usize, n: usize) -> Result<usize, StudyError> {
    if position == 0 || position > n {
        return Err(StudyError::RankOutOfRange { position, n });
    }
    Ok(n + 1 - position)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingRecord {
    pub volunteer_id: String,
    pub item_id: String,
    pub dimension: Dimension,
    /// Model ids best to worst; empty when abstaining.
    #[serde(default)]
    pub ranking: Vec<String>,
    #[serde(default)]
    pub abstain: bool,
    /// Unix seconds; filled in by the service when zero.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyModel {
    pub model_id: String,
    /// Item id to media path, relative to the study's media root.
    #[serde(default)]
    pub media: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study_id: String,
    pub models: Vec<StudyModel>,
    pub items: Vec<String>,
    pub dimensions: Vec<Dimension>,
    pub n_volunteers_expected: usize,
    #[serde(default)]
    pub media_root: PathBuf,
}

impl StudyConfig {
    /// Reads and validates a config; a relative media root resolves against
    /// the config's directory.
    pub fn load(path: &Path) -> Result<Self, StudyError> {
        let text = std::fs::read_to_string(path).map_err(|source| StudyError::Io { path: path.into(), source })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| StudyError::Config(format!("{}: {e}", path.display())))?;
        cfg.media_root = path.parent().unwrap_or(Path::new("")).join(&cfg.media_root);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        let fail = |m: String| Err(StudyError::Config(m));
        if self.study_id.is_empty() {
            return fail("study_id is empty".into());
        }
        if self.models.len() < 2 {
            return fail(format!("need at least two models, got {}", self.models.len()));
        }
        if self.dimensions.is_empty() {
            return fail("no dimensions".into());
        }
        if self.items.is_empty() {
            return fail("no items".into());
        }
        if self.n_volunteers_expected == 0 {
            return fail("n_volunteers_expected must be positive".into());
        }
        let ids: HashSet<&str> = self.models.iter().map(|m| m.model_id.as_str()).collect();
        if ids.len() != self.models.len() {
            return fail("duplicate model_id".into());
        }
        if self.items.iter().collect::<HashSet<_>>().len() != self.items.len() {
            return fail("duplicate item id".into());
        }
        if self.dimensions.iter().collect::<HashSet<_>>().len() != self.dimensions.len() {
            return fail("duplicate dimension".into());
        }
        let items: HashSet<&str> = self.items.iter().map(String::as_str).collect();
        for m in &self.models {
            if let Some(unknown) = m.media.keys().find(|k| !items.contains(k.as_str())) {
                return fail(format!("model {:?} has media for unknown item {unknown:?}", m.model_id));
            }
        }
        Ok(())
    }

    pub fn model_ids(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.model_id.as_str()).collect()
    }

    /// Checks a record refers to this study's items, dimensions and models,
    /// and ranks all models exactly once unless abstaining.
    pub fn validate_record(&self, r: &RankingRecord) -> Result<(), StudyError> {
        let bad = |m: String| Err(StudyError::Record(m));
        if r.volunteer_id.trim().is_empty() {
            return bad("volunteer_id is empty".into());
        }
        if !self.items.contains(&r.item_id) {
            return bad(format!("unknown item {:?}", r.item_id));
        }
        if !self.dimensions.contains(&r.dimension) {
            return bad(format!("dimension {:?} is not part of this study", r.dimension));
        }
        if r.abstain {
            if !r.ranking.is_empty() {
                return bad("an abstention must not carry a ranking".into());
            }
            return Ok(());
        }
        let models: BTreeSet<&str> = self.model_ids().into_iter().collect();
        if let Some(unknown) = r.ranking.iter().find(|m| !models.contains(m.as_str())) {
            return bad(format!("unknown model {unknown:?}"));
        }
        let ranked: BTreeSet<&str> = r.ranking.iter().map(String::as_str).collect();
        if r.ranking.len() != models.len() || ranked != models {
            return bad(format!("ranking must be a permutation of {} models, got {:?}", models.len(), r.ranking));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub overall: f64,
    pub normalized_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionResult {
    pub models: BTreeMap<String, ModelScore>,
    /// Item id to model id to item score.
    pub per_item: BTreeMap<String, BTreeMap<String, f64>>,
    pub n_responses: usize,
    pub n_abstentions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResults {
    pub study_id: String,
    pub n_volunteers_expected: usize,
    pub dimensions: BTreeMap<Dimension, DimensionResult>,
}

/// `100·x_m / Σx` per model; all zeros when the total is zero.
pub fn normalize(overall: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let total: f64 = overall.values().sum();
    overall.iter().map(|(k, &v)| (k.clone(), if total > 0.0 { 100.0 * v / total } else { 0.0 })).collect()
}

/// Scores every dimension. Points are summed as integers so the result does
/// not depend on record order.
pub fn aggregate(records: &[RankingRecord], cfg: &StudyConfig) -> Result<StudyResults, StudyError> {
    let n_models = cfg.models.len();
    let v = cfg.n_volunteers_expected as f64;
    let mut dimensions = BTreeMap::new();
    for &dim in &cfg.dimensions {
        let mut points: BTreeMap<&str, BTreeMap<&str, u64>> = cfg
            .items
            .iter()
            .map(|it| (it.as_str(), cfg.models.iter().map(|m| (m.model_id.as_str(), 0)).collect()))
            .collect();
        let (mut n_responses, mut n_abstentions) = (0, 0);
        for r in records.iter().filter(|r| r.dimension == dim) {
            cfg.validate_record(r)?;
            n_responses += 1;
            if r.abstain {
                n_abstentions += 1;
                continue;
            }
            let row = points.get_mut(r.item_id.as_str()).expect("validated item");
            for (pos, model) in r.ranking.iter().enumerate() {
                *row.get_mut(model.as_str()).expect("validated model") += weight_of_rank(pos + 1, n_models)? as u64;
            }
        }
        let mut totals: BTreeMap<String, u64> = cfg.models.iter().map(|m| (m.model_id.clone(), 0)).collect();
        for row in points.values() {
            for (m, p) in row {
                *totals.get_mut(*m).expect("known model") += p;
            }
        }
        let overall: BTreeMap<String, f64> = totals.iter().map(|(m, &p)| (m.clone(), p as f64 / v)).collect();
        let pct = normalize(&totals.iter().map(|(m, &p)| (m.clone(), p as f64)).collect());
        let models = overall.iter().map(|(m, &o)| (m.clone(), ModelScore { overall: o, normalized_pct: pct[m] })).collect();
        let per_item = points
            .iter()
            .map(|(it, row)| (it.to_string(), row.iter().map(|(m, &p)| (m.to_string(), p as f64 / v)).collect()))
            .collect();
        dimensions.insert(dim, DimensionResult { models, per_item, n_responses, n_abstentions });
    }
    Ok(StudyResults { study_id: cfg.study_id.clone(), n_volunteers_expected: cfg.n_volunteers_expected, dimensions })
}

type ResponseKey = (String, String, Dimension);

fn key_of(r: &RankingRecord) -> ResponseKey {
    (r.volunteer_id.clone(), r.item_id.clone(), r.dimension)
}

/// Reads a JSONL store, validating each line. Errors name the 1-based line.
pub fn load_store(path: &Path, cfg: &StudyConfig) -> Result<Vec<RankingRecord>, StudyError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|source| StudyError::Io { path: path.into(), source })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StudyError::Io { path: path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |reason: String| StudyError::StoreLine { path: path.into(), line: n + 1, reason };
        let r: RankingRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        cfg.validate_record(&r).map_err(|e| at(e.to_string()))?;
        if !seen.insert(key_of(&r)) {
            return Err(at(format!("duplicate response from {} for {}/{:?}", r.volunteer_id, r.item_id, r.dimension)));
        }
        records.push(r);
    }
    Ok(records)
}

/// In-memory view of a study's responses backed by an append-only file.
/// Appends are serialized by one lock so duplicate checks and writes agree.
pub struct StudyStore {
    path: PathBuf,
    inner: Mutex<StoreInner>,
}

struct StoreInner {
    records: Vec<RankingRecord>,
    keys: HashSet<ResponseKey>,
    file: File,
}

impl StudyStore {
    pub fn open(path: &Path, cfg: &StudyConfig) -> Result<Self, StudyError> {
        let records = load_store(path, cfg)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| StudyError::Io { path: dir.into(), source })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| StudyError::Io { path: path.into(), source })?;
        let keys = records.iter().map(key_of).collect();
        Ok(Self { path: path.to_path_buf(), inner: Mutex::new(StoreInner { records, keys, file }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: RankingRecord) -> Result<(), StudyError> {
        let mut inner = self.inner.lock().expect("store lock");
        let key = key_of(&record);
        if inner.keys.contains(&key) {
            return Err(StudyError::Duplicate { volunteer: key.0, item: key.1, dimension: key.2 });
        }
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(inner.file, "{line}")
            .and_then(|_| inner.file.flush())
            .map_err(|source| StudyError::Io { path: self.path.clone(), source })?;
        inner.keys.insert(key);
        inner.records.push(record);
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<RankingRecord> {
        self.inner.lock().expect("store lock").records.clone()
    }
}

pub fn default_store_path(dir: &Path, study_id: &str) -> PathBuf {
    dir.join(format!("study_{study_id}.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionPrompt {
    pub dimension: Dimension,
    pub guidance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub item_id: String,
    /// Dimensions this volunteer still owes for the item.
    pub dimension_list: Vec<DimensionPrompt>,
    /// Model id to media URL.
    pub media: BTreeMap<String, String>,
}

fn media_url(p: &Path) -> String {
    let parts: Vec<String> = p.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    format!("/media/{}", parts.join("/"))
}

/// Next item for `volunteer`: among items they have not finished, the one
/// with the fewest distinct respondents, ties broken by item id.
pub fn next_assignment(cfg: &StudyConfig, records: &[RankingRecord], volunteer: &str) -> Option<Assignment> {
    let mut respondents: HashMap<&str, HashSet<&str>> = HashMap::new();
    let mut done: HashMap<&str, HashSet<Dimension>> = HashMap::new();
    for r in records {
        respondents.entry(r.item_id.as_str()).or_default().insert(r.volunteer_id.as_str());
        if r.volunteer_id == volunteer {
            done.entry(r.item_id.as_str()).or_default().insert(r.dimension);
        }
    }
    let remaining = |item: &str| -> Vec<Dimension> {
        cfg.dimensions.iter().copied().filter(|d| !done.get(item).is_some_and(|s| s.contains(d))).collect()
    };
    let item = cfg
        .items
        .iter()
        .filter(|it| !remaining(it).is_empty())
        .min_by(|a, b| {
            let ca = respondents.get(a.as_str()).map_or(0, HashSet::len);
            let cb = respondents.get(b.as_str()).map_or(0, HashSet::len);
            ca.cmp(&cb).then_with(|| a.cmp(b))
        })?;
    let media = cfg
        .models
        .iter()
        .filter_map(|m| m.media.get(item).map(|p| (m.model_id.clone(), media_url(p))))
        .collect();
    let dimension_list = remaining(item)
        .into_iter()
        .map(|d| DimensionPrompt { dimension: d, guidance: d.guidance().to_string() })
        .collect();
    Some(Assignment { item_id: item.clone(), dimension_list, media })
}

pub struct StudyService {
    pub config: StudyConfig,
    pub store: StudyStore,
}

type Shared = Arc<StudyService>;

fn error_response(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn check_study(svc: &StudyService, id: &str) -> Result<(), Response> {
    if svc.config.study_id != id {
        return Err(error_response(StatusCode::NOT_FOUND, format!("unknown study {id:?}")));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct AssignmentQuery {
    volunteer: Option<String>,
}

async fn assignment(State(svc): State<Shared>, UrlPath(id): UrlPath<String>, Query(q): Query<AssignmentQuery>) -> Response {
    if let Err(r) = check_study(&svc, &id) {
        return r;
    }
    let Some(volunteer) = q.volunteer.filter(|v| !v.trim().is_empty()) else {
        return error_response(StatusCode::BAD_REQUEST, "missing volunteer query parameter");
    };
    match next_assignment(&svc.config, &svc.store.snapshot(), &volunteer) {
        Some(a) => Json(a).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn response(State(svc): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    if let Err(r) = check_study(&svc, &id) {
        return r;
    }
    let mut record: RankingRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    if let Err(e) = svc.config.validate_record(&record) {
        return error_response(StatusCode::BAD_REQUEST, e.to_string());
    }
    if record.timestamp == 0 {
        record.timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
    }
    match svc.store.append(record.clone()) {
        Ok(()) => (StatusCode::CREATED, Json(record)).into_response(),
        Err(e @ StudyError::Duplicate { .. }) => error_response(StatusCode::CONFLICT, e.to_string()),
        Err(e) => {
            tracing::error!(error = %e, "failed to persist response");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "could not persist response")
        }
    }
}

async fn results(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    if let Err(r) = check_study(&svc, &id) {
        return r;
    }
    match aggregate(&svc.store.snapshot(), &svc.config) {
        Ok(res) => Json(res).into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Maps a URL tail onto the media root, refusing anything that could leave it.
pub fn resolve_media(root: &Path, tail: &str) -> Option<PathBuf> {
    let rel = Path::new(tail);
    if tail.contains('\\') || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    let root = root.canonicalize().ok()?;
    let full = root.join(rel).canonicalize().ok()?;
    full.starts_with(&root).then_some(full)
}

fn content_type(p: &Path) -> &'static str {
    match p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("ppm") => "image/x-portable-pixmap",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("json") => "application/json",
        Some("mp4") => "video/mp4",
        Some("webm") => "video/webm",
        Some("gif") => "image/gif",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameListing {
    pub fps: f64,
    pub frames: Vec<String>,
}

/// Frame files of a clip directory, as URLs under `/media/<tail>/`.
fn frame_listing(dir: &Path, tail: &str) -> std::io::Result<FrameListing> {
    let mut frames: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("frame_") && (n.ends_with(".png") || n.ends_with(".ppm")))
        .collect();
    frames.sort();
    let fps = std::fs::read_to_string(dir.join("meta.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("fps").and_then(|f| f.as_f64()))
        .unwrap_or(crate::frame_io::DEFAULT_FPS);
    let base = tail.trim_end_matches('/');
    Ok(FrameListing { fps, frames: frames.into_iter().map(|f| format!("/media/{base}/{f}")).collect() })
}

async fn media(State(svc): State<Shared>, UrlPath(tail): UrlPath<String>) -> Response {
    let Some(path) = resolve_media(&svc.config.media_root, &tail) else {
        return error_response(StatusCode::NOT_FOUND, "no such media");
    };
    if path.is_dir() {
        return match frame_listing(&path, &tail) {
            Ok(l) => Json(l).into_response(),
            Err(_) => error_response(StatusCode::NOT_FOUND, "no such media"),
        };
    }
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => error_response(StatusCode::NOT_FOUND, "no such media"),
    }
}

pub fn study_router(service: StudyService) -> Router {
    Router::new()
        .route("/api/study/{id}/assignment", get(assignment))
        .route("/api/study/{id}/response", post(response))
        .route("/api/study/{id}/results", get(results))
        .route("/media/{*path}", get(media))
        .with_state(Arc::new(service))
}

/// Serves the study until the listener fails.
pub async fn serve_study(service: StudyService, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, study_router(service)).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use proptest::prelude::*;
    use tower::ServiceExt;

    fn config(models: &[&str], items: usize, volunteers: usize) -> StudyConfig {
        StudyConfig {
            study_id: "s1".into(),
            models: models.iter().map(|m| StudyModel { model_id: m.to_string(), media: BTreeMap::new() }).collect(),
            items: (0..items).map(|i| format!("item{i:03}")).collect(),
            dimensions: vec![Dimension::Overall],
            n_volunteers_expected: volunteers,
            media_root: PathBuf::new(),
        }
    }

    fn rec(vol: &str, item: &str, ranking: &[&str]) -> RankingRecord {
        RankingRecord {
            volunteer_id: vol.into(),
            item_id: item.into(),
            dimension: Dimension::Overall,
            ranking: ranking.iter().map(|s| s.to_string()).collect(),
            abstain: ranking.is_empty(),
            timestamp: 1,
        }
    }

    const M4: [&str; 4] = ["m1", "m2", "m3", "m4"];

    #[test]
    fn rank_weights() {
        assert_eq!(weight_of_rank(1, 4).unwrap(), 4);
        assert_eq!(weight_of_rank(4, 4).unwrap(), 1);
        assert_eq!(weight_of_rank(2, 6).unwrap(), 5);
        assert!(weight_of_rank(0, 4).is_err());
        assert!(weight_of_rank(5, 4).is_err());
    }

    #[test]
    fn full_response_items_sum_to_ten() {
        let cfg = config(&M4, 3, 20);
        let perms = [["m1", "m2", "m3", "m4"], ["m4", "m3", "m2", "m1"], ["m2", "m4", "m1", "m3"]];
        let mut records = Vec::new();
        for item in &cfg.items {
            for v in 0..20 {
                records.push(rec(&format!("v{v}"), item, &perms[(v * 7 + item.len()) % 3]));
            }
        }
        let res = aggregate(&records, &cfg).unwrap();
        let dim = &res.dimensions[&Dimension::Overall];
        for row in dim.per_item.values() {
            assert_eq!(row.values().sum::<f64>(), 10.0);
        }
    }

    #[test]
    fn abstentions_stay_in_denominator() {
        let cfg = config(&M4, 1, 20);
        let mut records: Vec<RankingRecord> = (0..10).map(|v| rec(&format!("a{v}"), "item000", &[])).collect();
        records.extend((0..10).map(|v| rec(&format!("r{v}"), "item000", &["m1", "m2", "m3", "m4"])));
        let res = aggregate(&records, &cfg).unwrap();
        let dim = &res.dimensions[&Dimension::Overall];
        assert_eq!(dim.per_item["item000"]["m1"], 2.0);
        assert_eq!((dim.n_responses, dim.n_abstentions), (20, 10));
    }

    #[test]
    fn normalized_table_values() {
        let overall: BTreeMap<String, f64> =
            [("M1", 99.8), ("M2", 149.6), ("M3", 127.6), ("M4", 77.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let pct = normalize(&overall);
        let rounded: Vec<String> = pct.values().map(|p| format!("{p:.2}")).collect();
        assert_eq!(rounded, ["21.98", "32.95", "28.11", "16.96"]);
        assert!((pct.values().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    /// Rankings whose per-model point totals hit `targets` exactly: each
    /// ranking gives the most points to the model with the largest
    /// remaining need per remaining ranking.
    pub(crate) fn rankings_for_totals(models: &[&str], targets: &[u64], n: usize) -> Vec<Vec<String>> {
        let k = models.len() as u64;
        let mut need = targets.to_vec();
        let mut out = Vec::with_capacity(n);
        for left in (1..=n as u64).rev() {
            let mut order: Vec<usize> = (0..models.len()).collect();
            order.sort_by(|&a, &b| (need[b] * 1000 / left).cmp(&(need[a] * 1000 / left)).then(a.cmp(&b)));
            for (pos, &m) in order.iter().enumerate() {
                need[m] -= k - pos as u64;
            }
            out.push(order.iter().map(|&m| models[m].to_string()).collect());
        }
        assert!(need.iter().all(|&x| x == 0));
        out
    }

    #[test]
    fn reproduces_overall_table() {
        // 20 volunteers; totals ×20 = 1996, 2992, 2552, 1540 points across
        // 908 rankings, spread over 46 items with 12 abstentions.
        let cfg = config(&M4, 46, 20);
        let rankings = rankings_for_totals(&M4, &[1996, 2992, 2552, 1540], 908);
        let mut records = Vec::new();
        let mut it = rankings.into_iter();
        for (i, item) in cfg.items.iter().enumerate() {
            for v in 0..20 {
                let abstain = i < 12 && v == 0;
                let ranking = if abstain { Vec::new() } else { it.next().unwrap() };
                let refs: Vec<&str> = ranking.iter().map(String::as_str).collect();
                records.push(rec(&format!("v{v:02}"), item, &refs));
            }
        }
        assert!(it.next().is_none());
        let dim = aggregate(&records, &cfg).unwrap().dimensions.remove(&Dimension::Overall).unwrap();
        let overall: Vec<f64> = M4.iter().map(|m| dim.models[*m].overall).collect();
        assert_eq!(overall, vec![99.8, 149.6, 127.6, 77.0]);
        let pct: Vec<String> = M4.iter().map(|m| format!("{:.2}", dim.models[*m].normalized_pct)).collect();
        assert_eq!(pct, ["21.98", "32.95", "28.11", "16.96"]);
    }

    #[test]
    fn record_validation() {
        let cfg = config(&M4, 2, 5);
        assert!(cfg.validate_record(&rec("v", "item000", &["m1", "m2", "m3", "m4"])).is_ok());
        assert!(cfg.validate_record(&rec("v", "item000", &["m1", "m2", "m3"])).is_err());
        assert!(cfg.validate_record(&rec("v", "item000", &["m1", "m1", "m3", "m4"])).is_err());
        assert!(cfg.validate_record(&rec("v", "item000", &["m1", "m2", "m3", "zz"])).is_err());
        assert!(cfg.validate_record(&rec("v", "nope", &[])).is_err());
        let mut r = rec("v", "item000", &["m1", "m2", "m3", "m4"]);
        r.abstain = true;
        assert!(cfg.validate_record(&r).is_err());
        r.dimension = Dimension::Dynamics;
        r.ranking.clear();
        assert!(cfg.validate_record(&r).is_err());
        assert!(aggregate(&[rec("v", "item000", &["m1", "x", "m3", "m4"])], &cfg).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_ignores_record_order(seed in any::<u64>(), n in 1usize..60) {
            let cfg = config(&M4, 5, 12);
            let mut state = seed;
            let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 33) as usize };
            let mut seen = HashSet::new();
            let mut records = Vec::new();
            for _ in 0..n {
                let (v, i) = (next() % 12, next() % 5);
                if !seen.insert((v, i)) { continue; }
                let mut perm = M4.to_vec();
                for j in (1..4).rev() { perm.swap(j, next() % (j + 1)); }
                let ranking: Vec<&str> = if next() % 5 == 0 { vec![] } else { perm };
                records.push(rec(&format!("v{v}"), &format!("item{i:03}"), &ranking));
            }
            let base = aggregate(&records, &cfg).unwrap();
            records.reverse();
            prop_assert_eq!(&aggregate(&records, &cfg).unwrap(), &base);
            let pct: f64 = base.dimensions[&Dimension::Overall].models.values().map(|m| m.normalized_pct).sum();
            prop_assert!(records.iter().all(|r| r.abstain) || (pct - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn abstention_never_raises_scores() {
        let cfg = config(&M4, 1, 4);
        let base = vec![rec("a", "item000", &["m2", "m1", "m3", "m4"])];
        let mut more = base.clone();
        more.push(rec("b", "item000", &[]));
        let (x, y) = (aggregate(&base, &cfg).unwrap(), aggregate(&more, &cfg).unwrap());
        for m in M4 {
            let d = Dimension::Overall;
            assert!(y.dimensions[&d].per_item["item000"][m] <= x.dimensions[&d].per_item["item000"][m]);
        }
    }

    #[test]
    fn store_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(&M4, 2, 5);
        let path = default_store_path(dir.path(), "s1");
        assert!(load_store(&path, &cfg).unwrap().is_empty());
        let store = StudyStore::open(&path, &cfg).unwrap();
        let r = rec("v", "item000", &["m1", "m2", "m3", "m4"]);
        store.append(r.clone()).unwrap();
        assert!(matches!(store.append(r.clone()), Err(StudyError::Duplicate { .. })));
        drop(store);
        assert_eq!(load_store(&path, &cfg).unwrap(), vec![r]);

        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"volunteer_id\":\"w\",\"item_id\":\"item001\",\"dimension\":\"overall\",\"ranking\":[\"m1\",\"m1\",\"m2\",\"m3\"]}\n")
            .unwrap();
        match load_store(&path, &cfg) {
            Err(StudyError::StoreLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn assignment_policy() {
        let mut cfg = config(&M4, 3, 5);
        cfg.dimensions = vec![Dimension::Dynamics, Dimension::Overall];
        let mut r = rec("a", "item000", &["m1", "m2", "m3", "m4"]);
        let first = next_assignment(&cfg, &[], "a").unwrap();
        assert_eq!(first.item_id, "item000");
        assert_eq!(first.dimension_list.len(), 2);
        // item000 now has a respondent, so a fresh volunteer goes to item001
        let records = vec![r.clone()];
        assert_eq!(next_assignment(&cfg, &records, "b").unwrap().item_id, "item001");
        // 'a' still owes dynamics on item000 but it is busier than the others
        let a_next = next_assignment(&cfg, &records, "a").unwrap();
        assert_eq!(a_next.item_id, "item001");
        let mut all = Vec::new();
        for item in &cfg.items {
            for d in &cfg.dimensions {
                r.item_id = item.clone();
                r.dimension = *d;
                all.push(r.clone());
            }
        }
        assert!(next_assignment(&cfg, &all, "a").is_none());
    }

    #[test]
    fn media_resolution_blocks_traversal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("m1/item000")).unwrap();
        std::fs::write(dir.path().join("m1/item000/frame_0000.png"), b"x").unwrap();
        assert!(resolve_media(dir.path(), "m1/item000/frame_0000.png").is_some());
        assert!(resolve_media(dir.path(), "../etc/passwd").is_none());
        assert!(resolve_media(dir.path(), "/etc/passwd").is_none());
        assert!(resolve_media(dir.path(), "m1/../../x").is_none());
        assert!(resolve_media(dir.path(), "missing.png").is_none());
    }

    fn service(dir: &Path) -> StudyService {
        let mut cfg = config(&M4, 2, 3);
        cfg.media_root = dir.to_path_buf();
        for m in &mut cfg.models {
            m.media.insert("item000".into(), PathBuf::from(format!("{}/item000", m.model_id)));
        }
        std::fs::create_dir_all(dir.join("m1/item000")).unwrap();
        std::fs::write(dir.join("m1/item000/frame_0000.png"), b"\x89PNG").unwrap();
        let store = StudyStore::open(&default_store_path(dir, "s1"), &cfg).unwrap();
        StudyService { config: cfg, store }
    }

    async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    fn post_json(uri: &str, body: &str) -> Request<Body> {
        Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
    }

    #[tokio::test]
    async fn http_contract() {
        let dir = tempfile::tempdir().unwrap();
        let app = study_router(service(dir.path()));
        let get = |u: &str| Request::get(u).body(Body::empty()).unwrap();

        let (s, body) = call(&app, get("/api/study/s1/assignment?volunteer=v1")).await;
        assert_eq!(s, StatusCode::OK);
        let a: Assignment = serde_json::from_slice(&body).unwrap();
        assert_eq!(a.item_id, "item000");
        assert_eq!(a.media["m1"], "/media/m1/item000");
        assert_eq!(call(&app, get("/api/study/nope/assignment?volunteer=v1")).await.0, StatusCode::NOT_FOUND);
        assert_eq!(call(&app, get("/api/study/s1/assignment")).await.0, StatusCode::BAD_REQUEST);

        let good = r#"{"volunteer_id":"v1","item_id":"item000","dimension":"overall","ranking":["m2","m1","m4","m3"]}"#;
        assert_eq!(call(&app, post_json("/api/study/s1/response", good)).await.0, StatusCode::CREATED);
        assert_eq!(call(&app, post_json("/api/study/s1/response", good)).await.0, StatusCode::CONFLICT);
        let partial = r#"{"volunteer_id":"v2","item_id":"item000","dimension":"overall","ranking":["m2","m1"]}"#;
        let (s, body) = call(&app, post_json("/api/study/s1/response", partial)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert!(String::from_utf8(body).unwrap().contains("permutation"));
        assert_eq!(call(&app, post_json("/api/study/s1/response", "{not json")).await.0, StatusCode::BAD_REQUEST);
        assert_eq!(call(&app, post_json("/api/study/x/response", good)).await.0, StatusCode::NOT_FOUND);
        let abstain = r#"{"volunteer_id":"v2","item_id":"item000","dimension":"overall","abstain":true}"#;
        assert_eq!(call(&app, post_json("/api/study/s1/response", abstain)).await.0, StatusCode::CREATED);

        let store_lines = std::fs::read_to_string(default_store_path(dir.path(), "s1")).unwrap();
        assert_eq!(store_lines.lines().count(), 2);

        let (s, body) = call(&app, get("/api/study/s1/results")).await;
        assert_eq!(s, StatusCode::OK);
        let served: StudyResults = serde_json::from_slice(&body).unwrap();
        let cfg = service(tempfile::tempdir().unwrap().path()).config;
        let offline = aggregate(&load_store(&default_store_path(dir.path(), "s1"), &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(served, offline);

        let (s, body) = call(&app, get("/media/m1/item000")).await;
        assert_eq!(s, StatusCode::OK);
        let listing: FrameListing = serde_json::from_slice(&body).unwrap();
        assert_eq!(listing.frames, vec!["/media/m1/item000/frame_0000.png"]);
        let (s, body) = call(&app, get("/media/m1/item000/frame_0000.png")).await;
        assert_eq!((s, body.as_slice()), (StatusCode::OK, b"\x89PNG".as_slice()));
        assert_eq!(call(&app, get("/media/..%2F..%2Fetc%2Fpasswd")).await.0, StatusCode::NOT_FOUND);
    }

    #[tokio::test]
    async fn finished_volunteer_gets_no_content() {
        let dir = tempfile::tempdir().unwrap();
        let app = study_router(service(dir.path()));
        for item in ["item000", "item001"] {
            let body = format!(r#"{{"volunteer_id":"v1","item_id":"{item}","dimension":"overall","abstain":true}}"#);
            assert_eq!(call(&app, post_json("/api/study/s1/response", &body)).await.0, StatusCode::CREATED);
        }
        let req = Request::get("/api/study/s1/assignment?volunteer=v1").body(Body::empty()).unwrap();
        assert_eq!(call(&app, req).await.0, StatusCode::NO_CONTENT);
    }
}
