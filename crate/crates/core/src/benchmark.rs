//! Benchmark aggregation: per-item dynamics and quality rolled up into
//! Dynamic Range (DR), Dynamics Controllability (DC) and Dynamics-Based
//! Quality (DBQ) for one model, plus report files.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::degree::{annotate_degree, Annotator, DegreeError, DegreeRequest, DegreeSource};
use crate::dynamics::{dynamic_score_from_flows, pair_flows, DynamicsConfig};
use crate::frame_io::load_sequence;
use crate::quality::{quality_profile, NaturalnessScorer, QualityConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no scores to aggregate")]
    Empty,
    #[error("controllability needs at least two items, got {0}")]
    TooFewPairs(usize),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("all {0} items failed")]
    AllFailed(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Degree(#[from] DegreeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchItem {
    pub item_id: String,
    pub prompt: String,
    pub image_path: PathBuf,
    pub video_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchManifest {
    pub model_name: String,
    pub items: Vec<BenchItem>,
}

impl BenchManifest {
    /// Reads a manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.into(), source })?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|source| BenchError::Json { path: path.into(), source })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for it in &mut m.items {
            it.image_path = base.join(&it.image_path);
            it.video_dir = base.join(&it.video_dir);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.model_name.trim().is_empty() {
            return Err(BenchError::InvalidManifest("model_name is empty".into()));
        }
        let mut seen = HashSet::new();
        for it in &self.items {
            if it.item_id.is_empty() {
                return Err(BenchError::InvalidManifest("empty item_id".into()));
            }
            if !seen.insert(it.item_id.as_str()) {
                return Err(BenchError::InvalidManifest(format!("duplicate item_id {:?}", it.item_id)));
            }
            if let Some(g) = it.degree {
                if !(1..=5).contains(&g) {
                    return Err(BenchError::InvalidManifest(format!("item {:?}: degree {g} not in 1..=5", it.item_id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub degree: u8,
    pub degree_source: DegreeSource,
    pub score: f64,
    pub q: f64,
    pub dbq_contrib: f64,
    pub ms: f64,
    pub bc: f64,
    pub sc: f64,
    pub nat: f64,
    pub nat_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DimScores {
    pub ms: f64,
    pub bc: f64,
    pub sc: f64,
    pub nat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model_name: String,
    pub n_items: usize,
    pub n_failed: usize,
    pub dr: f64,
    pub dc: f64,
    pub dbq: f64,
    pub dbq_by_dim: DimScores,
    /// Camera motion was subtracted before scoring.
    #[serde(default)]
    pub subject_only: bool,
    pub per_item: Vec<ItemResult>,
    #[serde(default)]
    pub failures: Vec<ItemFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub dynamics: DynamicsConfig,
    pub quality: QualityConfig,
}

/// Linear-interpolation percentile of an ascending slice at index `q·(n−1)`.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `100·(P95 − P5)` of the scores.
pub fn dynamic_range(scores: &[f64]) -> Result<f64, BenchError> {
    if scores.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(100.0 * (percentile_sorted(&s, 0.95) - percentile_sorted(&s, 0.05)))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; 0 when either side has no variance.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// `50·(1 + ρ)` between degrees and scores.
pub fn dynamics_controllability(pairs: &[(u8, f64)]) -> Result<f64, BenchError> {
    if pairs.len() < 2 {
        return Err(BenchError::TooFewPairs(pairs.len()));
    }
    let g: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
    let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(50.0 * (1.0 + spearman(&g, &s)))
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// Folds item results (any order) into a report. DC falls back to 50 when
/// fewer than two items survive.
pub fn aggregate_report(
    model_name: &str,
    mut per_item: Vec<ItemResult>,
    mut failures: Vec<ItemFailure>,
) -> Result<ModelReport, BenchError> {
    if per_item.is_empty() {
        return Err(if failures.is_empty() { BenchError::Empty } else { BenchError::AllFailed(failures.len()) });
    }
    per_item.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    failures.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let scores: Vec<f64> = per_item.iter().map(|r| r.score).collect();
    let pairs: Vec<(u8, f64)> = per_item.iter().map(|r| (r.degree, r.score)).collect();
    let dc = if pairs.len() < 2 { 50.0 } else { dynamics_controllability(&pairs)? };
    let dim = |f: fn(&ItemResult) -> f64| mean(per_item.iter().map(|r| r.score * 100.0 * f(r)));
    let dbq_by_dim = DimScores { ms: dim(|r| r.ms), bc: dim(|r| r.bc), sc: dim(|r| r.sc), nat: dim(|r| r.nat) };
    Ok(ModelReport {
        model_name: model_name.to_string(),
        n_items: per_item.len(),
        n_failed: failures.len(),
        dr: dynamic_range(&scores)?,
        dc,
        dbq: mean(per_item.iter().map(|r| r.dbq_contrib)),
        dbq_by_dim,
        subject_only: false,
        per_item,
        failures,
    })
}

fn score_item(
    item: &BenchItem,
    cfg: &BenchConfig,
    annotator: &Annotator,
    scorer: Option<&dyn NaturalnessScorer>,
) -> Result<ItemResult, String> {
    let seq = load_sequence(&item.video_dir).map_err(|e| e.to_string())?;
    if seq.len() < 2 {
        return Err(format!("{}: need at least two frames, got {}", item.video_dir.display(), seq.len()));
    }
    let pf = pair_flows(&seq, cfg.dynamics.max_dim, &cfg.dynamics.flow).map_err(|e| e.to_string())?;
    let dynamics = dynamic_score_from_flows(&item.item_id, &pf, &cfg.dynamics);
    let quality = quality_profile(&pf, &dynamics, &cfg.quality, scorer).map_err(|e| e.to_string())?;
    let (degree, degree_source) = match item.degree {
        Some(g) => (g, DegreeSource::Manifest),
        None => {
            let req = DegreeRequest {
                item_id: item.item_id.clone(),
                prompt: item.prompt.clone(),
                image_path: item.image_path.clone(),
            };
            let ann = annotate_degree(&req, annotator).map_err(|e| e.to_string())?;
            (ann.degree, ann.source)
        }
    };
    Ok(ItemResult {
        item_id: item.item_id.clone(),
        degree,
        degree_source,
        score: dynamics.score,
        q: quality.q,
        dbq_contrib: quality.dbq_contrib,
        ms: quality.ms,
        bc: quality.bc,
        sc: quality.sc,
        nat: quality.nat,
        nat_source: quality.nat_source,
    })
}

/// Scores every item in parallel on the current rayon pool. Items that fail
/// are listed in `failures` and left out of the aggregates.
pub fn run_benchmark(
    manifest: &BenchManifest,
    cfg: &BenchConfig,
    annotator: &Annotator,
    scorer: Option<&dyn NaturalnessScorer>,
) -> Result<ModelReport, BenchError> {
    manifest.validate()?;
    let outcomes: Vec<Result<ItemResult, ItemFailure>> = manifest
        .items
        .par_iter()
        .map(|item| {
            score_item(item, cfg, annotator, scorer).map_err(|error| {
                tracing::warn!(item = %item.item_id, %error, "item excluded from aggregates");
                ItemFailure { item_id: item.item_id.clone(), error }
            })
        })
        .collect();
    let (mut ok, mut failed) = (Vec::new(), Vec::new());
    for o in outcomes {
        match o {
            Ok(r) => ok.push(r),
            Err(f) => failed.push(f),
        }
    }
    let mut report = aggregate_report(&manifest.model_name, ok, failed)?;
    report.subject_only = cfg.dynamics.subject_only;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Md,
}

fn file_stem(model: &str) -> String {
    model.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    std::fs::write(path, bytes).map_err(|source| BenchError::Io { path: path.into(), source })
}

pub fn report_json(report: &ModelReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn report_csv(report: &ModelReport) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["item_id", "degree", "degree_source", "score", "q", "dbq_contrib", "ms", "bc", "sc", "nat"])?;
    for r in &report.per_item {
        let source = match r.degree_source {
            DegreeSource::Llm => "llm",
            DegreeSource::Lexicon => "lexicon",
            DegreeSource::Manifest => "manifest",
        };
        w.write_record([
            r.item_id.clone(),
            r.degree.to_string(),
            source.to_string(),
            r.score.to_string(),
            r.q.to_string(),
            r.dbq_contrib.to_string(),
            r.ms.to_string(),
            r.bc.to_string(),
            r.sc.to_string(),
            r.nat.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| BenchError::Csv(e.into_error().into()))
}

/// Markdown table, one row per model, DBQ descending (ties by name).
pub fn leaderboard_markdown(reports: &[ModelReport]) -> String {
    let mut rows: Vec<&ModelReport> = reports.iter().collect();
    rows.sort_by(|a, b| b.dbq.total_cmp(&a.dbq).then_with(|| a.model_name.cmp(&b.model_name)));
    let mut out = String::from("| Model | DR | DC | DBQ | MS | BC | SC | Nat | Items |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let d = &r.dbq_by_dim;
        out.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
            r.model_name.replace('|', "\\|"),
            r.dr,
            r.dc,
            r.dbq,
            d.ms,
            d.bc,
            d.sc,
            d.nat,
            r.n_items
        ));
    }
    out
}

/// Writes `report_<model>.json` / `.csv` and `leaderboard.md` as requested.
pub fn emit_report(report: &ModelReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, BenchError> {
    std::fs::create_dir_all(dir).map_err(|source| BenchError::Io { path: dir.into(), source })?;
    let stem = file_stem(&report.model_name);
    let mut written = Vec::new();
    for f in formats {
        let (path, bytes) = match f {
            ReportFormat::Json => (dir.join(format!("report_{stem}.json")), report_json(report).into_bytes()),
            ReportFormat::Csv => (dir.join(format!("report_{stem}.csv")), report_csv(report)?),
            ReportFormat::Md => (dir.join("leaderboard.md"), leaderboard_markdown(std::slice::from_ref(report)).into_bytes()),
        };
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<ModelReport, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| BenchError::Json { path: path.into(), source })
}
