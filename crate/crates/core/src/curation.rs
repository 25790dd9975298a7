//! Training-clip curation: drop clips that contain shot transitions or whose
//! camera motion is not a single clear type.
//!
//! Camera categories are named for the direction the *content* moves in the
//! image: content shifting toward +x is `pan_right`, toward +y `tilt_down`,
//! growing is `zoom_in`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{pair_flows, PairFlows};
use crate::flow::{fit_global_motion, mean_magnitude, FlowError, FlowParams, GlobalMotion, TrimParams};
use crate::frame_io::{load_sequence, Frame, FrameSequence};
use crate::quality::{histogram_intersection, HIST_BINS};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("need at least two frames, got {0}")]
    TooFewFrames(usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
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
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMotion {
    Static,
    PanLeft,
    PanRight,
    TiltUp,
    TiltDown,
    ZoomIn,
    ZoomOut,
    Rotate,
    Mixed,
    Uncertain,
}

impl CameraMotion {
    pub fn is_single(self) -> bool {
        !matches!(self, Self::Mixed | Self::Uncertain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutConfig {
    /// Whole-frame histogram intersection below this flags a cut.
    pub hist_thresh: f64,
    /// Fraction of lost interior blocks above this flags a cut.
    pub loss_thresh: f64,
    /// Per-pixel SAD above which a block's track counts as lost.
    pub lost_sad: f64,
}

impl Default for CutConfig {
    fn default() -> Self {
        Self { hist_thresh: 0.5, loss_thresh: 0.5, lost_sad: 30.0 }
    }
}

/// Thresholds for camera classification. Translations are fractions of the
/// frame diagonal; scale and rotation are absolute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionThresholds {
    pub static_translation: f64,
    pub static_scale: f64,
    pub static_rotation: f64,
    pub unit_translation: f64,
    pub unit_scale: f64,
    pub unit_rotation: f64,
    /// Uncertain when mean fit residual exceeds this fraction of mean flow.
    pub residual_ratio: f64,
    /// Uncertain when the mean inlier fraction is below this.
    pub min_inlier_frac: f64,
}

impl Default for MotionThresholds {
    fn default() -> Self {
        Self {
            static_translation: 0.002,
            static_scale: 0.001,
            static_rotation: 0.001,
            unit_translation: 0.004,
            unit_scale: 0.002,
            unit_rotation: 0.002,
            residual_ratio: 0.3,
            min_inlier_frac: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub cuts: CutConfig,
    pub motion: MotionThresholds,
    pub flow: FlowParams,
    pub trim: TrimParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dim: Option<usize>,
}

impl CurationConfig {
    fn max_dim(&self) -> usize {
        self.max_dim.unwrap_or(512)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationVerdict {
    pub item_id: String,
    pub camera_motion: CameraMotion,
    pub cuts: Vec<usize>,
    pub keep: bool,
    pub reasons: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CurationVerdict {
    fn new(item_id: &str, camera_motion: CameraMotion, cuts: Vec<usize>) -> Self {
        let mut reasons = Vec::new();
        if !cuts.is_empty() {
            reasons.push("transition".to_string());
        }
        match camera_motion {
            CameraMotion::Mixed => reasons.push("mixed_motion".into()),
            CameraMotion::Uncertain if cuts.is_empty() => reasons.push("uncertain_motion".into()),
            _ => {}
        }
        let keep = cuts.is_empty() && camera_motion.is_single();
        Self { item_id: item_id.to_string(), camera_motion, cuts, keep, reasons, error: None }
    }

    fn io(item_id: &str, error: String) -> Self {
        Self {
            item_id: item_id.to_string(),
            camera_motion: CameraMotion::Uncertain,
            cuts: Vec::new(),
            keep: false,
            reasons: vec!["io".into()],
            error: Some(error),
        }
    }
}

fn frame_histogram(f: &Frame) -> [u32; HIST_BINS] {
    let mut h = [0u32; HIST_BINS];
    for &l in f.luma() {
        h[(l >> 3) as usize] += 1;
    }
    h
}

/// Pair indices `k` (frames `k`, `k+1`) that look like shot boundaries.
pub fn detect_cuts_from_flows(pf: &PairFlows, cfg: &CutConfig) -> Vec<usize> {
    let frames = pf.analysis.frames();
    pf.flows
        .iter()
        .enumerate()
        .filter(|(k, f)| {
            let hist = histogram_intersection(&frame_histogram(&frames[*k]), &frame_histogram(&frames[k + 1]));
            let interior = f.interior_indices();
            let lost = interior.iter().filter(|&&i| f.cost[i] > cfg.lost_sad).count();
            let lost_frac = if interior.is_empty() { 0.0 } else { lost as f64 / interior.len() as f64 };
            hist < cfg.hist_thresh || lost_frac > cfg.loss_thresh
        })
        .map(|(k, _)| k)
        .collect()
}

pub fn detect_cuts(seq: &FrameSequence, cfg: &CurationConfig) -> Result<Vec<usize>, CurationError> {
    if seq.len() < 2 {
        return Err(CurationError::TooFewFrames(seq.len()));
    }
    let pf = pair_flows(seq, cfg.max_dim(), &cfg.flow)?;
    Ok(detect_cuts_from_flows(&pf, &cfg.cuts))
}

/// Pair-averaged similarity parameters plus the fit diagnostics used by the
/// classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MotionSummary {
    pub tx: f64,
    pub ty: f64,
    pub k: f64,
    pub theta: f64,
    pub residual_rms: f64,
    pub inlier_frac: f64,
    pub flow_magnitude: f64,
    pub diagonal: f64,
    pub reliable: bool,
}

pub fn summarize_motion(pf: &PairFlows, trim: &TrimParams) -> MotionSummary {
    let fits: Vec<GlobalMotion> = pf.flows.iter().map(|f| fit_global_motion(f, trim)).collect();
    let n = fits.len().max(1) as f64;
    let avg = |g: fn(&GlobalMotion) -> f64| fits.iter().map(g).sum::<f64>() / n;
    MotionSummary {
        tx: avg(|g| g.tx),
        ty: avg(|g| g.ty),
        k: avg(|g| g.k),
        theta: avg(|g| g.theta),
        residual_rms: avg(|g| g.residual_rms),
        inlier_frac: avg(|g| g.inlier_frac),
        flow_magnitude: pf.flows.iter().map(mean_magnitude).sum::<f64>() / n,
        diagonal: pf.diagonal(),
        reliable: !fits.is_empty() && fits.iter().all(|g| g.reliable),
    }
}

pub fn classify_summary(m: &MotionSummary, t: &MotionThresholds) -> CameraMotion {
    if !m.reliable {
        return CameraMotion::Uncertain;
    }
    let d = m.diagonal;
    let scale = m.k - 1.0;
    if m.tx.abs() < t.static_translation * d
        && m.ty.abs() < t.static_translation * d
        && scale.abs() < t.static_scale
        && m.theta.abs() < t.static_rotation
    {
        return CameraMotion::Static;
    }
    if m.residual_rms > t.residual_ratio * m.flow_magnitude || m.inlier_frac < t.min_inlier_frac {
        return CameraMotion::Uncertain;
    }
    let candidates = [
        (m.tx.abs() / (t.unit_translation * d), if m.tx > 0.0 { CameraMotion::PanRight } else { CameraMotion::PanLeft }),
        (m.ty.abs() / (t.unit_translation * d), if m.ty > 0.0 { CameraMotion::TiltDown } else { CameraMotion::TiltUp }),
        (scale.abs() / t.unit_scale, if scale > 0.0 { CameraMotion::ZoomIn } else { CameraMotion::ZoomOut }),
        (m.theta.abs() / t.unit_rotation, CameraMotion::Rotate),
    ];
    let strong: Vec<&(f64, CameraMotion)> = candidates.iter().filter(|(x, _)| *x >= 1.0).collect();
    match strong.as_slice() {
        [] => CameraMotion::Uncertain,
        [(_, c)] => *c,
        _ => CameraMotion::Mixed,
    }
}

pub fn classify_camera_motion(seq: &FrameSequence, cfg: &CurationConfig) -> Result<CameraMotion, CurationError> {
    if seq.len() < 2 {
        return Err(CurationError::TooFewFrames(seq.len()));
    }
    let pf = pair_flows(seq, cfg.max_dim(), &cfg.flow)?;
    Ok(classify_summary(&summarize_motion(&pf, &cfg.trim), &cfg.motion))
}

/// Cuts, then (if none) camera classification, sharing one flow pass.
pub fn curate_sequence(item_id: &str, seq: &FrameSequence, cfg: &CurationConfig) -> Result<CurationVerdict, CurationError> {
    if seq.len() < 2 {
        return Err(CurationError::TooFewFrames(seq.len()));
    }
    let pf = pair_flows(seq, cfg.max_dim(), &cfg.flow)?;
    let cuts = detect_cuts_from_flows(&pf, &cfg.cuts);
    let motion = if cuts.is_empty() {
        classify_summary(&summarize_motion(&pf, &cfg.trim), &cfg.motion)
    } else {
        CameraMotion::Uncertain
    };
    Ok(CurationVerdict::new(item_id, motion, cuts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationEntry {
    pub item_id: String,
    pub video_dir: PathBuf,
}

/// Reads a JSON list of entries; relative paths resolve against its directory.
pub fn load_curation_manifest(path: &Path) -> Result<Vec<CurationEntry>, CurationError> {
    let text = std::fs::read_to_string(path).map_err(|source| CurationError::Io { path: path.into(), source })?;
    let mut entries: Vec<CurationEntry> =
        serde_json::from_str(&text).map_err(|source| CurationError::Json { path: path.into(), source })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for e in &mut entries {
        e.video_dir = base.join(&e.video_dir);
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CurationOutcome {
    pub verdicts: Vec<CurationVerdict>,
}

impl CurationOutcome {
    pub fn keep(&self) -> Vec<&CurationVerdict> {
        self.verdicts.iter().filter(|v| v.keep).collect()
    }

    pub fn drop(&self) -> Vec<&CurationVerdict> {
        self.verdicts.iter().filter(|v| !v.keep).collect()
    }

    /// Writes `keep.json` and `drop.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), CurationError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CurationError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let keep = dir.join("keep.json");
        let drop = dir.join("drop.json");
        for (path, list) in [(&keep, self.keep()), (&drop, self.drop())] {
            let mut text = serde_json::to_string_pretty(&list).expect("verdicts serialize");
            text.push('\n');
            std::fs::write(path, text).map_err(io(path))?;
        }
        Ok((keep, drop))
    }
}

/// Curates entries in parallel; unreadable clips are dropped with reason `io`.
/// Verdicts come back sorted by item id.
pub fn curate(entries: &[CurationEntry], cfg: &CurationConfig) -> CurationOutcome {
    let mut verdicts: Vec<CurationVerdict> = entries
        .par_iter()
        .map(|e| {
            let result = load_sequence(&e.video_dir)
                .map_err(|err| err.to_string())
                .and_then(|seq| curate_sequence(&e.item_id, &seq, cfg).map_err(|err| err.to_string()));
            result.unwrap_or_else(|err| {
                tracing::warn!(item = %e.item_id, error = %err, "dropping unreadable clip");
                CurationVerdict::io(&e.item_id, err)
            })
        })
        .collect();
    verdicts.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    CurationOutcome { verdicts }
}
