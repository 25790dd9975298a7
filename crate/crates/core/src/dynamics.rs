//! Per-video dynamic score: how much a clip moves, as a number in `[0, 1]`.
//!
//! Each consecutive frame pair contributes the mean flow length over interior
//! blocks, normalised by the frame diagonal. The score is the mean of those
//! per-pair values divided by `d_ref` and clamped, so a clip whose content
//! moves `d_ref` of the diagonal per frame saturates at 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{
    estimate_flow, fit_global_motion, mean_magnitude_over, FlowError, FlowField, FlowParams, TrimParams,
};
use crate::frame_io::{downscale_for_flow, FrameSequence};

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("dynamic score needs at least two frames, got {0}")]
    TooFewFrames(usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Per-pair motion, as a fraction of the diagonal, that saturates the score.
    pub d_ref: f64,
    /// Subtract the fitted camera motion before measuring.
    pub subject_only: bool,
    /// Flow runs on frames downscaled so the longer side is at most this.
    pub max_dim: usize,
    pub flow: FlowParams,
    pub trim: TrimParams,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { d_ref: 0.02, subject_only: false, max_dim: 512, flow: FlowParams::default(), trim: TrimParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsProfile {
    pub item_id: String,
    pub score: f64,
    pub raw_mean: f64,
    pub per_pair_motion: Vec<f64>,
    pub subject_only: bool,
}

/// Frames at flow resolution plus the flow of every consecutive pair.
#[derive(Debug, Clone)]
pub struct PairFlows {
    pub analysis: FrameSequence,
    pub flows: Vec<FlowField>,
}

impl PairFlows {
    pub fn diagonal(&self) -> f64 {
        (self.analysis.width() as f64).hypot(self.analysis.height() as f64)
    }
}

/// Downscales `seq` and estimates flow for every consecutive pair. Pairs are
/// computed in parallel; the output is in pair order.
pub fn pair_flows(seq: &FrameSequence, max_dim: usize, params: &FlowParams) -> Result<PairFlows, FlowError> {
    let analysis = downscale_for_flow(seq, max_dim);
    let frames = analysis.frames();
    let flows = (0..frames.len().saturating_sub(1))
        .into_par_iter()
        .map(|k| estimate_flow(&frames[k], &frames[k + 1], params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PairFlows { analysis, flows })
}

pub fn dynamic_score(seq: &FrameSequence, cfg: &DynamicsConfig) -> Result<DynamicsProfile, DynamicsError> {
    if seq.len() < 2 {
        return Err(DynamicsError::TooFewFrames(seq.len()));
    }
    let pf = pair_flows(seq, cfg.max_dim, &cfg.flow)?;
    Ok(dynamic_score_from_flows(seq.item_id(), &pf, cfg))
}

/// Per-pair normalised motion of interior blocks.
pub fn pair_motion(f: &FlowField, subject_only: bool, trim: &TrimParams) -> f64 {
    let interior = f.interior_indices();
    let diag = f.diagonal();
    if !subject_only {
        return mean_magnitude_over(f, &interior) / diag;
    }
    let g = fit_global_motion(f, trim);
    if !g.reliable || interior.is_empty() {
        return mean_magnitude_over(f, &interior) / diag;
    }
    let total: f64 = interior
        .iter()
        .map(|&i| {
            let (x, y) = f.centered_position(i);
            let (pu, pv) = g.predict(x, y);
            (f.u[i] - pu).hypot(f.v[i] - pv)
        })
        .sum();
    total / interior.len() as f64 / diag
}

pub fn dynamic_score_from_flows(item_id: &str, pf: &PairFlows, cfg: &DynamicsConfig) -> DynamicsProfile {
    let per_pair_motion: Vec<f64> = pf.flows.iter().map(|f| pair_motion(f, cfg.subject_only, &cfg.trim)).collect();
    let raw_mean = if per_pair_motion.is_empty() {
        0.0
    } else {
        per_pair_motion.iter().sum::<f64>() / per_pair_motion.len() as f64
    };
    let score = (raw_mean / cfg.d_ref).clamp(0.0, 1.0);
    DynamicsProfile { item_id: item_id.to_string(), score, raw_mean, per_pair_motion, subject_only: cfg.subject_only }
}

/// True when the clip shows essentially no motion.
pub fn is_static(profile: &DynamicsProfile, eps: f64) -> bool {
    profile.raw_mean < eps
}

pub const STATIC_EPS: f64 = 1e-4;
