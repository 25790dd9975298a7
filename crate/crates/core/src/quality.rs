//! Quality sub-metrics (motion smoothness, background and subject
//! consistency, naturalness) and the dynamics-gated quality contribution.
//!
//! All four sub-metrics lie in `[0, 1]`. The overall quality `q` is their mean
//! scaled to `[0, 100]`, and a clip's contribution to the benchmark quality is
//! `score^gamma * q`, so a motionless clip contributes nothing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsProfile, PairFlows};
use crate::flow::{warp_residual_over, FlowError, FlowField};
use crate::frame_io::{Frame, FrameSequence};

pub const HIST_BINS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum QualityError {
    #[error("need at least 4 interior blocks to split quartiles, got {0}")]
    EmptyQuartile(usize),
    #[error("flow count {flows} does not match {frames} frames")]
    FlowCount { flows: usize, frames: usize },
    #[error("flow fields are on different grids")]
    GridMismatch,
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityConfig {
    /// Mean per-pair acceleration (fraction of diagonal) that drives smoothness to 0.
    pub a_ref: f64,
    /// Mean normalised warp residual that drives naturalness to 0.
    pub r_ref: f64,
    /// Exponent applied to the dynamic score when gating quality.
    pub gamma: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self { a_ref: 0.01, r_ref: 0.1, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Background,
    Subject,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothness {
    pub ms: f64,
    /// Fewer than two flow fields: no acceleration evidence, `ms` is 1 by convention.
    pub insufficient: bool,
}

/// `1 - clamp(mean acceleration / a_ref)`, acceleration being the mean change
/// of interior-block flow between consecutive pairs, over the diagonal.
pub fn motion_smoothness(flows: &[FlowField], diag: f64, a_ref: f64) -> Result<Smoothness, QualityError> {
    if flows.len() < 2 {
        return Ok(Smoothness { ms: 1.0, insufficient: true });
    }
    let first = &flows[0];
    if flows.iter().any(|f| f.grid_w != first.grid_w || f.grid_h != first.grid_h) {
        return Err(QualityError::GridMismatch);
    }
    let interior = first.interior_indices();
    if interior.is_empty() {
        return Ok(Smoothness { ms: 1.0, insufficient: true });
    }
    let accel: f64 = flows
        .windows(2)
        .map(|w| {
            let s: f64 = interior.iter().map(|&i| (w[1].u[i] - w[0].u[i]).hypot(w[1].v[i] - w[0].v[i])).sum();
            s / interior.len() as f64 / diag
        })
        .sum::<f64>()
        / (flows.len() - 1) as f64;
    Ok(Smoothness { ms: 1.0 - (accel / a_ref).clamp(0.0, 1.0), insufficient: false })
}

/// 32-bin luma histogram of a `block`-square at `(x0, y0)`, sampled with
/// clamped coordinates.
pub fn block_histogram(frame: &Frame, x0: isize, y0: isize, block: usize) -> [u32; HIST_BINS] {
    let mut h = [0u32; HIST_BINS];
    for r in 0..block as isize {
        for c in 0..block as isize {
            h[(frame.luma_clamped(x0 + c, y0 + r) >> 3) as usize] += 1;
        }
    }
    h
}

/// Normalised histogram intersection in `[0, 1]`.
pub fn histogram_intersection(a: &[u32], b: &[u32]) -> f64 {
    let total: u32 = a.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let common: u32 = a.iter().zip(b).map(|(&x, &y)| x.min(y)).sum();
    f64::from(common) / f64::from(total)
}

/// Interior blocks ranked by time-averaged flow magnitude, ascending, ties by index.
fn ranked_blocks(flows: &[FlowField]) -> Vec<usize> {
    let interior = flows[0].interior_indices();
    let mut ranked: Vec<(f64, usize)> = interior
        .iter()
        .map(|&i| (flows.iter().map(|f| f.magnitude(i)).sum::<f64>() / flows.len() as f64, i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().map(|(_, i)| i).collect()
}

/// Histogram similarity of the least-moving (background) or most-moving
/// (subject) quartile of interior blocks across consecutive frames. Subject
/// blocks are followed along their flow.
pub fn region_consistency(seq: &FrameSequence, flows: &[FlowField], region: Region) -> Result<f64, QualityError> {
    if flows.len() + 1 != seq.len() {
        return Err(QualityError::FlowCount { flows: flows.len(), frames: seq.len() });
    }
    if flows.is_empty() {
        return Ok(1.0);
    }
    let first = &flows[0];
    if flows.iter().any(|f| f.grid_w != first.grid_w || f.grid_h != first.grid_h) {
        return Err(QualityError::GridMismatch);
    }
    if first.width != seq.width() || first.height != seq.height() {
        return Err(QualityError::Flow(FlowError::FieldMismatch));
    }
    let ranked = ranked_blocks(flows);
    let q = ranked.len() / 4;
    if q == 0 {
        return Err(QualityError::EmptyQuartile(ranked.len()));
    }
    let selected = match region {
        Region::Background => &ranked[..q],
        Region::Subject => &ranked[ranked.len() - q..],
    };
    let block = first.block;
    let frames = seq.frames();
    let mut total = 0.0;
    for (k, f) in flows.iter().enumerate() {
        for &idx in selected {
            let x0 = ((idx % f.grid_w) * block) as isize;
            let y0 = ((idx / f.grid_w) * block) as isize;
            let (dx, dy) = match region {
                Region::Background => (0, 0),
                Region::Subject => (f.u[idx].round() as isize, f.v[idx].round() as isize),
            };
            let ha = block_histogram(&frames[k], x0, y0, block);
            let hb = block_histogram(&frames[k + 1], x0 + dx, y0 + dy, block);
            total += histogram_intersection(&ha, &hb);
        }
    }
    Ok(total / (flows.len() * selected.len()) as f64)
}

/// Pluggable naturalness judge. Must return a verdict in `[0, 1]`.
pub trait NaturalnessScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, seq: &FrameSequence) -> Result<f64, String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Naturalness {
    pub nat: f64,
    /// `"proxy"` or `"external:<scorer name>"`.
    pub source: String,
}

/// Warp-residual proxy: `1 - clamp(mean residual / 255 / r_ref)`.
pub fn naturalness_proxy(seq: &FrameSequence, flows: &[FlowField], r_ref: f64) -> Result<f64, QualityError> {
    if flows.len() + 1 != seq.len() {
        return Err(QualityError::FlowCount { flows: flows.len(), frames: seq.len() });
    }
    if flows.is_empty() {
        return Ok(1.0);
    }
    let frames = seq.frames();
    let mut acc = 0.0;
    for (k, f) in flows.iter().enumerate() {
        acc += warp_residual_over(&frames[k], &frames[k + 1], f, &f.interior_indices())?;
    }
    let mean = acc / flows.len() as f64 / 255.0;
    Ok(1.0 - (mean / r_ref).clamp(0.0, 1.0))
}

pub fn naturalness(
    seq: &FrameSequence,
    flows: &[FlowField],
    scorer: Option<&dyn NaturalnessScorer>,
    r_ref: f64,
) -> Result<Naturalness, QualityError> {
    if let Some(s) = scorer {
        match s.score(seq) {
            Ok(v) if (0.0..=1.0).contains(&v) => {
                return Ok(Naturalness { nat: v, source: format!("external:{}", s.name()) });
            }
            Ok(v) => tracing::warn!(scorer = s.name(), value = v, "naturalness verdict outside [0, 1], using proxy"),
            Err(e) => tracing::warn!(scorer = s.name(), error = %e, "naturalness scorer failed, using proxy"),
        }
    }
    Ok(Naturalness { nat: naturalness_proxy(seq, flows, r_ref)?, source: "proxy".into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityProfile {
    pub ms: f64,
    pub bc: f64,
    pub sc: f64,
    pub nat: f64,
    pub q: f64,
    pub dbq_contrib: f64,
    pub nat_source: String,
    #[serde(default)]
    pub ms_insufficient: bool,
}

impl QualityProfile {
    /// Assembles the profile from sub-metrics and the dynamic score.
    pub fn compose(ms: f64, bc: f64, sc: f64, nat: f64, score: f64, gamma: f64) -> Self {
        let q = 100.0 * (ms + bc + sc + nat) / 4.0;
        Self { ms, bc, sc, nat, q, dbq_contrib: score.powf(gamma) * q, nat_source: "proxy".into(), ms_insufficient: false }
    }
}

pub fn quality_profile(
    pf: &PairFlows,
    dynamics: &DynamicsProfile,
    cfg: &QualityConfig,
    scorer: Option<&dyn NaturalnessScorer>,
) -> Result<QualityProfile, QualityError> {
    let smooth = motion_smoothness(&pf.flows, pf.diagonal(), cfg.a_ref)?;
    let bc = region_consistency(&pf.analysis, &pf.flows, Region::Background)?;
    let sc = region_consistency(&pf.analysis, &pf.flows, Region::Subject)?;
    let nat = naturalness(&pf.analysis, &pf.flows, scorer, cfg.r_ref)?;
    let mut profile = QualityProfile::compose(smooth.ms, bc, sc, nat.nat, dynamics.score, cfg.gamma);
    profile.nat_source = nat.source;
    profile.ms_insufficient = smooth.insufficient;
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{dynamic_score_from_flows, pair_flows, DynamicsConfig};
    use crate::flow::FlowParams;
    use crate::frame_io::{synthesize_moving, synthesize_static, textured_frame, Motion};

    fn flows_of(seq: &FrameSequence) -> PairFlows {
        pair_flows(seq, 512, &FlowParams::default()).unwrap()
    }

    #[test]
    fn smoothness_cases() {
        let diag = 64f64.hypot(64.0);
        let steady = vec![FlowField::uniform(64, 64, 16, 3.0, 0.0); 4];
        assert_eq!(motion_smoothness(&steady, diag, 0.01).unwrap().ms, 1.0);
        let alternating: Vec<_> = (0..4)
            .map(|k| FlowField::uniform(64, 64, 16, if k % 2 == 0 { 3.0 } else { -3.0 }, 0.0))
            .collect();
        // 6 / 90.51 = 0.0663 per pair, far above a_ref
        assert_eq!(motion_smoothness(&alternating, diag, 0.01).unwrap().ms, 0.0);
        let one = motion_smoothness(&steady[..1], diag, 0.01).unwrap();
        assert!(one.insufficient && one.ms == 1.0);
    }

    #[test]
    fn intersection_bounds() {
        let a = [4u32, 0, 0, 0];
        let b = [0u32, 4, 0, 0];
        assert_eq!(histogram_intersection(&a, &a), 1.0);
        assert_eq!(histogram_intersection(&a, &b), 0.0);
        assert_eq!(histogram_intersection(&[2, 2, 0, 0], &a), 0.5);
    }

    #[test]
    fn static_clip_is_perfect_but_gated() {
        let seq = synthesize_static(&textured_frame(64, 64, 1), 10).unwrap();
        let pf = flows_of(&seq);
        let dy = dynamic_score_from_flows("s", &pf, &DynamicsConfig::default());
        let q = quality_profile(&pf, &dy, &QualityConfig::default(), None).unwrap();
        assert_eq!((q.ms, q.bc, q.sc, q.nat), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(q.q, 100.0);
        assert_eq!(q.dbq_contrib, 0.0);
    }

    #[test]
    fn translating_clip_is_perfect_and_counts() {
        let seq = synthesize_moving(64, 64, 10, &Motion::Translate { dx: 3, dy: 0 }, 4).unwrap();
        let pf = flows_of(&seq);
        let dy = dynamic_score_from_flows("t", &pf, &DynamicsConfig::default());
        let q = quality_profile(&pf, &dy, &QualityConfig::default(), None).unwrap();
        assert_eq!(dy.score, 1.0);
        assert_eq!(q.ms, 1.0);
        assert_eq!(q.nat, 1.0);
        assert_eq!(q.sc, 1.0);
    }

    #[test]
    fn arithmetic_of_composition() {
        let p = QualityProfile::compose(0.8, 0.8, 0.8, 0.8, 0.5, 1.0);
        assert!((p.q - 80.0).abs() < 1e-12);
        assert!((p.dbq_contrib - 40.0).abs() < 1e-12);
    }

    #[test]
    fn quartiles_need_four_blocks() {
        let seq = synthesize_static(&textured_frame(16, 16, 1), 3).unwrap();
        let pf = flows_of(&seq);
        assert_eq!(region_consistency(&pf.analysis, &pf.flows, Region::Subject), Err(QualityError::EmptyQuartile(1)));
    }

    struct Fixed(Result<f64, String>);

    impl NaturalnessScorer for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn score(&self, _: &FrameSequence) -> Result<f64, String> {
            self.0.clone()
        }
    }

    #[test]
    fn external_scorer_and_fallback() {
        let seq = synthesize_static(&textured_frame(64, 64, 1), 3).unwrap();
        let pf = flows_of(&seq);
        let ok = Fixed(Ok(0.25));
        let n = naturalness(&pf.analysis, &pf.flows, Some(&ok), 0.1).unwrap();
        assert_eq!(n, Naturalness { nat: 0.25, source: "external:fixed".into() });
        let bad = Fixed(Err("offline".into()));
        let n = naturalness(&pf.analysis, &pf.flows, Some(&bad), 0.1).unwrap();
        assert_eq!(n, Naturalness { nat: 1.0, source: "proxy".into() });
    }

    #[test]
    fn noise_clip_is_unnatural() {
        let seq = synthesize_moving(64, 64, 6, &Motion::Noise, 3).unwrap();
        let pf = flows_of(&seq);
        let n = naturalness_proxy(&pf.analysis, &pf.flows, 0.1).unwrap();
        assert_eq!(n, 0.0);
    }
}
