//! Pyramidal block-matching flow, flow-compensated residuals and robust
//! similarity-model fitting of the global (camera) motion.
//!
//! Flow is integer-valued: each block of the finest level carries the
//! displacement `(u, v)` that minimises the sum of absolute luma differences
//! between the block in frame `a` and the displaced block in frame `b`.
//! Content moving right yields `u > 0`.

use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_io::Frame;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("frame sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("frame {width}x{height} is smaller than one {block}px block")]
    FrameTooSmall { width: usize, height: usize, block: usize },
    #[error("flow field does not match the frames")]
    FieldMismatch,
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    pub block: usize,
    pub levels: usize,
    pub search_coarse: i32,
    pub search_refine: i32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { block: 16, levels: 3, search_coarse: 4, search_refine: 2 }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.block < 2 {
            return Err(FlowError::InvalidParams(format!("block must be >= 2, got {}", self.block)));
        }
        if self.levels == 0 {
            return Err(FlowError::InvalidParams("levels must be >= 1".into()));
        }
        if self.search_coarse < 0 || self.search_refine < 0 {
            return Err(FlowError::InvalidParams("search ranges must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-block displacement grid for one frame pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub block: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Mean absolute difference per pixel of the matched block, in luma levels.
    pub cost: Vec<f64>,
}

impl FlowField {
    /// A field with every block set to `(u, v)` and zero cost.
    pub fn uniform(width: usize, height: usize, block: usize, u: f64, v: f64) -> Self {
        let grid_w = width / block;
        let grid_h = height / block;
        let n = grid_w * grid_h;
        Self { width, height, grid_w, grid_h, block, u: vec![u; n], v: vec![v; n], cost: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.u[i].hypot(self.v[i])
    }

    /// Indices of blocks not on the outermost ring. Falls back to every block
    /// when the grid has no interior.
    pub fn interior_indices(&self) -> Vec<usize> {
        if self.grid_w < 3 || self.grid_h < 3 {
            return (0..self.len()).collect();
        }
        let mut out = Vec::with_capacity((self.grid_w - 2) * (self.grid_h - 2));
        for j in 1..self.grid_h - 1 {
            for i in 1..self.grid_w - 1 {
                out.push(j * self.grid_w + i);
            }
        }
        out
    }

    /// Block center relative to the frame center, in pixel-index coordinates.
    pub fn centered_position(&self, idx: usize) -> (f64, f64) {
        let i = idx % self.grid_w;
        let j = idx / self.grid_w;
        let b = self.block as f64;
        let x = i as f64 * b + (b - 1.0) / 2.0 - (self.width as f64 - 1.0) / 2.0;
        let y = j as f64 * b + (b - 1.0) / 2.0 - (self.height as f64 - 1.0) / 2.0;
        (x, y)
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Writes the field as `flow_%04d.json` into `dir`.
    pub fn dump(&self, dir: &Path, pair_index: usize) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(format!("flow_{pair_index:04}.json")), text)
    }
}

/// Gray plane used for the pyramid.
struct Plane {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Plane {
    fn from_frame(f: &Frame) -> Self {
        Self { w: f.width(), h: f.height(), px: f.luma().to_vec() }
    }

    fn half(&self) -> Self {
        let w = self.w / 2;
        let h = self.h / 2;
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = |dx: usize, dy: usize| self.px[(2 * y + dy) * self.w + 2 * x + dx] as u32;
                px.push(((s(0, 0) + s(1, 0) + s(0, 1) + s(1, 1) + 2) / 4) as u8);
            }
        }
        Self { w, h, px }
    }

    #[inline]
    fn at_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.px[y * self.w + x]
    }

    /// SAD between the block at `(x0, y0)` here and the block displaced by
    /// `(u, v)` in `other`.
    fn sad(&self, other: &Plane, x0: usize, y0: usize, block: usize, u: i32, v: i32) -> u64 {
        let bx = x0 as isize + u as isize;
        let by = y0 as isize + v as isize;
        let inside = bx >= 0 && by >= 0 && bx as usize + block <= other.w && by as usize + block <= other.h;
        let mut acc = 0u64;
        if inside {
            let (bx, by) = (bx as usize, by as usize);
            for r in 0..block {
                let a = &self.px[(y0 + r) * self.w + x0..(y0 + r) * self.w + x0 + block];
                let b = &other.px[(by + r) * other.w + bx..(by + r) * other.w + bx + block];
                acc += a.iter().zip(b).map(|(&p, &q)| p.abs_diff(q) as u64).sum::<u64>();
            }
        } else {
            for r in 0..block {
                for c in 0..block {
                    let p = self.px[(y0 + r) * self.w + x0 + c];
                    let q = other.at_clamped(bx + c as isize, by + r as isize);
                    acc += p.abs_diff(q) as u64;
                }
            }
        }
        acc
    }
}

/// Exhaustive search in a square window around `(pu, pv)`. Ties go to the
/// smallest `|u|+|v|`, then smallest `u`, then smallest `v`.
fn search(a: &Plane, b: &Plane, x0: usize, y0: usize, block: usize, pu: i32, pv: i32, range: i32) -> (i32, i32, u64) {
    let mut best = (pu, pv, u64::MAX);
    for v in pv - range..=pv + range {
        for u in pu - range..=pu + range {
            let sad = a.sad(b, x0, y0, block, u, v);
            let better = match sad.cmp(&best.2) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => {
                    (u.abs() + v.abs(), u, v) < (best.0.abs() + best.1.abs(), best.0, best.1)
                }
            };
            if better {
                best = (u, v, sad);
            }
        }
    }
    best
}

/// Number of pyramid levels actually used for a `w`x`h` frame: the coarsest
/// level keeps its short side at 32 px or more and at least one block.
pub fn effective_levels(w: usize, h: usize, params: &FlowParams) -> usize {
    let floor = 32.max(params.block);
    let mut levels = params.levels.max(1);
    while levels > 1 && (w.min(h) >> (levels - 1)) < floor {
        levels -= 1;
    }
    levels
}

/// Coarse-to-fine block-matching flow from `a` to `b`.
pub fn estimate_flow(a: &Frame, b: &Frame, params: &FlowParams) -> Result<FlowField, FlowError> {
    params.validate()?;
    if a.width() != b.width() || a.height() != b.height() {
        return Err(FlowError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let (w, h) = (a.width(), a.height());
    let block = params.block;
    if w.min(h) < block {
        return Err(FlowError::FrameTooSmall { width: w, height: h, block });
    }
    let levels = effective_levels(w, h, params);

    let mut pa = vec![Plane::from_frame(a)];
    let mut pb = vec![Plane::from_frame(b)];
    for _ in 1..levels {
        let next_a = pa.last().unwrap().half();
        let next_b = pb.last().unwrap().half();
        pa.push(next_a);
        pb.push(next_b);
    }

    // (grid_w, grid_h, u, v, sad) of the level below the current one
    let mut prev: Option<(usize, usize, Vec<i32>, Vec<i32>)> = None;
    let mut sads = Vec::new();
    for level in (0..levels).rev() {
        let (la, lb) = (&pa[level], &pb[level]);
        let gw = la.w / block;
        let gh = la.h / block;
        let mut us = Vec::with_capacity(gw * gh);
        let mut vs = Vec::with_capacity(gw * gh);
        sads.clear();
        for j in 0..gh {
            for i in 0..gw {
                let (x0, y0) = (i * block, j * block);
                let (pu, pv, range) = match &prev {
                    None => (0, 0, params.search_coarse),
                    Some((cw, ch, cu, cv)) => {
                        // parent block containing this block's center
                        let ci = ((x0 + block / 2) / 2 / block).min(cw - 1);
                        let cj = ((y0 + block / 2) / 2 / block).min(ch - 1);
                        let p = cj * cw + ci;
                        (2 * cu[p], 2 * cv[p], params.search_refine)
                    }
                };
                let (u, v, sad) = search(la, lb, x0, y0, block, pu, pv, range);
                us.push(u);
                vs.push(v);
                sads.push(sad);
            }
        }
        prev = Some((gw, gh, us, vs));
    }

    let (grid_w, grid_h, us, vs) = prev.expect("at least one level");
    let area = (block * block) as f64;
    Ok(FlowField {
        width: w,
        height: h,
        grid_w,
        grid_h,
        block,
        u: us.into_iter().map(f64::from).collect(),
        v: vs.into_iter().map(f64::from).collect(),
        cost: sads.iter().map(|&s| s as f64 / area).collect(),
    })
}

/// Mean displacement length over all blocks.
pub fn mean_magnitude(f: &FlowField) -> f64 {
    if f.is_empty() {
        return 0.0;
    }
    (0..f.len()).map(|i| f.magnitude(i)).sum::<f64>() / f.len() as f64
}

/// Mean displacement length over the given blocks.
pub fn mean_magnitude_over(f: &FlowField, blocks: &[usize]) -> f64 {
    if blocks.is_empty() {
        return 0.0;
    }
    blocks.iter().map(|&i| f.magnitude(i)).sum::<f64>() / blocks.len() as f64
}

/// Mean absolute luma difference per pixel between each block of `a` and its
/// flow-displaced counterpart in `b`, over every block.
pub fn warp_residual(a: &Frame, b: &Frame, f: &FlowField) -> Result<f64, FlowError> {
    let all: Vec<usize> = (0..f.len()).collect();
    warp_residual_over(a, b, f, &all)
}

/// [`warp_residual`] restricted to `blocks`.
pub fn warp_residual_over(a: &Frame, b: &Frame, f: &FlowField, blocks: &[usize]) -> Result<f64, FlowError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(FlowError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    if f.width != a.width() || f.height != a.height() {
        return Err(FlowError::FieldMismatch);
    }
    if blocks.is_empty() {
        return Ok(0.0);
    }
    let bs = f.block;
    let mut acc = 0u64;
    for &idx in blocks {
        let x0 = (idx % f.grid_w) * bs;
        let y0 = (idx / f.grid_w) * bs;
        let du = f.u[idx].round() as isize;
        let dv = f.v[idx].round() as isize;
        for r in 0..bs {
            for c in 0..bs {
                let (x, y) = (x0 + c, y0 + r);
                let p = a.luma_at(x, y);
                let q = b.luma_clamped(x as isize + du, y as isize + dv);
                acc += p.abs_diff(q) as u64;
            }
        }
    }
    Ok(acc as f64 / (blocks.len() * bs * bs) as f64)
}

/// Trimming schedule for [`fit_global_motion`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrimParams {
    pub passes: usize,
    pub median_factor: f64,
    pub floor_px: f64,
}

impl Default for TrimParams {
    fn default() -> Self {
        Self { passes: 2, median_factor: 2.0, floor_px: 0.5 }
    }
}

/// Four-parameter similarity displacement model:
/// `du = tx + (k-1)x - θy`, `dv = ty + θx + (k-1)y` about the frame center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalMotion {
    pub tx: f64,
    pub ty: f64,
    pub k: f64,
    pub theta: f64,
    /// RMS displacement error over the blocks retained by the final fit.
    pub residual_rms: f64,
    /// Retained blocks as a fraction of all blocks offered to the fit.
    pub inlier_frac: f64,
    /// False when the system was degenerate; the parameters are then zero motion.
    pub reliable: bool,
}

impl GlobalMotion {
    pub fn unreliable() -> Self {
        Self { tx: 0.0, ty: 0.0, k: 1.0, theta: 0.0, residual_rms: 0.0, inlier_frac: 0.0, reliable: false }
    }

    /// Displacement the model predicts at centered position `(x, y)`.
    pub fn predict(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.k - 1.0;
        (self.tx + s * x - self.theta * y, self.ty + self.theta * x + s * y)
    }
}

const MIN_FIT_BLOCKS: usize = 8;

/// Least-squares solve on `blocks`; `None` when the normal matrix is singular.
fn solve_similarity(f: &FlowField, blocks: &[usize]) -> Option<[f64; 4]> {
    if blocks.len() < 2 {
        return None;
    }
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for &i in blocks {
        let (x, y) = f.centered_position(i);
        let rows = [([1.0, 0.0, x, -y], f.u[i]), ([0.0, 1.0, y, x], f.v[i])];
        for (r, d) in rows {
            let r = Vector4::from(r);
            ata += r * r.transpose();
            atb += r * d;
        }
    }
    let svd = ata.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < 1e-12 {
        return None;
    }
    let p = ata.lu().solve(&atb)?;
    p.iter().all(|v| v.is_finite()).then(|| [p[0], p[1], p[2], p[3]])
}

fn residual(f: &FlowField, i: usize, p: &[f64; 4]) -> f64 {
    let (x, y) = f.centered_position(i);
    let du = p[0] + p[2] * x - p[3] * y;
    let dv = p[1] + p[3] * x + p[2] * y;
    (f.u[i] - du).hypot(f.v[i] - dv)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust similarity fit over every block of `f`.
pub fn fit_global_motion(f: &FlowField, trim: &TrimParams) -> GlobalMotion {
    let all: Vec<usize> = (0..f.len()).collect();
    fit_global_motion_over(f, &all, trim)
}

/// Robust similarity fit over `blocks`. After each solve, blocks whose
/// residual exceeds `max(median_factor * median, floor_px)` are dropped and
/// the model is refit, `trim.passes` times.
pub fn fit_global_motion_over(f: &FlowField, blocks: &[usize], trim: &TrimParams) -> GlobalMotion {
    if blocks.len() < MIN_FIT_BLOCKS {
        return GlobalMotion::unreliable();
    }
    let mut inliers = blocks.to_vec();
    let Some(mut p) = solve_similarity(f, &inliers) else {
        return GlobalMotion::unreliable();
    };
    for _ in 0..trim.passes {
        let mut res: Vec<f64> = inliers.iter().map(|&i| residual(f, i, &p)).collect();
        let thresh = (trim.median_factor * median(&mut res)).max(trim.floor_px);
        let kept: Vec<usize> = inliers.iter().copied().filter(|&i| residual(f, i, &p) <= thresh).collect();
        if kept.len() < MIN_FIT_BLOCKS {
            return GlobalMotion::unreliable();
        }
        if kept.len() == inliers.len() {
            break;
        }
        inliers = kept;
        match solve_similarity(f, &inliers) {
            Some(q) => p = q,
            None => return GlobalMotion::unreliable(),
        }
    }
    let sq: f64 = inliers.iter().map(|&i| residual(f, i, &p).powi(2)).sum();
    GlobalMotion {
        tx: p[0],
        ty: p[1],
        k: 1.0 + p[2],
        theta: p[3],
        residual_rms: (sq / inliers.len() as f64).sqrt(),
        inlier_frac: inliers.len() as f64 / blocks.len() as f64,
        reliable: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_io::{synthesize_moving, textured_frame, Motion};

    fn field_from(width: usize, height: usize, block: usize, gen: impl Fn(f64, f64) -> (f64, f64)) -> FlowField {
        let mut f = FlowField::uniform(width, height, block, 0.0, 0.0);
        for i in 0..f.len() {
            let (x, y) = f.centered_position(i);
            let (u, v) = gen(x, y);
            f.u[i] = u;
            f.v[i] = v;
        }
        f
    }

    #[test]
    fn identical_frames_give_zero_field() {
        let a = textured_frame(96, 64, 4);
        let f = estimate_flow(&a, &a, &FlowParams::default()).unwrap();
        assert_eq!((f.grid_w, f.grid_h), (6, 4));
        assert!(f.u.iter().chain(&f.v).chain(&f.cost).all(|&x| x == 0.0));
    }

    #[test]
    fn shifted_frames_recover_shift() {
        for (dx, dy) in [(3, 0), (0, -2), (-1, 2)] {
            let s = synthesize_moving(128, 128, 2, &Motion::Translate { dx, dy }, 11).unwrap();
            let f = estimate_flow(&s.frames()[0], &s.frames()[1], &FlowParams::default()).unwrap();
            for i in f.interior_indices() {
                assert_eq!((f.u[i], f.v[i]), (dx as f64, dy as f64), "block {i}");
                assert_eq!(f.cost[i], 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = textured_frame(64, 64, 1);
        let b = textured_frame(64, 48, 1);
        assert!(matches!(estimate_flow(&a, &b, &FlowParams::default()), Err(FlowError::DimensionMismatch(..))));
        let tiny = textured_frame(8, 8, 1);
        assert!(matches!(
            estimate_flow(&tiny, &tiny, &FlowParams::default()),
            Err(FlowError::FrameTooSmall { .. })
        ));
    }

    #[test]
    fn level_cap() {
        let p = FlowParams::default();
        assert_eq!(effective_levels(256, 256, &p), 3);
        assert_eq!(effective_levels(64, 64, &p), 2);
        assert_eq!(effective_levels(40, 40, &p), 1);
    }

    #[test]
    fn magnitudes() {
        let f = FlowField::uniform(64, 64, 16, 3.0, 0.0);
        assert_eq!(mean_magnitude(&f), 3.0);
        assert_eq!(mean_magnitude(&FlowField::uniform(64, 64, 16, 0.0, 0.0)), 0.0);
        let mut g = FlowField::uniform(64, 32, 16, 0.0, 0.0);
        for i in 0..g.len() / 2 {
            g.u[i] = 3.0;
            g.v[i] = 4.0;
        }
        assert_eq!(mean_magnitude(&g), 2.5);
    }

    #[test]
    fn residual_prefers_correct_flow() {
        let s = synthesize_moving(96, 96, 2, &Motion::Translate { dx: 2, dy: 1 }, 5).unwrap();
        let (a, b) = (&s.frames()[0], &s.frames()[1]);
        let exact = FlowField::uniform(96, 96, 16, 2.0, 1.0);
        let zero = FlowField::uniform(96, 96, 16, 0.0, 0.0);
        let r_exact = warp_residual_over(a, b, &exact, &exact.interior_indices()).unwrap();
        assert_eq!(r_exact, 0.0);
        assert!(warp_residual(a, b, &exact).unwrap() <= warp_residual(a, b, &zero).unwrap());
        assert_eq!(warp_residual(a, a, &zero).unwrap(), 0.0);
    }

    #[test]
    fn uniform_field_fit_is_exact() {
        let f = FlowField::uniform(256, 256, 16, 5.0, 0.0);
        let g = fit_global_motion(&f, &TrimParams::default());
        assert!(g.reliable);
        assert!((g.tx - 5.0).abs() < 1e-9 && g.ty.abs() < 1e-9);
        assert!((g.k - 1.0).abs() < 1e-9 && g.theta.abs() < 1e-9);
        assert_eq!(g.inlier_frac, 1.0);
    }

    #[test]
    fn similarity_field_fit_is_exact() {
        let (tx, ty, s, th) = (1.5, -0.75, 0.013, -0.004);
        let f = field_from(320, 240, 16, |x, y| (tx + s * x - th * y, ty + th * x + s * y));
        let g = fit_global_motion(&f, &TrimParams::default());
        assert!((g.tx - tx).abs() < 1e-9);
        assert!((g.ty - ty).abs() < 1e-9);
        assert!((g.k - 1.0 - s).abs() < 1e-9);
        assert!((g.theta - th).abs() < 1e-9);
        assert_eq!(g.inlier_frac, 1.0);
        assert!(g.residual_rms < 1e-9);
    }

    #[test]
    fn trimmed_fit_ignores_outliers() {
        let mut f = FlowField::uniform(320, 320, 16, 5.0, 0.0);
        // every tenth block is a wild outlier: 40 of 400
        for i in (0..f.len()).step_by(10) {
            f.u[i] = 40.0;
            f.v[i] = 40.0;
        }
        let g = fit_global_motion(&f, &TrimParams::default());
        assert!(g.reliable);
        assert!((g.tx - 5.0).abs() <= 0.2, "tx = {}", g.tx);
        assert!((g.inlier_frac - 0.9).abs() < 1e-12);
    }

    #[test]
    fn clustered_outliers_are_trimmed() {
        let mut f = FlowField::uniform(320, 320, 16, 5.0, 0.0);
        // 10% of blocks in one corner
        for j in 0..4 {
            for i in 0..10 {
                let idx = j * f.grid_w + i;
                f.u[idx] = 40.0;
                f.v[idx] = 40.0;
            }
        }
        let g = fit_global_motion(&f, &TrimParams::default());
        assert!((g.tx - 5.0).abs() <= 0.2, "tx = {}", g.tx);
    }

    #[test]
    fn degenerate_fits_are_flagged() {
        let f = FlowField::uniform(48, 32, 16, 1.0, 0.0);
        assert!(!fit_global_motion(&f, &TrimParams::default()).reliable);
        let g = FlowField::uniform(256, 256, 16, 1.0, 1.0);
        assert!(!fit_global_motion_over(&g, &[5; 10], &TrimParams::default()).reliable);
    }

    #[test]
    fn zoom_pair_scale() {
        let s = synthesize_moving(256, 256, 2, &Motion::Zoom { k: 1.02 }, 3).unwrap();
        let f = estimate_flow(&s.frames()[0], &s.frames()[1], &FlowParams::default()).unwrap();
        let g = fit_global_motion(&f, &TrimParams::default());
        assert!((g.k - 1.02).abs() <= 0.005, "k = {}", g.k);
        assert!(g.tx.abs() < 0.5 && g.ty.abs() < 0.5);
    }

    #[test]
    fn dump_writes_json() {
        let dir = tempfile::tempdir().unwrap();
        let f = FlowField::uniform(32, 32, 16, 1.0, -1.0);
        f.dump(dir.path(), 3).unwrap();
        let text = std::fs::read_to_string(dir.path().join("flow_0003.json")).unwrap();
        let back: FlowField = serde_json::from_str(&text).unwrap();
        assert_eq!(back, f);
    }
}
