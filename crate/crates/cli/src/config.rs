use std::path::{Path, PathBuf};

use dive_core::curation::{CurationConfig, CutConfig, MotionThresholds};
use dive_core::degree::LlmClientConfig;
use dive_core::dynamics::DynamicsConfig;
use dive_core::quality::QualityConfig;
use serde::{Deserialize, Serialize};

/// Settings file. Every section is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dynamics: DynamicsConfig,
    pub quality: QualityConfig,
    pub curation: CurationSection,
    pub llm: LlmClientConfig,
    /// Replacement stem table for offline degree grading.
    pub lexicon: Option<PathBuf>,
    /// Replacement degree-request template.
    pub degree_template: Option<PathBuf>,
    /// Concurrent degree requests.
    pub llm_in_flight: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationSection {
    pub cuts: CutConfig,
    pub motion: MotionThresholds,
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} must be a positive number, got {v}"))
    }
}

fn fraction(name: &str, v: f64) -> Result<(), String> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} must lie in [0, 1], got {v}"))
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.lexicon, &mut cfg.degree_template].into_iter().flatten() {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    /// Range checks beyond what the types enforce.
    pub fn validate(&self) -> Result<(), String> {
        let d = &self.dynamics;
        d.flow.validate().map_err(|e| e.to_string())?;
        positive("dynamics.d_ref", d.d_ref)?;
        if d.max_dim < d.flow.block {
            return Err(format!("dynamics.max_dim {} is smaller than the flow block {}", d.max_dim, d.flow.block));
        }
        positive("dynamics.trim.median_factor", d.trim.median_factor)?;
        if d.trim.floor_px < 0.0 {
            return Err("dynamics.trim.floor_px must be non-negative".into());
        }
        let q = &self.quality;
        positive("quality.a_ref", q.a_ref)?;
        positive("quality.r_ref", q.r_ref)?;
        positive("quality.gamma", q.gamma)?;
        let c = &self.curation;
        fraction("curation.cuts.hist_thresh", c.cuts.hist_thresh)?;
        fraction("curation.cuts.loss_thresh", c.cuts.loss_thresh)?;
        positive("curation.cuts.lost_sad", c.cuts.lost_sad)?;
        let m = &c.motion;
        for (name, v) in [
            ("static_translation", m.static_translation),
            ("static_scale", m.static_scale),
            ("static_rotation", m.static_rotation),
            ("unit_translation", m.unit_translation),
            ("unit_scale", m.unit_scale),
            ("unit_rotation", m.unit_rotation),
            ("residual_ratio", m.residual_ratio),
        ] {
            positive(&format!("curation.motion.{name}"), v)?;
        }
        fraction("curation.motion.min_inlier_frac", m.min_inlier_frac)?;
        self.llm.validate().map_err(|e| e.to_string())?;
        if self.llm_in_flight == Some(0) {
            return Err("llm_in_flight must be at least 1".into());
        }
        Ok(())
    }

    pub fn curation_config(&self) -> CurationConfig {
        CurationConfig {
            cuts: self.curation.cuts,
            motion: self.curation.motion,
            flow: self.dynamics.flow,
            trim: self.dynamics.trim,
            max_dim: Some(self.dynamics.max_dim),
        }
    }
}
