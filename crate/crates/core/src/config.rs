//! Run configuration: one JSON document with a section per subsystem.
//! Unknown keys are rejected up front; every key has a default.

use serde::{Deserialize, Serialize};

use crate::field::FieldConfig;
use crate::render::SamplingConfig;
use crate::scene::DepthMode;
use crate::train::{NormalMode, OptimConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub sampling: SamplingConfig,
    pub model: FieldConfig,
    pub loss: LossConfig,
    pub train: OptimConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Shape preset: sphere | torus | box | blend.
    pub shape: String,
    pub views: usize,
    pub resolution: usize,
    pub depth_mode: DepthMode,
    /// Std-dev of depth noise as a fraction of the per-image depth range
    /// (relative-noisy mode only).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            shape: "sphere".into(),
            views: 8,
            resolution: 64,
            depth_mode: DepthMode::Metric,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Eikonal term weight (alpha).
    pub eikonal_weight: f64,
    /// Depth-normal consistency term weight (beta).
    pub normal_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eikonal_weight: 0.1,
            normal_weight: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Marching cubes grid resolution (cells per axis).
    pub mc_resolution: usize,
    pub chamfer_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mc_resolution: 128,
            chamfer_samples: crate::mesh::CHAMFER_SAMPLES,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene.views < 2 {
            return Err(Error::Config("scene.views must be at least 2".into()));
        }
        if self.scene.resolution < 8 {
            return Err(Error::Config("scene.resolution must be at least 8".into()));
        }
        if crate::scene::AnalyticShape::by_name(&self.scene.shape).is_none() {
            return Err(Error::Config(format!(
                "unknown scene.shape '{}' (expected one of {:?})",
                self.scene.shape,
                crate::scene::AnalyticShape::names()
            )));
        }
        if self.train.rays_per_step == 0 {
            return Err(Error::Config("train.rays_per_step must be positive".into()));
        }
        if self.loss.eikonal_weight < 0.0 || self.loss.normal_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.model.validate()?;
        if self.eval.mc_resolution < 8 {
            return Err(Error::Config("eval.mc_resolution must be at least 8".into()));
        }
        Ok(())
    }

    /// Flat `section.key = default` listing used by the CLI help text.
    pub fn document_defaults() -> Vec<(String, String)> {
        let val = serde_json::to_value(RunConfig::default()).expect("serialize defaults");
        let mut out = Vec::new();
        flatten("", &val, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Normal supervision arm of the ablation.
pub fn parse_mode(s: &str) -> Result<NormalMode> {
    match s {
        "off" => Ok(NormalMode::Off),
        "accumulated" => Ok(NormalMode::Accumulated),
        "localized" => Ok(NormalMode::Localized),
        other => Err(Error::Config(format!(
            "unknown normal mode '{other}' (expected off | accumulated | localized)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"scene": {"shappe": "sphere"}}"#);
        assert!(err.is_err());
        let err = RunConfig::from_json(r#"{"unknown_section": {}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_documents_inherit_defaults() {
        let cfg = RunConfig::from_json(r#"{"scene": {"views": 3}}"#).unwrap();
        assert_eq!(cfg.scene.views, 3);
        assert_eq!(cfg.scene.resolution, 64);
        assert_eq!(cfg.loss.normal_weight, 0.5);
    }

    #[test]
    fn documented_defaults_cover_every_section() {
        let docs = RunConfig::document_defaults();
        for section in ["scene", "sampling", "model", "loss", "train", "eval"] {
            assert!(
                docs.iter().any(|(k, _)| k.starts_with(section)),
                "missing section {section}"
            );
        }
        assert!(docs.iter().any(|(k, v)| k == "loss.eikonal_weight" && v == "0.1"));
        assert!(docs.iter().any(|(k, v)| k == "loss.normal_weight" && v == "0.5"));
    }

    #[test]
    fn semantic_validation_catches_bad_values() {
        assert!(RunConfig::from_json(r#"{"scene": {"views": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"scene": {"shape": "cow"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": {"eikonal_weight": -1.0}}"#).is_err());
    }
}
