//! Run configuration: one JSON file with optional `model`, `train` and
//! `synthetic` sections, each overlaid onto built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{Map, Value};
use weatherfusion::model::ModelConfig;
use weatherfusion::synthetic::SyntheticConfig;
use weatherfusion::train::{Stage, TrainConfig};

use crate::usage;

#[derive(Debug, Default, Clone)]
pub struct RunConfig {
    raw: Map<String, Value>,
}

/// Recursively overlays `top` onto `base`; non-object values replace.
pub fn overlay(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                overlay(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

fn section_into<T: serde::de::DeserializeOwned + serde::Serialize>(base: T, section: Option<&Value>, name: &str) -> Result<T> {
    let Some(top) = section else { return Ok(base) };
    let mut v = serde_json::to_value(&base)?;
    overlay(&mut v, top);
    serde_json::from_value(v).map_err(|e| usage(format!("invalid `{name}` config: {e}")))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(raw)) => Ok(Self { raw }),
            Ok(_) => Err(usage(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => Err(usage(format!("{}: {e}", path.display()))),
        }
    }

    pub fn has_model(&self) -> bool {
        self.raw.contains_key("model")
    }

    /// `model.preset` picks `default` or `reduced` before the overlay.
    pub fn model(&self) -> Result<ModelConfig> {
        let mut section = self.raw.get("model").cloned();
        let preset = match section.as_mut().and_then(Value::as_object_mut) {
            Some(m) => m.remove("preset"),
            None => None,
        };
        let base = match preset.as_ref().map(|p| p.as_str()) {
            None | Some(Some("default")) => ModelConfig::default(),
            Some(Some("reduced")) => ModelConfig::reduced(),
            Some(other) => return Err(usage(format!("unknown model preset {other:?} (default, reduced)"))),
        };
        let mut cfg = section_into(base, section.as_ref(), "model")?;
        let explicit_in = section
            .as_ref()
            .and_then(|s| s.pointer("/fusion/in_channels"))
            .is_some();
        if !explicit_in {
            cfg.fusion.in_channels = cfg.fusion_in_channels();
        }
        cfg.validate().map_err(|e| usage(format!("invalid model config: {e}")))?;
        Ok(cfg)
    }

    pub fn train(&self, stage: Stage) -> Result<TrainConfig> {
        let cfg = section_into(TrainConfig::for_stage(stage), self.raw.get("train"), "train")?;
        if cfg.stage != stage {
            return Err(usage(format!("config `train.stage` is {:?} but --stage is {stage:?}", cfg.stage)));
        }
        Ok(cfg)
    }

    pub fn synthetic(&self, base: SyntheticConfig) -> Result<SyntheticConfig> {
        section_into(base, self.raw.get("synthetic"), "synthetic")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overlay_merges_objects_and_replaces_leaves() {
        let mut base = json!({"a": {"b": 1, "c": [1, 2]}, "d": 3});
        overlay(&mut base, &json!({"a": {"c": [9]}, "e": true}));
        assert_eq!(base, json!({"a": {"b": 1, "c": [9]}, "d": 3, "e": true}));
    }

    #[test]
    fn reduced_preset_with_ablation_sources_rewires_fusion() {
        let c = RunConfig {
            raw: json!({"model": {"preset": "reduced", "sources": {"phydnet": false, "sat2rad": false}}})
                .as_object()
                .cloned()
                .unwrap(),
        };
        let m = c.model().unwrap();
        assert_eq!(m.geometry.sat_size, 60);
        assert_eq!(m.fusion.in_channels, 44);
    }

    #[test]
    fn train_section_overrides_stage_defaults() {
        let c = RunConfig {
            raw: json!({"train": {"max_steps": 7}}).as_object().cloned().unwrap(),
        };
        let t = c.train(Stage::Phydnet).unwrap();
        assert_eq!((t.max_steps, t.batch_size), (7, 16));
    }
}
