//! The single JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use stabletrack::decorr::DecorrConfig;
use stabletrack::diffnet::{AdamConfig, LossConfig, NetConfig};
use stabletrack::synth::{CategorySpec, DatasetConfig, MotionSpec, SceneSpec};
use stabletrack::trackeval::EvalConfig;
use stabletrack::trainloop::{TrainConfig, TrainMode};

/// Invalid or unreadable configuration; the CLI exits with status 2.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path} is not valid JSON: {source}")]
    Syntax { path: PathBuf, source: serde_json::Error },
    #[error("bad override `{0}`: expected key.path=value")]
    Override(String),
    #[error("override `{key}` descends into non-object value")]
    OverridePath { key: String },
    #[error("config does not match the schema: {0}")]
    Schema(serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub seed: u64,
    pub categories: Vec<CategorySpec>,
    pub observed: Vec<String>,
    pub unseen: String,
    pub tracklets: usize,
    pub frames: usize,
    pub motion: MotionSpec,
    pub scene: SceneSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            seed: 0,
            categories: d.categories,
            observed: d.observed,
            unseen: d.unseen,
            tracklets: d.tracklets,
            frames: d.frames,
            motion: d.motion,
            scene: d.scene,
        }
    }
}

impl DatasetSection {
    pub fn to_dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            categories: self.categories.clone(),
            observed: self.observed.clone(),
            unseen: self.unseen.clone(),
            tracklets: self.tracklets,
            frames: self.frames,
            motion: self.motion.clone(),
            scene: self.scene.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: u64,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub sigma_center: f64,
    pub sigma_yaw: f64,
    pub search_offset: f64,
    pub loss: LossConfig,
    pub decorr: DecorrConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.adam.lr,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            sigma_center: t.sigma_center,
            sigma_yaw: t.sigma_yaw,
            search_offset: t.search_offset,
            loss: t.loss,
            decorr: t.decorr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
    pub search_offset: f64,
    pub min_search_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self { seed: 0, search_offset: e.search_offset, min_search_points: e.min_search_points }
    }
}

/// Default locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: NetConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

/// Sets `a.b.c = value` in a JSON object, creating intermediate objects.
/// The value is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::OverridePath { key: key.into() })?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node.as_object_mut().ok_or_else(|| ConfigError::OverridePath { key: key.into() })?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads the config file (defaults when `None`), applies overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc = match path {
            None => Value::Object(Map::new()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.into(), source })?;
                serde_json::from_str(&text).map_err(|source| ConfigError::Syntax { path: p.into(), source })?
            }
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(ConfigError::Schema)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.dataset.to_dataset_config().validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        if !(self.eval.search_offset >= 0.0) {
            return Err(ConfigError::Invalid("eval.search_offset must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            sigma_center: t.sigma_center,
            sigma_yaw: t.sigma_yaw,
            search_offset: t.search_offset,
            net: self.model.clone(),
            loss: t.loss.clone(),
            adam: AdamConfig { lr: t.lr, ..AdamConfig::default() },
            decorr: t.decorr.clone(),
        }
    }

    /// Evaluation settings for a network with the given point counts.
    pub fn eval_config(&self, net: &NetConfig) -> EvalConfig {
        EvalConfig {
            search_offset: self.eval.search_offset,
            min_search_points: self.eval.min_search_points,
            n_template: net.n_template,
            n_search: net.n_search,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = ["train.mode=decorrelated".to_string(), "model.feature_dim=16".into(), "train.decorr.lr=0.1".into()];
        let c = RunConfig::load(None, &sets).unwrap();
        assert_eq!(c.train.mode, TrainMode::Decorrelated);
        assert_eq!(c.model.feature_dim, 16);
        assert_eq!(c.train.decorr.lr, 0.1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::load(None, &["train.bogus=1".into()]), Err(ConfigError::Schema(_))));
        assert!(matches!(RunConfig::load(None, &["nosection.x=1".into()]), Err(ConfigError::Schema(_))));
        assert!(matches!(RunConfig::load(None, &["novalue".into()]), Err(ConfigError::Override(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(RunConfig::load(None, &["train.batch_size=1".into()]), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::load(None, &["dataset.unseen=pedcapsule".into()]), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn fingerprint_changes_with_content() {
        let a = RunConfig::default();
        let b = RunConfig::load(None, &["train.seed=4".into()]).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
