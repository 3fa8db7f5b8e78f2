//! Flat dotted-key configuration files.
//!
//! A config file is a sequence of `section.key = value` lines (with `#`
//! comments). Values are plain scalars, so file diffs and command-line
//! overrides (`--set key=value`) stay trivial to reason about. Unknown keys
//! are rejected rather than silently ignored. Precedence is: built-in
//! defaults, then the config file, then `--set` overrides, then dedicated
//! command-line flags.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::engine::{AblationFlags, TrainConfig};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::synthworld::GenConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {msg}")]
    File { path: String, msg: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?} as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
    #[error("config: {0}")]
    Invalid(String),
}

/// Every accepted key. Kept as one table so typos fail loudly and the CLI
/// can print the inventory.
pub const KNOWN_KEYS: &[&str] = &[
    // dataset generation
    "gen.train_scenes",
    "gen.test_scenes",
    "gen.categories",
    "gen.appearance_dim",
    "gen.room_x",
    "gen.room_y",
    "gen.room_z",
    "gen.objects_min",
    "gen.objects_max",
    "gen.distractors_min",
    "gen.distractors_max",
    "gen.size_min",
    "gen.size_max",
    "gen.floor_bias",
    "gen.queries_per_scene",
    "gen.max_place_retries",
    "gen.discriminative_gap",
    "gen.relation_margin",
    "gen.relation_proximity",
    "gen.m_max",
    "gen.conf_threshold",
    "noise.jitter_std",
    "noise.class_noise_temp",
    "noise.false_positive_rate",
    "noise.drop_rate",
    "noise.appearance_std",
    // model architecture
    "model.embed_dim",
    "model.text_layers",
    "model.fusion_layers",
    "model.heads",
    "model.max_tokens",
    // loss weights and temperatures
    "loss.lambda_se",
    "loss.lambda_pn",
    "loss.lambda_phr",
    "loss.lambda_rel",
    "loss.tau",
    "loss.tau_se",
    // training
    "train.batch_size",
    "train.epochs",
    "train.lr",
    "train.momentum",
    "train.negatives",
    "train.extraction_fidelity",
    "train.aux_weight",
    "train.enable_c1",
    "train.enable_c2",
    "train.enable_i1",
    "train.enable_i2",
];

/// Numbered aliases for the loss weights, accepted on input and mapped to
/// the canonical names.
const ALIASES: &[(&str, &str)] = &[
    ("loss.lambda1", "loss.lambda_se"),
    ("loss.lambda2", "loss.lambda_pn"),
    ("loss.lambda3", "loss.lambda_phr"),
    ("loss.lambda4", "loss.lambda_rel"),
];

/// A validated key→value table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; `#` starts a comment; blank lines are
    /// skipped. Later lines win over earlier ones.
    pub fn parse_text(text: &str) -> Result<ConfigMap, ConfigError> {
        let mut map = ConfigMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            map.set(key.trim(), value.trim())?;
        }
        Ok(map)
    }

    pub fn load(path: &str) -> Result<ConfigMap, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_string(),
            msg: e.to_string(),
        })?;
        Self::parse_text(&text)
    }

    /// Inserts one binding, canonicalizing aliases and rejecting unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let canonical = ALIASES
            .iter()
            .find(|(alias, _)| *alias == key)
            .map(|(_, c)| *c)
            .unwrap_or(key);
        if !KNOWN_KEYS.contains(&canonical) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.entries.insert(canonical.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` override strings (e.g. from `--set`), which win
    /// over file contents.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: 0,
                    text: item.clone(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn get_parsed<T: std::str::FromStr>(
        &self,
        key: &str,
        wanted: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                wanted,
            }),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.get_parsed(key, "a number")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.get_parsed(key, "a non-negative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" | "on" => Ok(Some(true)),
                "false" | "0" | "no" | "off" => Ok(Some(false)),
                _ => Err(ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                    wanted: "a boolean",
                }),
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

macro_rules! set_if {
    ($map:expr, $key:expr, $getter:ident, $target:expr) => {
        if let Some(v) = $map.$getter($key)? {
            $target = v;
        }
    };
}

/// Dataset-generation settings from defaults plus the map.
pub fn gen_config_from(map: &ConfigMap) -> Result<GenConfig, ConfigError> {
    let mut cfg = GenConfig::default();
    set_if!(map, "gen.train_scenes", get_usize, cfg.train_scenes);
    set_if!(map, "gen.test_scenes", get_usize, cfg.test_scenes);
    set_if!(map, "gen.categories", get_usize, cfg.categories);
    set_if!(map, "gen.appearance_dim", get_usize, cfg.appearance_dim);
    set_if!(map, "gen.room_x", get_f64, cfg.room_extent[0]);
    set_if!(map, "gen.room_y", get_f64, cfg.room_extent[1]);
    set_if!(map, "gen.room_z", get_f64, cfg.room_extent[2]);
    set_if!(map, "gen.objects_min", get_usize, cfg.objects_min);
    set_if!(map, "gen.objects_max", get_usize, cfg.objects_max);
    set_if!(map, "gen.distractors_min", get_usize, cfg.distractors_min);
    set_if!(map, "gen.distractors_max", get_usize, cfg.distractors_max);
    set_if!(map, "gen.size_min", get_f64, cfg.size_min);
    set_if!(map, "gen.size_max", get_f64, cfg.size_max);
    set_if!(map, "gen.floor_bias", get_f64, cfg.floor_bias);
    set_if!(map, "gen.queries_per_scene", get_usize, cfg.queries_per_scene);
    set_if!(map, "gen.max_place_retries", get_usize, cfg.max_place_retries);
    set_if!(map, "gen.discriminative_gap", get_f64, cfg.discriminative_gap);
    set_if!(map, "gen.relation_margin", get_f64, cfg.relation_params.margin);
    set_if!(map, "gen.relation_proximity", get_f64, cfg.relation_params.proximity);
    set_if!(map, "gen.m_max", get_usize, cfg.m_max);
    set_if!(map, "gen.conf_threshold", get_f64, cfg.conf_threshold);
    set_if!(map, "noise.jitter_std", get_f64, cfg.noise.jitter_std);
    set_if!(map, "noise.class_noise_temp", get_f64, cfg.noise.class_noise_temp);
    set_if!(map, "noise.false_positive_rate", get_f64, cfg.noise.false_positive_rate);
    set_if!(map, "noise.drop_rate", get_f64, cfg.noise.drop_rate);
    set_if!(map, "noise.appearance_std", get_f64, cfg.noise.appearance_std);
    Ok(cfg)
}

/// Architecture settings from defaults plus the map. Dataset-tied fields
/// (category count, appearance width, room extent) are filled in later from
/// the dataset metadata, not from config.
pub fn model_config_from(map: &ConfigMap) -> Result<ModelConfig, ConfigError> {
    let mut cfg = ModelConfig::default();
    set_if!(map, "model.embed_dim", get_usize, cfg.embed_dim);
    set_if!(map, "model.text_layers", get_usize, cfg.text_layers);
    set_if!(map, "model.fusion_layers", get_usize, cfg.fusion_layers);
    set_if!(map, "model.heads", get_usize, cfg.heads);
    set_if!(map, "model.max_tokens", get_usize, cfg.max_tokens);
    Ok(cfg)
}

pub fn loss_weights_from(map: &ConfigMap) -> Result<LossWeights, ConfigError> {
    let mut w = LossWeights::default();
    set_if!(map, "loss.lambda_se", get_f64, w.lambda_se);
    set_if!(map, "loss.lambda_pn", get_f64, w.lambda_pn);
    set_if!(map, "loss.lambda_phr", get_f64, w.lambda_phr);
    set_if!(map, "loss.lambda_rel", get_f64, w.lambda_rel);
    set_if!(map, "loss.tau", get_f64, w.tau);
    set_if!(map, "loss.tau_se", get_f64, w.tau_se);
    w.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(w)
}

pub fn train_config_from(map: &ConfigMap) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    cfg.weights = loss_weights_from(map)?;
    set_if!(map, "train.batch_size", get_usize, cfg.batch_size);
    set_if!(map, "train.epochs", get_usize, cfg.epochs);
    set_if!(map, "train.lr", get_f64, cfg.lr);
    set_if!(map, "train.momentum", get_f64, cfg.momentum);
    set_if!(map, "train.negatives", get_usize, cfg.negatives);
    set_if!(map, "train.extraction_fidelity", get_f64, cfg.extraction_fidelity);
    set_if!(map, "train.aux_weight", get_f64, cfg.aux_weight);
    let mut flags = AblationFlags::default();
    set_if!(map, "train.enable_c1", get_bool, flags.c1);
    set_if!(map, "train.enable_c2", get_bool, flags.c2);
    set_if!(map, "train.enable_i1", get_bool, flags.i1);
    set_if!(map, "train.enable_i2", get_bool, flags.i2);
    cfg.flags = flags;
    cfg.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_overrides() {
        let text = "
# benchmark shrunk for tests
gen.train_scenes = 12
gen.test_scenes=4   # inline comment

train.lr = 0.1
";
        let mut map = ConfigMap::parse_text(text).unwrap();
        assert_eq!(map.get("gen.train_scenes"), Some("12"));
        assert_eq!(map.get("gen.test_scenes"), Some("4"));
        map.apply_overrides(&["train.lr=0.25".to_string()]).unwrap();
        let cfg = train_config_from(&map).unwrap();
        assert_eq!(cfg.lr, 0.25);
        let gen = gen_config_from(&map).unwrap();
        assert_eq!((gen.train_scenes, gen.test_scenes), (12, 4));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ConfigMap::parse_text("gen.trian_scenes = 12"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ConfigMap::parse_text("no equals sign here"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        let map = ConfigMap::parse_text("train.epochs = soon").unwrap();
        assert!(matches!(
            train_config_from(&map),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn lambda_aliases_map_to_canonical_names() {
        let map = ConfigMap::parse_text("loss.lambda1 = 0.9\nloss.lambda4 = 0.1").unwrap();
        let w = loss_weights_from(&map).unwrap();
        assert_eq!(w.lambda_se, 0.9);
        assert_eq!(w.lambda_rel, 0.1);
        assert_eq!(w.lambda_pn, LossWeights::default().lambda_pn);
    }

    #[test]
    fn defaults_survive_an_empty_map() {
        let map = ConfigMap::new();
        assert_eq!(gen_config_from(&map).unwrap(), GenConfig::default());
        assert_eq!(model_config_from(&map).unwrap(), ModelConfig::default());
        assert_eq!(loss_weights_from(&map).unwrap(), LossWeights::default());
    }

    #[test]
    fn invalid_semantic_values_are_rejected() {
        let map = ConfigMap::parse_text("loss.tau = 0").unwrap();
        assert!(matches!(loss_weights_from(&map), Err(ConfigError::Invalid(_))));
        let map = ConfigMap::parse_text("train.batch_size = 0").unwrap();
        assert!(matches!(train_config_from(&map), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn boolean_forms() {
        let map =
            ConfigMap::parse_text("train.enable_c2 = off\ntrain.enable_i2 = 1").unwrap();
        let cfg = train_config_from(&map).unwrap();
        assert!(!cfg.flags.c2);
        assert!(cfg.flags.i2);
        assert!(ConfigMap::parse_text("train.enable_c1 = maybe")
            .and_then(|m| m.get_bool("train.enable_c1"))
            .is_err());
    }
}
