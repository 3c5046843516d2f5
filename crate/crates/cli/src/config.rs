//! Run configuration: one JSON document, optionally patched by `--set`
//! overrides on dotted paths.

use std::path::{Path, PathBuf};

use organnet_core::data::PhantomSpec;
use organnet_core::engine::TrainConfig;
use organnet_core::losses::LossConfig;
use organnet_core::network::NetworkConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "ORGANNET_SEED";

/// The published JSON Schema for [`RunConfig`].
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

fn default_ratios() -> [f64; 3] {
    [0.75, 0.125, 0.125]
}
fn default_input_shape() -> [usize; 3] {
    [48, 256, 256]
}
fn default_workers() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// [`TrainConfig`] without the loss, which has its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "TrainSection::initial_lr")]
    pub initial_lr: f64,
    #[serde(default = "TrainSection::decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "TrainSection::decay_every_epochs")]
    pub decay_every_epochs: usize,
    #[serde(default = "TrainSection::lr_floor")]
    pub lr_floor: f64,
    #[serde(default = "TrainSection::batch_size")]
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Falls back to `ORGANNET_SEED`, then 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl TrainSection {
    fn defaults() -> TrainConfig {
        TrainConfig::new(0, 0, LossConfig::with_alpha(vec![]))
    }
    fn initial_lr() -> f64 {
        Self::defaults().initial_lr
    }
    fn decay_factor() -> f64 {
        Self::defaults().decay_factor
    }
    fn decay_every_epochs() -> usize {
        Self::defaults().decay_every_epochs
    }
    fn lr_floor() -> f64 {
        Self::defaults().lr_floor
    }
    fn batch_size() -> usize {
        Self::defaults().batch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Corpus directory (`split.json` + `cases/`).
    pub corpus: PathBuf,
    /// Network input `[z, y, x]`; every case is resized to it.
    #[serde(default = "default_input_shape")]
    pub input_shape: [usize; 3],
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
    /// When set and `corpus` holds no split yet, generate this many
    /// phantoms there first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSection>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub cases: usize,
    pub spec: PhantomSpec,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let mut path = e.path().to_string();
            let message = e.inner().to_string();
            // name the missing key itself rather than its parent
            if let Some(field) = message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
                path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
            }
            CliError::Config { path, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |section: &str, f: &str, message: String| CliError::Config {
            path: format!("{section}.{f}"),
            message,
        };
        if let Err(e) = self.network.validate() {
            let f = match &e {
                organnet_core::network::NetworkError::InvalidConfig { field, .. } => field.to_string(),
                organnet_core::network::NetworkError::Gridding { .. } => "hdc_dilations".into(),
                _ => "network".into(),
            };
            return Err(field("network", &f, e.to_string()));
        }
        if let Err(e) = self.loss.validate(self.network.num_classes) {
            let f = match &e {
                organnet_core::losses::LossError::AlphaLength { .. } => "alpha",
                organnet_core::losses::LossError::InvalidConfig { field, .. } => field,
                _ => "loss",
            };
            return Err(field("loss", f, e.to_string()));
        }
        if let Err(e) = self.train_config().validate() {
            let f = match &e {
                organnet_core::engine::EngineError::InvalidConfig { field, .. } => *field,
                _ => "train",
            };
            return Err(field("train", f, e.to_string()));
        }
        if let Err(e) = organnet_core::network::Network::check_input_shape(self.data.input_shape) {
            return Err(field("data", "input_shape", e.to_string()));
        }
        if self.data.workers == 0 {
            return Err(field("data", "workers", "must be at least 1".into()));
        }
        if let Some(p) = &self.data.phantom {
            if p.spec.num_classes != self.network.num_classes {
                return Err(field(
                    "data",
                    "phantom.spec.num_classes",
                    format!("{} differs from network.num_classes {}", p.spec.num_classes, self.network.num_classes),
                ));
            }
            p.spec
                .validate()
                .map_err(|e| field("data", "phantom.spec", e.to_string()))?;
        }
        Ok(())
    }

    /// Seed from the config, else `ORGANNET_SEED`, else 0.
    pub fn seed(&self) -> Result<u64, CliError> {
        match self.train.seed {
            Some(s) => Ok(s),
            None => env_seed().map(|s| s.unwrap_or(0)),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            initial_lr: t.initial_lr,
            decay_factor: t.decay_factor,
            decay_every_epochs: t.decay_every_epochs,
            lr_floor: t.lr_floor,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            max_steps: t.max_steps,
            seed: t.seed.unwrap_or(0),
            loss: self.loss.clone(),
        }
    }
}

pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| CliError::Config {
            path: SEED_ENV.into(),
            message: format!("`{s}` is not an unsigned integer"),
        }),
        Err(_) => Ok(None),
    }
}

/// Apply `a.b.c=value`. The value is parsed as JSON when possible and kept
/// as a string otherwise; intermediate objects are created on demand.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| CliError::Config {
        path: assignment.into(),
        message: "override must look like `section.key=value`".into(),
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config {
            path: path.into(),
            message: "empty path segment".into(),
        });
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| CliError::Config {
            path: keys[..i].join("."),
            message: "not an object; cannot descend".into(),
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "network": {"variant": "organnet25d", "num_classes": 3},
            "loss": {"alpha": [0.5, 1.0, 4.0]},
            "train": {"max_epochs": 2, "seed": 1},
            "data": {"corpus": "corpus", "input_shape": [8, 32, 32]}
        })
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_value(base()).unwrap();
        assert_eq!(cfg.train.initial_lr, 1e-3);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.data.split_ratios, [0.75, 0.125, 0.125]);
        assert_eq!(cfg.network.hdc_dilations, vec![1, 2, 5]);
        assert_eq!(cfg.train_config().loss.alpha, vec![0.5, 1.0, 4.0]);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let mut v = base();
        v["train"]["learning_rate"] = json!(0.1);
        match RunConfig::from_value(v).unwrap_err() {
            CliError::Config { path, message } => {
                assert_eq!(path, "train.learning_rate");
                assert!(message.contains("learning_rate"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn missing_and_bad_alpha() {
        let mut v = base();
        v["loss"].as_object_mut().unwrap().remove("alpha");
        assert!(matches!(RunConfig::from_value(v).unwrap_err(), CliError::Config { path, .. } if path == "loss.alpha"));
        let mut v = base();
        v["loss"]["alpha"] = json!([1.0, 1.0]);
        assert!(matches!(RunConfig::from_value(v).unwrap_err(), CliError::Config { path, .. } if path == "loss.alpha"));
    }

    #[test]
    fn gridding_is_a_config_error() {
        let mut v = base();
        v["network"]["hdc_dilations"] = json!([2, 4, 8]);
        assert!(matches!(RunConfig::from_value(v).unwrap_err(), CliError::Config { path, .. } if path == "network.hdc_dilations"));
    }

    #[test]
    fn overrides() {
        let mut v = base();
        apply_override(&mut v, "train.max_epochs=7").unwrap();
        apply_override(&mut v, "network.variant=3dunet-se-2d-dc").unwrap();
        apply_override(&mut v, "data.phantom.cases=4").unwrap();
        assert_eq!(v["train"]["max_epochs"], json!(7));
        assert_eq!(v["network"]["variant"], json!("3dunet-se-2d-dc"));
        assert_eq!(v["data"]["phantom"]["cases"], json!(4));
        assert!(apply_override(&mut v, "train.max_epochs.x=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn schema_lists_every_key() {
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        let mut v = base();
        v["data"]["phantom"] = json!({"cases": 4, "spec": {"seed": 1, "shape": [8, 32, 32], "num_classes": 3}});
        v["train"]["max_steps"] = json!(10);
        let cfg = RunConfig::from_value(v).unwrap();
        let full = serde_json::to_value(&cfg).unwrap();
        check_keys(&schema, &schema, &full, "");
    }

    fn resolve<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
        match node.get("$ref").and_then(Value::as_str) {
            Some(r) => {
                let name = r.trim_start_matches("#/$defs/");
                &root["$defs"][name]
            }
            None => node,
        }
    }

    fn check_keys(root: &Value, schema: &Value, value: &Value, at: &str) {
        let schema = resolve(root, schema);
        if let Value::Object(map) = value {
            assert_eq!(schema["additionalProperties"], json!(false), "{at} must be closed");
            for (k, v) in map {
                let sub = &schema["properties"][k];
                assert!(!sub.is_null(), "schema lacks {at}.{k}");
                check_keys(root, sub, v, &format!("{at}.{k}"));
            }
            for r in schema["required"].as_array().into_iter().flatten() {
                assert!(map.contains_key(r.as_str().unwrap()), "{at}.{r} required but absent");
            }
        }
    }
}
