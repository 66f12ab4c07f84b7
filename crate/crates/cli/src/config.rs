//! Settings file: `{"seed", "log_level", "checkpoint_dir", "model", "train"}`.
//! `model` and `train` are partial objects laid over the built-in defaults;
//! command-line flags win over anything read here.

use std::path::{Path, PathBuf};

use fuyu_core::model::ModelConfig;
use fuyu_core::train::TrainConfig;
use fuyu_core::{Error, Result};
use serde_json::{Map, Value};

#[derive(Debug, Default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub log_level: Option<String>,
    pub checkpoint_dir: Option<PathBuf>,
    pub model: Option<Map<String, Value>>,
    pub train: Option<Map<String, Value>>,
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Input {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(path, e.to_string()))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| bad(path, e.to_string()))?;
        let Value::Object(mut obj) = v else {
            return Err(bad(path, "settings must be a JSON object"));
        };
        let mut take_obj = |key: &str| -> Result<Option<Map<String, Value>>> {
            match obj.remove(key) {
                None => Ok(None),
                Some(Value::Object(m)) => Ok(Some(m)),
                Some(_) => Err(bad(path, format!("{key} must be an object"))),
            }
        };
        let model = take_obj("model")?;
        let train = take_obj("train")?;
        let seed = match obj.remove("seed") {
            None => None,
            Some(v) => Some(
                v.as_u64()
                    .ok_or_else(|| bad(path, "seed must be a non-negative integer"))?,
            ),
        };
        let str_field = |obj: &mut Map<String, Value>, key: &str| -> Result<Option<String>> {
            match obj.remove(key) {
                None => Ok(None),
                Some(Value::String(s)) => Ok(Some(s)),
                Some(_) => Err(bad(path, format!("{key} must be a string"))),
            }
        };
        let log_level = str_field(&mut obj, "log_level")?;
        let checkpoint_dir = str_field(&mut obj, "checkpoint_dir")?.map(PathBuf::from);
        if let Some(k) = obj.keys().next() {
            return Err(Error::Config(format!("unknown settings key {k:?}")));
        }
        Ok(Self {
            seed,
            log_level,
            checkpoint_dir,
            model,
            train,
        })
    }

    /// The toy configuration with any `model` overrides applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        overlay(ModelConfig::toy(), self.model.as_ref(), "model")
    }

    pub fn has_model(&self) -> bool {
        self.model.is_some()
    }

    pub fn train_config(&self, base: TrainConfig) -> Result<TrainConfig> {
        overlay(base, self.train.as_ref(), "train")
    }
}

fn overlay<T>(base: T, patch: Option<&Map<String, Value>>, what: &str) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let Some(patch) = patch else { return Ok(base) };
    let mut v = serde_json::to_value(&base).expect("defaults serialize");
    let obj = v.as_object_mut().expect("struct serializes to an object");
    for (k, val) in patch {
        if !obj.contains_key(k) {
            return Err(Error::Config(format!("unknown {what} setting {k:?}")));
        }
        obj.insert(k.clone(), val.clone());
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what} settings: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn partial_model_override() {
        let (_d, p) = write(r#"{"seed": 9, "model": {"n_layers": 2}}"#);
        let c = FileConfig::load(&p).unwrap();
        assert_eq!(c.seed, Some(9));
        let m = c.model_config().unwrap();
        assert_eq!((m.n_layers, m.hidden), (2, 128));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_d, p) = write(r#"{"sed": 9}"#);
        assert!(FileConfig::load(&p).is_err());
        let (_d, p) = write(r#"{"model": {"layers": 2}}"#);
        assert!(FileConfig::load(&p).unwrap().model_config().is_err());
    }

    #[test]
    fn train_overlay() {
        let (_d, p) = write(r#"{"train": {"epochs": 7, "resolution": "fixed:60"}}"#);
        let t = FileConfig::load(&p)
            .unwrap()
            .train_config(TrainConfig::standard_full())
            .unwrap();
        assert_eq!(t.epochs, 7);
        assert_eq!(t.batch_size, 64);
        assert_eq!(t.resolution.to_string(), "fixed:60");
    }
}
