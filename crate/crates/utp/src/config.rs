//! JSON config files layered over built-in defaults.
//!
//! A config file is one JSON object with optional sections (`model`, `train`,
//! `pretrain`, `finetune`, `qa`). Each present section is merged key by key
//! over the command's defaults; command-line flags are applied afterwards and
//! so take precedence over both.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::corpus::read_text;
use crate::error::{Error, Result};

/// Recursively overlays `top` onto `base`. Objects merge; anything else
/// replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: serde_json::Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        Self::parse(&read_text(path)?)
    }

    pub fn parse(body: &str) -> Result<Self> {
        match serde_json::from_str(body) {
            Ok(Value::Object(root)) => Ok(Self { root }),
            Ok(_) => Err(Error::Usage("config must be a JSON object".into())),
            Err(e) => Err(Error::Json {
                line: e.line(),
                message: e.to_string(),
            }),
        }
    }

    /// `defaults` with section `name` merged over it.
    pub fn section<T: Serialize + DeserializeOwned>(&self, name: &str, defaults: T) -> Result<T> {
        let Some(top) = self.root.get(name) else {
            return Ok(defaults);
        };
        let mut base = serde_json::to_value(defaults).expect("defaults serialize");
        merge(&mut base, top.clone());
        serde_json::from_value(base).map_err(|e| Error::Usage(format!("config section {name:?}: {e}")))
    }
}
