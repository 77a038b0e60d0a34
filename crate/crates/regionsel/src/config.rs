//! Line-based `key = value` configuration.
//!
//! Values are read as JSON when they parse as JSON and as bare strings otherwise, so
//! `steps = 200`, `window = "fixed"`, `window = fixed` and `p_regions = [0.5, 0.1]`
//! all work. Keys are merged into settings structs by field name; keys no struct
//! consumed are an error.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, (usize, Value)>,
    used: RefCell<BTreeSet<String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {lineno}: expected `key = value`")));
            };
            let key = k.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("line {lineno}: invalid key {key:?}")));
            }
            let key = key.replace('-', "_");
            let v = v.trim();
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            if let Some((prev, _)) = entries.insert(key.clone(), (lineno, value)) {
                return Err(Error::Config(format!(
                    "line {lineno}: key {key:?} already set on line {prev}"
                )));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Raw value of a key, marking it consumed.
    pub fn take(&self, key: &str) -> Option<&Value> {
        let v = self.entries.get(key).map(|e| &e.1);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn take_as<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| self.error(key, &e.to_string())),
        }
    }

    fn error(&self, key: &str, msg: &str) -> Error {
        let line = self.entries.get(key).map_or(0, |e| e.0);
        Error::Config(format!("line {line}: {key}: {msg}"))
    }

    /// Overwrite the fields of `base` named by keys in the file.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, base: &T) -> Result<T> {
        let mut obj = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(map) = &mut obj else {
            return Err(Error::Config("settings must be a struct".into()));
        };
        let mut touched = Vec::new();
        for (k, (_, v)) in &self.entries {
            if map.contains_key(k) {
                map.insert(k.clone(), v.clone());
                touched.push(k.clone());
            }
        }
        let out = serde_json::from_value(obj).map_err(|e| {
            let key = touched.first().map_or("", String::as_str);
            if touched.len() == 1 {
                self.error(key, &e.to_string())
            } else {
                Error::Config(format!("keys {touched:?}: {e}"))
            }
        })?;
        self.used.borrow_mut().extend(touched);
        Ok(out)
    }

    /// Error on any key nothing consumed.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(self.error(k, "unknown key")),
            None => Ok(()),
        }
    }

    /// Consumed entries as a JSON object, for provenance.
    pub fn to_json(&self) -> Value {
        Value::Object(self.entries.iter().map(|(k, (_, v))| (k.clone(), v.clone())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::EvidenceConfig;
    use crate::model::Hyperparams;

    #[test]
    fn merges_by_field_name() {
        let c = ConfigFile::parse("# comment\n\nanneal_steps = 7\nalpha = 4.5\np_regions = [0.2, 0.3]\n").unwrap();
        let e = c.apply(&EvidenceConfig::default()).unwrap();
        let h = c.apply(&Hyperparams::default()).unwrap();
        assert_eq!(e.anneal_steps, 7);
        assert_eq!(h.alpha, 4.5);
        assert_eq!(h.p_regions, vec![0.2, 0.3]);
        c.finish().unwrap();
    }

    #[test]
    fn reports_line_numbers() {
        let e = ConfigFile::parse("a = 1\nbroken line\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = ConfigFile::parse("a = 1\na = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let c = ConfigFile::parse("\nalpha = \"x\"\n").unwrap();
        let e = c.apply(&Hyperparams::default()).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn unknown_keys_fail() {
        let c = ConfigFile::parse("nonsense = 3").unwrap();
        c.apply(&EvidenceConfig::default()).unwrap();
        assert!(matches!(c.finish(), Err(Error::Config(_))));
    }

    #[test]
    fn bare_words_are_strings() {
        let c = ConfigFile::parse("window = fixed").unwrap();
        assert_eq!(c.take("window"), Some(&Value::String("fixed".into())));
    }
}
