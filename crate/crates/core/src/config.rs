//! Run configuration: defaults, overridden by a flat `section.key = value`
//! file, overridden by command-line settings.
//!
//! Values are parsed as JSON when possible (numbers, booleans, arrays) and
//! taken verbatim otherwise, so `train.lr0 = 0.0002`, `train.use_srm = false`
//! and `metrics.extractor = tiny-cnn` all work. Unknown keys are errors.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::changedetect::{LumaWeights, PcakmConfig};
use crate::data::BenchmarkSpec;
use crate::error::{Error, Result};
use crate::trainer::{Direction, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChangeDetectConfig {
    pub luma: LumaWeights,
    /// Which acquisition is translated before differencing.
    pub direction: Direction,
}

impl Default for ChangeDetectConfig {
    fn default() -> Self {
        ChangeDetectConfig {
            luma: LumaWeights::default(),
            direction: Direction::YToX,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// `tiny-cnn` or `pretrained-inception`.
    pub extractor: String,
    pub weights: Option<PathBuf>,
    pub is_splits: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            extractor: "tiny-cnn".into(),
            weights: None,
            is_splits: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; copied into every section seed not set explicitly.
    pub seed: u64,
    pub train: TrainConfig,
    pub pcakm: PcakmConfig,
    pub cd: ChangeDetectConfig,
    pub metrics: MetricsConfig,
    pub data: BenchmarkSpec,
}

const SEEDED: [&str; 3] = ["train.seed", "pcakm.seed", "data.seed"];

/// Accumulates settings in precedence order.
#[derive(Clone, Debug)]
pub struct ConfigBuilder {
    tree: Value,
    explicit: BTreeSet<String>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self::new(&RunConfig::default())
    }
}

fn parse_value(raw: &str, current: &Value) -> Value {
    let raw = raw.trim();
    if current.is_string() {
        // strings stay verbatim unless quoted
        return serde_json::from_str::<String>(raw)
            .map(Value::String)
            .unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn slot_mut<'a>(tree: &'a mut Value, parts: &[&str]) -> &'a mut Value {
    parts.iter().fold(tree, |node, p| node.get_mut(*p).expect("path checked"))
}

impl ConfigBuilder {
    pub fn new(base: &RunConfig) -> Self {
        ConfigBuilder {
            tree: serde_json::to_value(base).expect("config serializes"),
            explicit: BTreeSet::new(),
        }
    }

    /// Sets one dotted key; `origin` is used in error messages.
    pub fn set(&mut self, key: &str, raw: &str, origin: &str) -> Result<()> {
        let unknown = || Error::Config(format!("{origin}: unknown key `{key}`"));
        let mut node = &mut self.tree;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node.get_mut(*part).filter(|n| n.is_object()).ok_or_else(unknown)?;
        }
        let leaf = parts[parts.len() - 1];
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(leaf).ok_or_else(unknown)?;
        if slot.is_object() {
            return Err(Error::Config(format!("{origin}: `{key}` is a section, not a value")));
        }
        let previous = slot.clone();
        *slot = parse_value(raw, &previous);
        if let Err(e) = serde_json::from_value::<RunConfig>(self.tree.clone()) {
            *slot_mut(&mut self.tree, &parts) = previous;
            return Err(Error::Config(format!("{origin}: invalid value `{raw}` for `{key}`: {e}")));
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies every `key = value` line of `text`. `#` starts a comment;
    /// a `[section]` line prefixes following keys.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section = String::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", n + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{at}: expected `key = value`")))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v, &at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        self.set(k.trim(), v, "command line")
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn build(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = serde_json::from_value(self.tree.clone())
            .map_err(|e| Error::Config(e.to_string()))?;
        for key in SEEDED {
            if !self.is_explicit(key) {
                match key {
                    "train.seed" => cfg.train.seed = cfg.seed,
                    "pcakm.seed" => cfg.pcakm.seed = cfg.seed,
                    _ => cfg.data.seed = cfg.seed,
                }
            }
        }
        cfg.train.validate()?;
        cfg.pcakm.validate()?;
        cfg.data.scene.validate()?;
        Ok(cfg)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if child.is_object() {
                    flatten(&key, child, out);
                } else {
                    let text = match child {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    out.push(format!("{key} = {text}"));
                }
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

impl RunConfig {
    /// The fully resolved config in the file format, readable back by
    /// [`ConfigBuilder::apply_text`].
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut lines);
        lines.join("\n") + "\n"
    }

    /// Writes `resolved_config.txt` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_types() {
        let mut b = ConfigBuilder::default();
        b.apply_text(
            "# comment\ntrain.lr0 = 0.001\n[train]\nuse_srm = false\nepochs_total = 10 # trailing\nepochs_constant = 5\n[metrics]\nextractor = tiny-cnn\n",
            "file",
        )
        .unwrap();
        b.apply_override("train.lr0=0.002").unwrap();
        b.apply_override("cd.direction=xy").unwrap();
        let cfg = b.build().unwrap();
        assert_eq!(cfg.train.lr0, 0.002);
        assert!(!cfg.train.use_srm);
        assert_eq!(cfg.train.epochs_total, 10);
        assert_eq!(cfg.cd.direction, Direction::XToY);
    }

    #[test]
    fn master_seed_propagates_unless_explicit() {
        let mut b = ConfigBuilder::default();
        b.apply_override("seed=7").unwrap();
        b.apply_override("pcakm.seed=3").unwrap();
        let cfg = b.build().unwrap();
        assert_eq!((cfg.train.seed, cfg.pcakm.seed, cfg.data.seed), (7, 3, 7));
    }

    #[test]
    fn errors_name_the_key() {
        let mut b = ConfigBuilder::default();
        let e = b.apply_override("train.nope=1").unwrap_err().to_string();
        assert!(e.contains("train.nope"), "{e}");
        let e = b.apply_override("train.lr0=fast").unwrap_err().to_string();
        assert!(e.contains("train.lr0"), "{e}");
        assert!(b.apply_override("train=1").is_err());
        assert!(b.apply_text("garbage line", "f").is_err());
        b.apply_override("train.epochs_constant=500").unwrap();
        assert!(b.build().is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut b = ConfigBuilder::default();
        b.apply_override("train.scale=0.125").unwrap();
        b.apply_override("metrics.weights=/tmp/w.bin").unwrap();
        let cfg = b.build().unwrap();
        let mut again = ConfigBuilder::default();
        again.apply_text(&cfg.to_text(), "echo").unwrap();
        assert_eq!(again.build().unwrap(), cfg);
    }
}
