//! Run configuration file and dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::SgdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate (and checkpoint) every this many epochs, and after the last.
    pub eval_every: usize,
    /// Seeds parameter initialization, shuffling, and augmentation.
    pub seed: u64,
    /// Stop once mean foreground training DSC reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_dsc: Option<f64>,
    /// Load the dataset from this cache directory instead of generating it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            eval_every: 10,
            seed: 0,
            target_dsc: None,
            data_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Square token-grid sides; `N` is the side squared.
    pub grid_sides: Vec<usize>,
    pub reductions: Vec<usize>,
    pub channels: usize,
    pub heads: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            grid_sides: vec![16, 32],
            reductions: vec![1, 2, 4, 8],
            channels: 32,
            heads: 1,
            reps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthSpec,
    pub optim: SgdConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            data: SynthSpec::default(),
            optim: SgdConfig::default(),
            train: TrainConfig::default(),
            output: OutputConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

const SECTIONS: [&str; 6] = ["model", "data", "optim", "train", "output", "bench"];

fn cfg_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `path` (dotted) in `root`. Paths that do not start with a config
/// section are taken relative to `model`.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(cfg_err(format!("{path}: malformed override key")));
    }
    if !SECTIONS.contains(&keys[0]) {
        keys.insert(0, "model");
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("{path}: {k} is not a table")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| cfg_err(format!("{path}: parent is not a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Splits `a.b=v` into `("a.b", "v")`, tolerating leading dashes.
pub fn split_override(arg: &str) -> Result<(&str, &str)> {
    let arg = arg.trim_start_matches('-');
    arg.split_once('=')
        .ok_or_else(|| cfg_err(format!("{arg}: override must look like key.path=value")))
}

impl RunConfig {
    /// Defaults, overlaid with `text`, overlaid with `overrides`.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = Value::try_from(RunConfig::default()).map_err(cfg_err)?;
        let file: toml::Table = toml::from_str(text).map_err(cfg_err)?;
        merge(&mut root, Value::Table(file));
        for (k, v) in overrides {
            apply_override(&mut root, k, v)?;
        }
        let cfg: RunConfig = root.try_into().map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                cfg_err(format!("config not found: {}", path.display()))
            }
            _ => Error::Io(e),
        })?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config(m) => cfg_err(format!("model.{m}")),
            other => other,
        })?;
        self.data.validate()?;
        self.optim.validate()?;
        if self.data.num_classes != self.model.num_classes {
            return Err(cfg_err(format!(
                "data.num_classes: {} differs from model.num_classes {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        if (self.data.height, self.data.width) != (self.model.height, self.model.width) {
            return Err(cfg_err(format!(
                "data.height/width: {}x{} differs from model input {}x{}",
                self.data.height, self.data.width, self.model.height, self.model.width
            )));
        }
        if self.train.batch_size == 0 {
            return Err(cfg_err("train.batch_size: must be positive"));
        }
        if self.train.eval_every == 0 {
            return Err(cfg_err("train.eval_every: must be positive"));
        }
        Ok(())
    }

    /// Fully resolved TOML text; parsing it back yields an equal config.
    pub fn to_toml(&self) -> Result<String> {
        let mut c = self.clone();
        c.model = c.model.resolved();
        toml::to_string(&c).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            RunConfig::from_toml_with("", &[]).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::from_toml_with(
            "[model.bridge]\ndepth = 2\n",
            &ov(&[
                ("bridge.depth", "6"),
                ("train.epochs", "3"),
                ("model.skip_mode", "concat"),
            ]),
        )
        .unwrap();
        assert_eq!(c.model.bridge.depth, 6);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.skip_mode, crate::model::SkipMode::Concat);
        let s = RunConfig::from_toml_with("", &ov(&[("bridge.stages", "[4, 3]")])).unwrap();
        assert_eq!(s.model.bridge.stages, vec![4, 3]);
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = RunConfig::from_toml_with("", &ov(&[("bridge.enabled", "false")])).unwrap();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml_with(&text, &[]).unwrap();
        assert_eq!(back.model, c.model.resolved());
        assert_eq!(back.model.ffn_steps, Some(3));
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_toml_with("", &ov(&[("bridge.depht", "4")])).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("depht"), "{e}");
        let e = RunConfig::from_toml_with("", &ov(&[("train.epochs", "\"many\"")])).unwrap_err();
        assert!(e.to_string().contains("epochs"), "{e}");
        let e = RunConfig::from_toml_with("", &ov(&[("height", "48")])).unwrap_err();
        assert!(e.to_string().contains("model.height"), "{e}");
        let e = RunConfig::from_toml_with("", &ov(&[("data.num_classes", "3")])).unwrap_err();
        assert!(e.to_string().contains("num_classes"), "{e}");
    }

    #[test]
    fn missing_file_is_config_error() {
        let e = RunConfig::load(Path::new("/nonexistent/run.toml"), &[]).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("config not found"));
    }

    #[test]
    fn override_syntax() {
        assert_eq!(
            split_override("--bridge.depth=4").unwrap(),
            ("bridge.depth", "4")
        );
        assert!(split_override("--bridge.depth").is_err());
        assert_eq!(parse_value("abc"), Value::String("abc".into()));
        assert_eq!(parse_value("1.5"), Value::Float(1.5));
    }
}
