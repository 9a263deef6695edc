//! Run configuration: a TOML file with `[model]`, `[train]`, `[task]`, and
//! `[paths]` sections, plus dotted-key command-line overrides. Unknown keys
//! are rejected during deserialization.

use std::path::{Path, PathBuf};

use multistream::data::TaskSpec;
use multistream::model::ModelConfig;
use multistream::train::TrainConfig;
use multistream::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Feature container with training sequences; generated from `[task]`
    /// when absent.
    pub train_data: Option<PathBuf>,
    /// Held-out feature container; generated from `[task]` (seed + 1) when
    /// absent.
    pub eval_data: Option<PathBuf>,
    /// Where `train` writes the checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Optional metrics file (JSON lines, mirrors stdout).
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub paths: Paths,
}

/// Parse `key.path=value` into (path segments, parsed TOML value). Values
/// that do not parse as TOML are taken as bare strings.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), Error> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let segments: Vec<String> = key.trim().split('.').map(|s| s.to_string()).collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has empty segments")));
    }
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", value.trim()))
    {
        Ok(mut table) => table.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(value.trim().to_string()),
    };
    Ok((segments, parsed))
}

fn apply_override(root: &mut toml::Value, segments: &[String], value: toml::Value) -> Result<(), Error> {
    let mut cursor = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let path = segments[..=i].join(".");
        if let Ok(index) = seg.parse::<usize>() {
            let arr = cursor.as_array_mut().ok_or_else(|| {
                Error::Config(format!("override path `{path}`: parent is not an array"))
            })?;
            if index >= arr.len() {
                return Err(Error::Config(format!(
                    "override path `{path}`: index {index} out of bounds ({} elements)",
                    arr.len()
                )));
            }
            if last {
                arr[index] = value;
                return Ok(());
            }
            cursor = &mut arr[index];
        } else {
            let table = cursor.as_table_mut().ok_or_else(|| {
                Error::Config(format!("override path `{path}`: parent is not a table"))
            })?;
            if last {
                table.insert(seg.clone(), value);
                return Ok(());
            }
            cursor = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
    }
    unreachable!("segments is non-empty")
}

/// Read, override, and deserialize a run configuration.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{} does not parse as TOML: {e}", path.display())))?;
    for raw in overrides {
        let (segments, parsed) = parse_override(raw)?;
        apply_override(&mut value, &segments, parsed)?;
    }
    let config: RunConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.train.validate()?;
    if let Some(task) = &config.task {
        task.validate()?;
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    const BASE: &str = r#"
[model]
input_dim = 4
num_classes = 3
d_model = 8
d_q = 2
d_k = 2
d_v = 3
bottleneck = 4

[[model.blocks]]
head_budget = 4
streams = [ { rate = 1, conv_layers = 1 }, { rate = 2, conv_layers = 1 } ]
"#;

    #[test]
    fn loads_and_resolves() {
        let f = write_config(BASE);
        let cfg = load_config(f.path(), &[]).unwrap();
        assert_eq!(cfg.model.blocks.len(), 1);
        assert_eq!(cfg.train.epochs, 10);
        let resolved = cfg.model.resolved().unwrap();
        assert_eq!(resolved.blocks[0].streams[0].heads, Some(2));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write_config("[model]\ninput_dim = 4\nnum_classes = 3\nbogus_key = 1\n");
        let err = load_config(f.path(), &[]).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_array_elements() {
        let f = write_config(BASE);
        let cfg = load_config(
            f.path(),
            &[
                "train.epochs=3".into(),
                "model.blocks.0.streams.1.rate=7".into(),
                "train.optimizer=sgd".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.blocks[0].streams[1].rate, 7);
        assert_eq!(cfg.train.optimizer, multistream::train::OptimizerKind::Sgd);
    }

    #[test]
    fn bad_override_paths_are_config_errors() {
        let f = write_config(BASE);
        assert!(load_config(f.path(), &["model.blocks.9.streams=1".into()]).is_err());
        assert!(load_config(f.path(), &["no_equals_sign".into()]).is_err());
    }

    #[test]
    fn unknown_override_key_is_rejected_at_deserialize() {
        let f = write_config(BASE);
        let err = load_config(f.path(), &["model.not_a_field=1".into()]).unwrap_err();
        assert!(err.to_string().contains("not_a_field"), "{err}");
    }
}
