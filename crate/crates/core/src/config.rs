//! Experiment configuration: presets, TOML files and `key=value` overrides merged
//! in that order of precedence, then checked against the typed schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::BackboneConfig;
use crate::protocol::{ProtocolKind, ProtocolSpec};
use crate::synthesizer::SynthesisConfig;
use crate::trainer::TrainConfig;

pub const PRESETS: &[&str] = &["desk", "toy", "cifar100-full", "tiny200-full", "imagenet100-full"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub tasks: usize,
    pub seeds: Vec<u64>,
}

impl ProtocolConfig {
    pub fn spec(&self) -> ProtocolSpec {
        ProtocolSpec {
            kind: self.kind,
            tasks: self.tasks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub protocol: ProtocolConfig,
    pub model: BackboneConfig,
    pub trainer: TrainConfig,
    pub synthesizer: SynthesisConfig,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let desk_synth = SynthesisConfig {
            noise_dim: 64,
            width: 32,
            steps: 300,
            batch_size: 64,
            ..SynthesisConfig::default()
        };
        let desk_trainer = TrainConfig {
            batch_size: 32,
            ..TrainConfig::default()
        };
        let cfg = match name {
            "desk" => ExperimentConfig {
                preset: name.into(),
                out: PathBuf::from("runs/desk"),
                dataset: DatasetSpec::Digits,
                protocol: ProtocolConfig {
                    kind: ProtocolKind::Equal,
                    tasks: 5,
                    seeds: vec![0, 1, 2],
                },
                model: BackboneConfig::default(),
                trainer: desk_trainer,
                synthesizer: desk_synth,
            },
            "toy" => ExperimentConfig {
                preset: name.into(),
                out: PathBuf::from("runs/toy"),
                dataset: DatasetSpec::Blobs {
                    classes: 4,
                    train_per_class: 24,
                    test_per_class: 8,
                    seed: 0,
                },
                protocol: ProtocolConfig {
                    kind: ProtocolKind::Equal,
                    tasks: 2,
                    seeds: vec![0],
                },
                model: BackboneConfig {
                    widths: [4, 8, 8],
                    blocks_per_stage: 1,
                },
                trainer: TrainConfig {
                    rrl_epochs: 2,
                    milestones: vec![1],
                    batch_size: 16,
                    chr_epochs: 1,
                    ..TrainConfig::default()
                },
                synthesizer: SynthesisConfig {
                    noise_dim: 8,
                    width: 8,
                    steps: 3,
                    batch_size: 8,
                    ..SynthesisConfig::default()
                },
            },
            "cifar100-full" | "tiny200-full" | "imagenet100-full" => {
                let (norm, tasks, wd, chr_epochs, path) = match name {
                    "cifar100-full" => ("cifar100", 10, 5e-4, 40, "cifar100"),
                    "tiny200-full" => ("tiny-imagenet", 10, 2e-4, 40, "tiny-imagenet-200"),
                    _ => ("imagenet", 10, 1e-4, 30, "imagenet100"),
                };
                let mut trainer = TrainConfig {
                    chr_epochs,
                    ..TrainConfig::long_schedule(wd)
                };
                let mut synth = SynthesisConfig::default();
                if name == "imagenet100-full" {
                    trainer.rrl_epochs = 90;
                    trainer.milestones = vec![30, 60];
                    synth.steps = 10_000;
                }
                ExperimentConfig {
                    preset: name.into(),
                    out: PathBuf::from(format!("runs/{}", name)),
                    dataset: DatasetSpec::Directory {
                        path: PathBuf::from(path),
                        normalization: norm.into(),
                        class_list: None,
                        augmentation: None,
                    },
                    protocol: ProtocolConfig {
                        kind: ProtocolKind::Equal,
                        tasks,
                        seeds: vec![0, 1, 2],
                    },
                    model: BackboneConfig::resnet32(),
                    trainer,
                    synthesizer: synth,
                }
            }
            other => {
                return Err(Error::Config {
                    key: "preset".into(),
                    message: format!("unknown preset {:?}; expected one of {}", other, PRESETS.join(", ")),
                })
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.synthesizer.validate().map_err(|e| Error::Config {
            key: "synthesizer".into(),
            message: e.to_string(),
        })?;
        if self.protocol.seeds.is_empty() {
            return Err(Error::Config {
                key: "protocol.seeds".into(),
                message: "at least one seed is required".into(),
            });
        }
        if self.protocol.tasks < 1 {
            return Err(Error::Config {
                key: "protocol.tasks".into(),
                message: "must be positive".into(),
            });
        }
        if self.model.widths.contains(&0) || self.model.blocks_per_stage == 0 {
            return Err(Error::Config {
                key: "model".into(),
                message: "widths and blocks_per_stage must be positive".into(),
            });
        }
        Ok(())
    }

    /// Resolved configuration as TOML; enough to reproduce a run.
    pub fn lock_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            key: String::new(),
            message: e.to_string(),
        })
    }

    /// Hex SHA-256 of the lock text.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.lock_text()?.as_bytes())))
    }

    pub fn from_lock(text: &str) -> Result<Self> {
        resolve_value(toml::Value::Table(parse_table(text, "config.lock")?))
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Config {
        key: origin.to_string(),
        message: e.to_string(),
    })
}

/// Parse `a.b.c=value`. The value is read as a TOML literal, falling back to a string.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw.split_once('=').ok_or_else(|| Error::Config {
        key: raw.to_string(),
        message: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.to_string(),
            message: "empty key segment".into(),
        });
    }
    let value = value.trim();
    let parsed = format!("v = {}", value)
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), parsed))
}

/// Recursive merge; a table whose `kind` differs from the destination's replaces it.
fn merge(dst: &mut toml::Value, src: toml::Value) {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(existing) if kind_matches(existing, &v) => merge(existing, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn kind_matches(a: &toml::Value, b: &toml::Value) -> bool {
    match (a, b) {
        (toml::Value::Table(x), toml::Value::Table(y)) => match (x.get("kind"), y.get("kind")) {
            (Some(p), Some(q)) => p == q,
            _ => true,
        },
        _ => true,
    }
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config {
            key: path[..i].join("."),
            message: "is not a table".into(),
        })?;
        if i + 1 == path.len() {
            match table.get_mut(seg) {
                Some(existing) if kind_matches(existing, &value) => merge(existing, value),
                _ => {
                    table.insert(seg.clone(), value);
                }
            }
            return Ok(());
        }
        cur = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

fn resolve_value(value: toml::Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
        key: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Preset defaults, then the file, then overrides. The preset is chosen by an
/// override or the file's `preset` key, defaulting to `desk`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config {
                key: p.display().to_string(),
                message: e.to_string(),
            })?;
            Some(parse_table(&text, &p.display().to_string())?)
        }
        None => None,
    };
    let parsed: Vec<_> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
    let preset = parsed
        .iter()
        .rev()
        .find(|(k, _)| k.len() == 1 && k[0] == "preset")
        .map(|(_, v)| v.clone())
        .or_else(|| file.as_ref().and_then(|f| f.get("preset").cloned()))
        .map(|v| match v {
            toml::Value::String(s) => Ok(s),
            other => Err(Error::Config {
                key: "preset".into(),
                message: format!("expected a string, got {}", other),
            }),
        })
        .transpose()?
        .unwrap_or_else(|| "desk".to_string());
    let base = ExperimentConfig::preset(&preset)?;
    let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config {
        key: "preset".into(),
        message: e.to_string(),
    })?;
    if let Some(f) = file {
        merge(&mut value, toml::Value::Table(f));
    }
    for (k, v) in parsed {
        set_path(&mut value, &k, v)?;
    }
    resolve_value(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_round_trip() {
        for p in PRESETS {
            let cfg = ExperimentConfig::preset(p).unwrap();
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_lock(&cfg.lock_text().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn override_parsing() {
        let (k, v) = parse_override("trainer.ablation.no_hkd=true").unwrap();
        assert_eq!(k, ["trainer", "ablation", "no_hkd"]);
        assert_eq!(v, toml::Value::Boolean(true));
        let (_, v) = parse_override("out=runs/x").unwrap();
        assert_eq!(v, toml::Value::String("runs/x".into()));
        assert!(parse_override("novalue").is_err());
    }
}
