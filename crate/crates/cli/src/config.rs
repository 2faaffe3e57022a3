//! Experiment configuration.
//!
//! A config file is TOML with the sections `[dataset]`, `[teacher]`, `[train]`,
//! `[mea]`, `[student]` and `[export]`, plus a top-level `output_dir`. Every
//! key is optional and falls back to its default; unknown keys are rejected.
//! `--set section.key=value` overrides are applied to the parsed document
//! before validation; values use TOML syntax and fall back to a bare string.

use std::path::{Path, PathBuf};

use amfd_core::fusion::DistillMode;
use amfd_core::mea::MeaConfig;
use amfd_core::toynet::{DatasetSpec, StudentSpec, TeacherSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Environment variable naming the directory that relative `output_dir`
/// values are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "AMFD_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub plan: DistillMode,
    pub eval_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            seed: t.seed,
            plan: t.plan,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    /// Write attention grids after `train` finishes.
    pub attention: bool,
    pub split: Split,
    pub scene: usize,
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            attention: false,
            split: Split::Test,
            scene: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub teacher: TeacherSpec,
    pub train: TrainSection,
    pub mea: MeaConfig,
    pub student: StudentSpec,
    pub export: ExportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("amfd-out"),
            dataset: DatasetSpec::default(),
            teacher: TeacherSpec::default(),
            train: TrainSection::default(),
            mea: MeaConfig::default(),
            student: StudentSpec::default(),
            export: ExportSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: amfd_core::Error| CliError::Usage(format!("config: {e}"));
        self.dataset.validate().map_err(usage)?;
        self.train_config().validate().map_err(usage)?;
        if self.student.width != self.teacher.channels {
            return Err(CliError::Usage(format!(
                "config: student.width {} must equal teacher.channels {}",
                self.student.width, self.teacher.channels
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            plan: self.train.plan,
            mea: self.mea,
            eval_every: self.train.eval_every,
            student: self.student.clone(),
        }
    }

    /// `output_dir`, joined onto `$AMFD_OUTPUT_ROOT` when relative.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_root().join("data")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {item:?}")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("--set: bad key {key:?}")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
