//! Run configuration: a single TOML document plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskConfig;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::rng;
use crate::sampler::SamplerConfig;
use crate::schedules::{presets, JointSpec, NamedSchedule, ScheduleSpec};

/// Overrides `output_dir` when set.
pub const OUT_DIR_ENV: &str = "SEQLAB_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic task used when `train_tsv` is unset.
    pub task: TaskConfig,
    pub train_tsv: Option<PathBuf>,
    pub eval_tsv: Option<PathBuf>,
    /// Pairs held out for evaluation when `eval_tsv` is unset.
    pub eval_count: usize,
    /// Padded tokens per batch.
    pub batch_tokens: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            train_tsv: None,
            eval_tsv: None,
            eval_count: 200,
            batch_tokens: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            log_every: 50,
            checkpoint_every: 500,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fuzzy-matching window.
    pub window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { window: 3 }
    }
}

/// Curves written by `schedule-dump`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleDumpConfig {
    pub training: Vec<NamedSchedule>,
    pub max_training_step: u64,
    pub training_stride: u64,
    pub decoding: Vec<NamedSchedule>,
    pub max_decoding_step: u64,
    /// `f` and `g` of the joint grids; one grid per combination method.
    pub joint_f: ScheduleSpec,
    pub joint_g: ScheduleSpec,
    pub grid_max_i: u64,
    pub grid_i_stride: u64,
    pub grid_max_t: u64,
}

fn named(specs: impl IntoIterator<Item = ScheduleSpec>) -> Vec<NamedSchedule> {
    let mut out = Vec::new();
    for spec in specs {
        for s in [spec.clone(), spec.increase()] {
            let label = s.label();
            let short = label.split('(').next().unwrap_or(&label);
            out.push(NamedSchedule {
                name: short.to_string(),
                spec: s,
            });
        }
    }
    out
}

impl Default for ScheduleDumpConfig {
    fn default() -> Self {
        let tr = presets::translation_training_steps();
        let de = presets::translation_decoding_steps();
        Self {
            training: named(tr.all()),
            max_training_step: tr.max_value,
            training_stride: 1000,
            decoding: named(de.all()),
            max_decoding_step: de.max_value,
            joint_f: tr.sigmoid.clone(),
            joint_g: de.exponential.clone(),
            grid_max_i: tr.max_value,
            grid_i_stride: 10_000,
            grid_max_t: de.max_value,
        }
    }
}

impl ScheduleDumpConfig {
    pub fn joint(&self, method: crate::schedules::JointMethod) -> JointSpec {
        JointSpec::new(method, self.joint_f.clone(), self.joint_g.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream (data, initialization, batches, dropout,
    /// sampling).
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub schedule_dump: ScheduleDumpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            schedule_dump: ScheduleDumpConfig::default(),
        }
    }
}

/// Sets the dotted `key` of `doc` to `raw`, read as a TOML value when it
/// parses as one and as a string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `overrides` in order, then validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file (or starts from defaults), applies the output
    /// directory from [`OUT_DIR_ENV`], then the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut all = Vec::new();
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            all.push(format!("output_dir = {}", toml::Value::String(dir)));
        }
        all.extend(overrides.iter().cloned());
        Self::from_toml_with(&text, &all)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.decode.validate(self.model.max_positions)?;
        crate::sampler::Sampler::new(self.sampler.clone())?;
        if self.data.train_tsv.is_none() {
            self.data.task.validate()?;
        }
        if self.data.batch_tokens == 0 {
            return Err(Error::config("batch_tokens must be positive"));
        }
        if self.train.log_every == 0 || self.train.checkpoint_every == 0 {
            return Err(Error::config("log_every and checkpoint_every must be positive"));
        }
        if self.eval.window == 0 || self.eval.window % 2 == 0 {
            return Err(Error::config("eval.window must be odd"));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "data")
    }

    pub fn init_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "init")
    }

    pub fn batch_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "batches")
    }

    /// Seed of the per-step dropout and selection-mask streams.
    pub fn train_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "train")
    }
}
