//! Run settings shared by `train` and `sweep`, read from a flat TOML file
//! and from flags. Flags win.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::Args;
use serde::{Deserialize, Deserializer};

use cvqa_core::curriculum::{RunConfig, TrainMode};
use cvqa_core::embedding::FusionMode;
use cvqa_core::nn::WeightDecayMode;
use cvqa_core::replay::{BufferPolicy, ReservoirScope};

use crate::CliError;

fn from_str_opt<'de, D, T>(d: D) -> Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr,
    T::Err: Display,
{
    Option::<String>::deserialize(d)?
        .map(|s| s.parse().map_err(serde::de::Error::custom))
        .transpose()
}

pub fn parse_scope(s: &str) -> Result<ReservoirScope, String> {
    match s {
        "per-class" => Ok(ReservoirScope::PerClass),
        "global" => Ok(ReservoirScope::Global),
        _ => Err(format!("unknown reservoir scope `{s}` (per-class, global)")),
    }
}

pub fn parse_decay(s: &str) -> Result<WeightDecayMode, String> {
    match s {
        "decoupled" => Ok(WeightDecayMode::Decoupled),
        "coupled" => Ok(WeightDecayMode::Coupled),
        _ => Err(format!("unknown weight decay mode `{s}` (decoupled, coupled)")),
    }
}

/// Every key is optional; unset keys keep the built-in default.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    /// joint | taskwise | continual | continual-noreplay
    #[arg(long)]
    #[serde(default, deserialize_with = "from_str_opt")]
    pub mode: Option<TrainMode>,
    /// add | mul | cat
    #[arg(long)]
    #[serde(default, deserialize_with = "from_str_opt")]
    pub fusion: Option<FusionMode>,
    /// reservoir | ring | mof
    #[arg(long)]
    #[serde(default, deserialize_with = "from_str_opt")]
    pub policy: Option<BufferPolicy>,
    /// per-class | global
    #[arg(long)]
    pub reservoir_scope: Option<String>,
    #[arg(long)]
    pub per_class_capacity: Option<usize>,
    #[arg(long)]
    pub replay_batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated task ids, e.g. `2,0,1`.
    #[arg(long, value_delimiter = ',')]
    pub order: Option<Vec<u16>>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub num_hidden_layers: Option<usize>,
    /// decoupled | coupled
    #[arg(long)]
    pub weight_decay_mode: Option<String>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Applies to every task.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Applies to every task.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Applies to every task.
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub first_task_learning_rate: Option<f64>,
    #[arg(long)]
    pub first_task_weight_decay: Option<f64>,
    #[arg(long)]
    pub later_tasks_learning_rate: Option<f64>,
    #[arg(long)]
    pub later_tasks_weight_decay: Option<f64>,
}

/// Config file: run settings plus a default dataset path and zero-shot
/// temperature.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub data: Option<String>,
    pub temperature: Option<f64>,
    pub run: RunSettings,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| e.message().to_string())?;
        let data = match table.remove("data") {
            None => None,
            Some(toml::Value::String(s)) => Some(s),
            Some(v) => return Err(format!("`data` must be a string, found {}", v.type_str())),
        };
        let temperature = match table.remove("temperature") {
            None => None,
            Some(toml::Value::Float(f)) => Some(f),
            Some(toml::Value::Integer(i)) => Some(i as f64),
            Some(v) => return Err(format!("`temperature` must be a number, found {}", v.type_str())),
        };
        let run = table.try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        Ok(FileConfig { data, temperature, run })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}

macro_rules! merge {
    ($flags:expr, $file:expr, $($field:ident),*) => {
        RunSettings { $($field: $flags.$field.clone().or_else(|| $file.$field.clone())),* }
    };
}

impl RunSettings {
    pub fn merged(&self, file: &RunSettings) -> RunSettings {
        merge!(
            self,
            file,
            mode,
            fusion,
            policy,
            reservoir_scope,
            per_class_capacity,
            replay_batch,
            seed,
            order,
            hidden_dim,
            num_hidden_layers,
            weight_decay_mode,
            test_fraction,
            batch_size,
            epochs,
            dropout_rate,
            first_task_learning_rate,
            first_task_weight_decay,
            later_tasks_learning_rate,
            later_tasks_weight_decay
        )
    }

    pub fn apply(&self, mut c: RunConfig) -> Result<RunConfig, CliError> {
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = &self.$field { c.$field = v.clone(); })* };
        }
        set!(mode, fusion, policy, per_class_capacity, replay_batch, seed, hidden_dim, num_hidden_layers, test_fraction);
        if let Some(o) = &self.order {
            c.order = Some(o.clone());
        }
        if let Some(s) = &self.reservoir_scope {
            c.reservoir_scope = parse_scope(s).map_err(CliError::Usage)?;
        }
        if let Some(s) = &self.weight_decay_mode {
            c.weight_decay_mode = parse_decay(s).map_err(CliError::Usage)?;
        }
        for t in [&mut c.first_task, &mut c.later_tasks] {
            if let Some(v) = self.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = self.epochs {
                t.epochs = v;
            }
            if let Some(v) = self.dropout_rate {
                t.dropout_rate = v;
            }
        }
        if let Some(v) = self.first_task_learning_rate {
            c.first_task.learning_rate = v;
        }
        if let Some(v) = self.first_task_weight_decay {
            c.first_task.weight_decay = v;
        }
        if let Some(v) = self.later_tasks_learning_rate {
            c.later_tasks.learning_rate = v;
        }
        if let Some(v) = self.later_tasks_weight_decay {
            c.later_tasks.weight_decay = v;
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_and_flag_precedence() {
        let file = FileConfig::parse(
            "data = \"x.emb1\"\nmode = \"continual-noreplay\"\npolicy = \"mof\"\nepochs = 3\norder = [2, 0, 1]\nhidden_dim = 64\n",
        )
        .unwrap();
        assert_eq!(file.data.as_deref(), Some("x.emb1"));
        let flags = RunSettings { hidden_dim: Some(8), ..Default::default() };
        let c = flags.merged(&file.run).apply(RunConfig::default()).unwrap();
        assert_eq!(c.mode, TrainMode::ContinualNoReplay);
        assert_eq!(c.policy, BufferPolicy::MeanOfFeatures);
        assert_eq!(c.hidden_dim, 8);
        assert_eq!((c.first_task.epochs, c.later_tasks.epochs), (3, 3));
        assert_eq!(c.order, Some(vec![2, 0, 1]));
        assert_eq!(c.first_task.learning_rate, 1e-4);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(FileConfig::parse("hiden_dim = 3\n").is_err());
        assert!(FileConfig::parse("mode = \"sideways\"\n").is_err());
        assert!(FileConfig::parse("[train]\nepochs = 3\n").is_err());
        assert_eq!(FileConfig::parse("temperature = 50\n").unwrap().temperature, Some(50.0));
        let bad = RunSettings { dropout_rate: Some(1.5), ..Default::default() };
        assert!(matches!(bad.apply(RunConfig::default()), Err(CliError::Usage(_))));
        let bad = RunSettings { reservoir_scope: Some("local".into()), ..Default::default() };
        assert!(bad.apply(RunConfig::default()).is_err());
    }
}
