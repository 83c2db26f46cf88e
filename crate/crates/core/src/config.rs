//! Plain-text experiment configuration: flat `key = value` lines with
//! section prefixes (model., optim., asgd., data.). Unknown keys are hard
//! errors that name the key and line; values come with the defaults baked
//! into the corresponding structs, so a config file only lists overrides.

use std::path::Path;

use crate::asgd::AsgdConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::layers::TimeConvSpec;
use crate::model::{ModelConfig, Variant, DEFAULT_DNN_INIT_STD, DEFAULT_LSTM_INIT_RANGE};
use crate::optim::OptimConfig;

/// Everything one experiment needs: the model shape, optimization
/// settings, harness settings, and the synthetic data recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub num_shards: usize,
    pub data: SyntheticSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                variant: Variant::TcDnnBlstmDnn,
                feat_dim: 16,
                tc: TimeConvSpec::default(),
                input_dnn_layers: vec![64, 64],
                cell_dim: 32,
                blstm_layers: 1,
                output_dnn_layers: vec![64, 64],
                num_classes: 4,
                seed: 1,
                lstm_init_range: DEFAULT_LSTM_INIT_RANGE,
                dnn_init_std: DEFAULT_DNN_INIT_STD,
            },
            optim: OptimConfig::default(),
            num_shards: 3,
            data: SyntheticSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn asgd(&self) -> AsgdConfig {
        AsgdConfig {
            num_shards: self.num_shards,
            optim: self.optim.clone(),
        }
    }

    /// Cross-section consistency plus the per-section validators; run
    /// before any training starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.data.validate()?;
        if self.num_shards == 0 {
            return Err(Error::Config("asgd.num_shards must be at least 1".to_string()));
        }
        if self.model.feat_dim != self.data.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim {} disagrees with data.feat_dim {}",
                self.model.feat_dim, self.data.feat_dim
            )));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes {} disagrees with data.num_classes {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        Ok(())
    }
}

fn bad_value(key: &str, value: &str, line: usize) -> Error {
    Error::Config(format!(
        "invalid value '{value}' for key '{key}' at line {line}"
    ))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value, line))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad_value(key, value, line)),
    }
}

fn parse_widths(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| bad_value(key, value, line))
        })
        .collect()
}

/// Parses config text over the default settings.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(Error::Config(format!(
                "expected 'key = value' at line {line}: '{raw}'"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "model.variant" => config.model.variant = Variant::parse(value)?,
            "model.feat_dim" => config.model.feat_dim = parse_num(key, value, line)?,
            "model.context_frames" => {
                config.model.tc.context_frames = parse_num(key, value, line)?
            }
            "model.tc_width" => config.model.tc.tc_width = parse_num(key, value, line)?,
            "model.tied_columns" => {
                config.model.tc.tied_columns = parse_bool(key, value, line)?
            }
            "model.input_dnn_layers" => {
                config.model.input_dnn_layers = parse_widths(key, value, line)?
            }
            "model.cell_dim" => config.model.cell_dim = parse_num(key, value, line)?,
            "model.blstm_layers" => config.model.blstm_layers = parse_num(key, value, line)?,
            "model.output_dnn_layers" => {
                config.model.output_dnn_layers = parse_widths(key, value, line)?
            }
            "model.num_classes" => config.model.num_classes = parse_num(key, value, line)?,
            "model.seed" => config.model.seed = parse_num(key, value, line)?,
            "model.lstm_init_range" => {
                config.model.lstm_init_range = parse_num(key, value, line)?
            }
            "model.dnn_init_std" => config.model.dnn_init_std = parse_num(key, value, line)?,
            "optim.initial_lr" => config.optim.initial_lr = parse_num(key, value, line)?,
            "optim.decay" => config.optim.decay = parse_num(key, value, line)?,
            "optim.lr_floor" => config.optim.lr_floor = parse_num(key, value, line)?,
            "optim.minibatch" => config.optim.minibatch = parse_num(key, value, line)?,
            "optim.momentum" => config.optim.momentum = parse_num(key, value, line)?,
            "optim.patience" => config.optim.patience = parse_num(key, value, line)?,
            "optim.max_epochs" => config.optim.max_epochs = parse_num(key, value, line)?,
            "asgd.num_shards" => config.num_shards = parse_num(key, value, line)?,
            "data.num_classes" => config.data.num_classes = parse_num(key, value, line)?,
            "data.feat_dim" => config.data.feat_dim = parse_num(key, value, line)?,
            "data.utterance_length" => {
                config.data.utterance_length = parse_num(key, value, line)?
            }
            "data.train_utterances" => {
                config.data.train_utterances = parse_num(key, value, line)?
            }
            "data.dev_utterances" => config.data.dev_utterances = parse_num(key, value, line)?,
            "data.test_utterances" => {
                config.data.test_utterances = parse_num(key, value, line)?
            }
            "data.noise_sigma" => config.data.noise_sigma = parse_num(key, value, line)?,
            "data.latent_smoothing" => {
                config.data.latent_smoothing = parse_num(key, value, line)?
            }
            "data.seed" => config.data.seed = parse_num(key, value, line)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key '{other}' at line {line}"
                )));
            }
        }
    }
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::Config(format!(
            "cannot read config {}: {e}",
            path.as_ref().display()
        ))
    })?;
    parse_config(&text)
}
