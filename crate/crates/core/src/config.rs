//! The run configuration document shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{SearchConfig, DEFAULT_MAX_SYMBOLS};
use crate::error::{Error, Result};
use crate::frontend::SynthTaskSpec;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Utterance counts and lengths for generated splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_utterances: usize,
    pub eval_utterances: usize,
    pub longform_utterances: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    /// Segments concatenated into one long-form utterance.
    pub longform_segments: usize,
    pub silence_frames: usize,
    /// Fraction of training utterances built from two segments joined by
    /// silence, so training sees inter-utterance silence.
    pub train_two_segment_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_utterances: 8000,
            eval_utterances: 100,
            longform_utterances: 10,
            tokens_min: 3,
            tokens_max: 8,
            longform_segments: 10,
            silence_frames: 12,
            train_two_segment_fraction: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeOptions {
    /// 0 selects greedy search.
    pub beam: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 0,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS,
        }
    }
}

impl DecodeOptions {
    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            beam: self.beam,
            max_symbols_per_frame: self.max_symbols_per_frame,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: SynthTaskSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Compact JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocab_size {} differs from model vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.feature_dim != self.model.input_dim {
            return Err(Error::Config(format!(
                "task feature_dim {} differs from model input_dim {}",
                self.task.feature_dim, self.model.input_dim
            )));
        }
        let d = &self.data;
        if d.tokens_min > d.tokens_max {
            return Err(Error::Config("tokens_min exceeds tokens_max".into()));
        }
        if !(0.0..=1.0).contains(&d.train_two_segment_fraction) {
            return Err(Error::Config("train_two_segment_fraction outside [0, 1]".into()));
        }
        if d.longform_segments == 0 {
            return Err(Error::Config("longform_segments must be >= 1".into()));
        }
        if self.decode.max_symbols_per_frame == 0 {
            return Err(Error::Config("max_symbols_per_frame must be >= 1".into()));
        }
        Ok(())
    }
}
