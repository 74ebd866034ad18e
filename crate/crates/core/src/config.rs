//! The experiment document tying corpus, model, training and analysis
//! settings together.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::SvccaOptions;
use crate::corpus::{CorpusConfig, DatasetSplits};
use crate::error::{Error, Result};
use crate::io::read_to_string;
use crate::model::{BeamOptions, TransformerConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSettings {
    pub beam: BeamOptions,
    pub svcca: SvccaOptions,
    pub exclude_tag: bool,
    pub bootstrap_iterations: usize,
    pub bootstrap_ratio: f64,
    pub bootstrap_seed: u64,
    pub spectral_dims: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            beam: BeamOptions::default(),
            svcca: SvccaOptions::default(),
            exclude_tag: true,
            bootstrap_iterations: 1000,
            bootstrap_ratio: 0.5,
            bootstrap_seed: 1,
            spectral_dims: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Lole,
    Lclr,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Vanilla, Self::Lole, Self::Lclr, Self::Both];

    pub fn apply(self, model: &mut TransformerConfig) {
        model.lole_enabled = matches!(self, Self::Lole | Self::Both);
        model.lclr_enabled = matches!(self, Self::Lclr | Self::Both);
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Lole => "lole",
            Self::Lclr => "lclr",
            Self::Both => "both",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "lole" => Ok(Self::Lole),
            "lclr" => Ok(Self::Lclr),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?}; expected vanilla, lole, lclr or both"
            ))),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: 5 languages, 2+2 layers, d_model 64.
    pub fn toy() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig {
                num_languages: 5,
                sentences_per_pair: 2000,
                valid_per_pair: 100,
                test_per_pair: 500,
                ..CorpusConfig::default()
            },
            model: TransformerConfig {
                enc_layers: 2,
                dec_layers: 2,
                d_model: 64,
                heads: 4,
                d_ffn: 128,
                dropout: 0.1,
                max_positions: 64,
                d_e: 32,
                d_h: 32,
                ..TransformerConfig::default()
            },
            train: TrainConfig {
                base_lr: 3e-3,
                warmup_steps: 200,
                max_steps: 2000,
                batch_tokens: 1000,
                checkpoint_every: 500,
                log_every: 100,
                lclr_mean: true,
                ..TrainConfig::default()
            },
            analysis: AnalysisSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Applies `section.field=value` overrides; values parse as JSON when
    /// possible and as plain strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                slot = obj
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()));
                if slot.is_null() {
                    *slot = Value::Object(Default::default());
                }
            }
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model config with dataset-derived sizes filled in.
    pub fn model_for(&self, data: &DatasetSplits, variant: Option<Variant>) -> Result<TransformerConfig> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = data.languages.vocab_size();
        }
        if m.num_languages == 0 {
            m.num_languages = data.languages.len();
        }
        if let Some(v) = variant {
            v.apply(&mut m);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.analysis.beam.beam_size == 0 {
            return Err(Error::Config("analysis.beam.beam_size must be at least 1".into()));
        }
        Ok(())
    }
}
