//! The single JSON document describing a run. Every key is optional.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "data": { "synthetic": { "num_identities": 64, "camera_shift": 1.0 } },
//!   "head": { "kind": "rnn", "cell": "gru", "hidden_size": 64, "readout": "output_average" },
//!   "sampler": { "p": 4, "k": 8, "t": 4 },
//!   "train": { "steps": 500, "eval_interval": 100 },
//!   "eval": { "ranks": [1, 5, 10, 20], "rerank": { "lambda": 0.3 } },
//!   "out": "runs/gru"
//! }
//! ```
//!
//! `data` is either `{"synthetic": {...}}` or `{"dir": "path"}`, where the
//! directory holds the `train/` and `test/` splits written by `synth`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregators::{
    AggregatorConfig, PoolMode, DEFAULT_ATTENTION_CHANNELS, DEFAULT_HIDDEN_SIZE,
};
use crate::data::{generate_synthetic, load_dataset, Dataset, SynthConfig, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::losses::TripletConfig;
use crate::model::ModelConfig;
use crate::sampling::SamplerConfig;
use crate::trainer::{AdamConfig, EvalConfig, TrainConfig, DEFAULT_STEPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    Dir(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

/// Resolves `path` to one split: the path itself when it holds a manifest
/// (or is one), otherwise `path/<split>`.
pub fn split_path(path: &Path, split: &str) -> PathBuf {
    if path.is_file() || path.join(MANIFEST_FILE).is_file() {
        path.to_path_buf()
    } else {
        path.join(split)
    }
}

impl DataSource {
    /// Train and test splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic(s) => generate_synthetic(s),
            DataSource::Dir(dir) => Ok((
                load_dataset(&dir.join("train"))?,
                load_dataset(&dir.join("test"))?,
            )),
        }
    }

    /// Only the test split. A directory may also point straight at a split.
    pub fn load_test(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(s) => Ok(generate_synthetic(s)?.1),
            DataSource::Dir(dir) => load_dataset(&split_path(dir, "test")),
        }
    }
}

/// Optimizer and schedule settings; the rest of [`TrainConfig`] comes from
/// the top-level keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default)]
    pub eval_interval: usize,
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    /// Parameter initialization seed.
    #[serde(default)]
    pub seed: u64,
}

fn d_steps() -> usize {
    DEFAULT_STEPS
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: None,
            adam: AdamConfig::default(),
            steps: DEFAULT_STEPS,
            eval_interval: 0,
            grad_clip_norm: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareOptions {
    #[serde(default = "d_heads")]
    pub heads: Vec<AggregatorConfig>,
    /// Add the T=1 average-pooling image baseline row.
    #[serde(default = "yes")]
    pub baseline: bool,
    /// Repetitions with seeds `seed, seed+1, ...`; rows report means.
    #[serde(default = "one")]
    pub runs: usize,
}

fn d_heads() -> Vec<AggregatorConfig> {
    AggregatorConfig::all(DEFAULT_ATTENTION_CHANNELS, DEFAULT_HIDDEN_SIZE)
}
fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            heads: d_heads(),
            baseline: true,
            runs: 1,
        }
    }
}

fn d_head() -> AggregatorConfig {
    AggregatorConfig::Pooling { mode: PoolMode::Avg }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the data, sampler and initialization seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default = "d_head")]
    pub head: AggregatorConfig,
    #[serde(default = "yes")]
    pub frame_projection: bool,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub triplet: TripletConfig,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub compare: CompareOptions,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every key has a default")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Sets the top-level seed and pushes it into every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            if let DataSource::Synthetic(synth) = &mut self.data {
                synth.seed = s;
            }
            self.sampler.seed = s;
            self.train.seed = s;
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            head: self.head,
            frame_projection: self.frame_projection,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model(),
            triplet: self.triplet,
            sampler: self.sampler,
            learning_rate: self.train.learning_rate,
            adam: self.train.adam,
            steps: self.train.steps,
            eval_interval: self.train.eval_interval,
            grad_clip_norm: self.train.grad_clip_norm,
            seed: self.train.seed,
        }
    }

    /// Same run with another head; used by `compare`.
    pub fn with_head(&self, head: AggregatorConfig) -> Self {
        Self {
            head,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.train_config().validate()?;
        self.eval.validate()?;
        for h in &self.compare.heads {
            h.validate()?;
        }
        if self.compare.runs == 0 {
            return Err(Error::config("compare.runs must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.head.label(), "avg-pool");
        assert_eq!(c.train.steps, DEFAULT_STEPS);
        assert_eq!(c.compare.heads.len(), 10);
        assert_eq!(c.data, DataSource::Synthetic(SynthConfig::default()));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sead": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"stepz": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"synthetic": {"sigma": 1}}}"#).is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut c = RunConfig::from_json(r#"{"seed": 9}"#).unwrap();
        c.apply_seed();
        let DataSource::Synthetic(s) = &c.data else { unreachable!() };
        assert_eq!((s.seed, c.sampler.seed, c.train.seed), (9, 9, 9));
    }

    #[test]
    fn document_round_trips() {
        let text = r#"{
            "data": {"dir": "somewhere"},
            "head": {"kind": "rnn", "cell": "gru", "hidden_size": 8, "readout": "final_state"},
            "eval": {"rerank": {"lambda": 1.0}},
            "out": "o"
        }"#;
        let c = RunConfig::from_json(text).unwrap();
        assert_eq!(c.head.label(), "gru-final");
        let again = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn validation_catches_nested_errors() {
        let bad = [
            r#"{"data": {"synthetic": {"sigma_between": 0.0}}}"#,
            r#"{"sampler": {"k": 0}}"#,
            r#"{"eval": {"ranks": []}}"#,
            r#"{"eval": {"rerank": {"lambda": 2.0}}}"#,
            r#"{"compare": {"runs": 0}}"#,
        ];
        for text in bad {
            assert!(RunConfig::from_json(text).unwrap().validate().is_err(), "{text}");
        }
    }
}
