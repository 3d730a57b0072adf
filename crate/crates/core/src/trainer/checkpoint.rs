use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::TrainConfig;
use crate::aggregators::FrameShape;
use crate::data::format::{self, Dtype};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON sidecar stored next to the tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    pub frame: FrameShape,
    pub num_classes: usize,
    pub tensor_names: Vec<String>,
    pub adam_step: u64,
}

/// Parameters, optimizer moments and step counter of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    pub adam: AdamState,
}

/// SHA-256 of the config fields that shape the trajectory (`steps` and
/// `eval_interval` excluded so a run can be extended).
pub fn config_hash(config: &TrainConfig) -> String {
    let mut c = config.clone();
    c.steps = 0;
    c.eval_interval = 0;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

impl Checkpoint {
    /// Writes `<path>.json` and `<path>.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (json, bin) = paths(path);
        let tensors: Vec<&Tensor> = self
            .params
            .tensors()
            .iter()
            .chain(&self.adam.m)
            .chain(&self.adam.v)
            .collect();
        format::write_tensors(&bin, &tensors, Dtype::F64)?;
        let text = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }

    /// Reads a checkpoint given either of its two files or their common stem.
    pub fn load(path: &Path) -> Result<Self> {
        let (json, bin) = paths(path);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: json.clone(),
            source,
        })?;
        let bad = |message: String| Error::Format {
            path: json.clone(),
            message,
        };
        if meta.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", meta.version)));
        }
        if meta.config_hash != config_hash(&meta.config) {
            return Err(bad("config hash does not match the stored config".into()));
        }
        let mut tensors = format::read_tensors(&bin)?;
        let n = meta.tensor_names.len();
        if tensors.len() != 3 * n {
            return Err(Error::Format {
                path: bin,
                message: format!("expected {} tensors, found {}", 3 * n, tensors.len()),
            });
        }
        let v = tensors.split_off(2 * n);
        let m = tensors.split_off(n);
        let (_, mut params) = rebuild(&meta)?;
        params.assign(&meta.tensor_names, tensors)?;
        for (slot, (mi, vi)) in params.tensors().iter().zip(m.iter().zip(&v)) {
            if mi.shape() != slot.shape() || vi.shape() != slot.shape() {
                return Err(bad("optimizer moments do not match parameter shapes".into()));
            }
        }
        Ok(Self {
            adam: AdamState {
                step: meta.adam_step,
                m,
                v,
            },
            meta,
            params,
        })
    }

    /// Rebuilds the model whose parameters this checkpoint holds.
    pub fn model(&self) -> Result<Model> {
        Ok(rebuild(&self.meta)?.0)
    }
}

/// The model and freshly initialized parameters with the stored layout.
fn rebuild(meta: &CheckpointMeta) -> Result<(Model, ParamSet)> {
    let mut scratch = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::init(meta.config.model, meta.frame, meta.num_classes, &mut scratch, &mut rng)?;
    Ok((model, scratch))
}
