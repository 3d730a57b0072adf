//! Adam training of the frame projection, head and classifier on P×K
//! batches, with checkpoints and loss/metric logs.

mod adam;
mod checkpoint;
mod eval;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{batch_hard_triplet, softmax_cross_entropy, TripletConfig};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::sampling::{PkSampler, SamplerConfig};
use crate::tensor::{Graph, Tensor};

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use eval::{embed_dataset, evaluate_model, EvalConfig, EvalRecord};

pub const LR_POOLING_ATTENTION: f64 = 3e-4;
pub const LR_RECURRENT: f64 = 1e-4;
pub const RECURRENT_CLIP_NORM: f64 = 10.0;
pub const DEFAULT_STEPS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub triplet: TripletConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Defaults to 3e-4 for pooling/attention heads and 1e-4 for RNN heads.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_interval: usize,
    /// Global gradient-norm cap. Defaults to 10 for RNN heads and none
    /// otherwise; 0 disables.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    /// Seeds parameter initialization.
    #[serde(default)]
    pub seed: u64,
}

fn d_steps() -> usize {
    DEFAULT_STEPS
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            triplet: TripletConfig::default(),
            sampler: SamplerConfig::default(),
            learning_rate: None,
            adam: AdamConfig::default(),
            steps: DEFAULT_STEPS,
            eval_interval: 0,
            grad_clip_norm: None,
            seed: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(if self.model.head.is_recurrent() {
            LR_RECURRENT
        } else {
            LR_POOLING_ATTENTION
        })
    }

    pub fn clip_norm(&self) -> Option<f64> {
        match self.grad_clip_norm {
            Some(c) if c > 0.0 => Some(c),
            Some(_) => None,
            None => self.model.head.is_recurrent().then_some(RECURRENT_CLIP_NORM),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.head.validate()?;
        self.triplet.validate()?;
        self.sampler.validate()?;
        self.adam.validate()?;
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c >= 0.0) {
                return Err(Error::config(format!("grad_clip_norm must be >= 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Losses and gradient statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub loss: f64,
    pub triplet: f64,
    pub cross_entropy: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn diverged(step: usize, component: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            component,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Single-writer training loop state.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    params: ParamSet,
    adam: AdamState,
    sampler: PkSampler,
    step: usize,
}

impl Trainer {
    pub fn new(data: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sampler = PkSampler::new(&data.tracklets, config.sampler)?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(
            config.model,
            data.layout.frame_shape(),
            data.num_identities(),
            &mut params,
            &mut rng,
        )?;
        let adam = AdamState::zeros_like(params.tensors());
        Ok(Self {
            config,
            model,
            params,
            adam,
            sampler,
            step: 0,
        })
    }

    /// Continues from `checkpoint`. `config` may differ from the stored one
    /// only in `steps` and `eval_interval`.
    pub fn resume(data: &Dataset, checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config_hash(&config) != checkpoint.meta.config_hash {
            return Err(Error::config(
                "checkpoint was trained with a different configuration",
            ));
        }
        if data.layout.frame_shape() != checkpoint.meta.frame
            || data.num_identities() != checkpoint.meta.num_classes
        {
            return Err(Error::config(
                "checkpoint does not match the dataset's layout or identity count",
            ));
        }
        let model = checkpoint.model()?;
        let sampler = PkSampler::new(&data.tracklets, config.sampler)?;
        Ok(Self {
            config,
            model,
            params: checkpoint.params,
            adam: checkpoint.adam,
            sampler,
            step: checkpoint.meta.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Sample, forward, backward, Adam update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let batch = self.sampler.sample(self.step as u64);
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let emb = self
            .model
            .embed_batch(&mut g, &vars, &batch.clips)
            .map_err(diverged(step, "embedding"))?;
        let logits = self
            .model
            .logits(&mut g, &vars, emb)
            .map_err(diverged(step, "logits"))?;
        let triplet = batch_hard_triplet(&mut g, emb, &batch.labels, &self.config.triplet)
            .map_err(diverged(step, "triplet loss"))?;
        let ce = softmax_cross_entropy(&mut g, logits, &batch.labels)
            .map_err(diverged(step, "cross-entropy loss"))?;
        let total = g.add(ce, triplet).map_err(diverged(step, "total loss"))?;
        let mut grads = g.backward(total).map_err(diverged(step, "gradient"))?;
        let mut grad_tensors: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.take(v).expect("every parameter is a trainable leaf"))
            .collect();
        let (grad_norm, clipped) = match self.config.clip_norm() {
            Some(max) => {
                let n = clip_global_norm(&mut grad_tensors, max);
                (n, n > max)
            }
            None => (clip_global_norm(&mut grad_tensors, f64::INFINITY), false),
        };
        adam_step(
            self.params.tensors_mut(),
            &grad_tensors,
            &mut self.adam,
            self.config.lr(),
            &self.config.adam,
        )?;
        if let Some((name, _)) = self.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                component: "parameters",
                detail: format!("{name} left the finite range after the update"),
            });
        }
        self.step = step;
        Ok(StepRecord {
            step,
            loss: g.value(total).data()[0],
            triplet: g.value(triplet).data()[0],
            cross_entropy: g.value(ce).data()[0],
            grad_norm,
            clipped,
        })
    }

    pub fn evaluate(&self, data: &Dataset, eval: &EvalConfig) -> Result<EvalRecord> {
        let (_, report) = evaluate_model(&self.model, &self.params, data, self.config.sampler.t, eval)?;
        Ok(EvalRecord::new(self.step, &report))
    }

    /// Runs to `config.steps`, evaluating every `eval_interval` steps and
    /// once at the end when evaluation data is given.
    pub fn run(&mut self, eval: Option<(&Dataset, &EvalConfig)>, log: &mut TrainLog) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            log.steps.push(rec);
            let interval = self.config.eval_interval;
            if let Some((data, cfg)) = eval {
                if (interval > 0 && self.step % interval == 0) || self.is_done() {
                    log.evals.push(self.evaluate(data, cfg)?);
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                step: self.step,
                config_hash: config_hash(&self.config),
                config: self.config.clone(),
                frame: self.model.frame(),
                num_classes: self.model.num_classes(),
                tensor_names: self.params.names().to_vec(),
                adam_step: self.adam.step,
            },
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }
}

/// Trains from scratch and returns the final checkpoint with its log.
pub fn train(
    data: &Dataset,
    eval: Option<(&Dataset, &EvalConfig)>,
    config: TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    let mut trainer = Trainer::new(data, config)?;
    let mut log = TrainLog::default();
    trainer.run(eval, &mut log)?;
    Ok((trainer.checkpoint(), log))
}

#[cfg(test)]
mod tests;
