//! Clip-level temporal aggregation heads.
//!
//! A head collapses the `T` frame features of one clip into a single
//! embedding whose size does not depend on `T`:
//!
//! * temporal pooling (average or max over time),
//! * temporal attention (a spatial-conv score network followed by either a
//!   per-frame FC layer or a temporal conv, normalized by softmax or by
//!   sigmoid + L1), and
//! * recurrent aggregation (LSTM or GRU, read out as the final hidden state
//!   or as the average of per-step outputs).
//!
//! Heads take clips in map form `T×w×h×C`; vector features are the `w = h = 1`
//! special case.

mod attention;
mod clip;
mod pooling;
mod rnn;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Graph, Tensor, Var};

pub use attention::{attention_aggregate, attention_scores, normalize_scores, AttentionParams};
pub use clip::{spatial_average, FeatureClip};
pub use pooling::temporal_pool;
pub use rnn::{rnn_aggregate, RnnParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNetwork {
    /// Full-spatial conv to `d_t` channels, then FC to one score per frame.
    SpatialFc,
    /// Full-spatial conv to `d_t` channels, then a conv along time to one
    /// score per frame.
    SpatialTemporalConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Softmax,
    SigmoidL1,
}

pub const DEFAULT_ATTENTION_CHANNELS: usize = 256;
pub const DEFAULT_TEMPORAL_KERNEL: usize = 3;
pub const DEFAULT_HIDDEN_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub network: AttentionNetwork,
    pub normalization: Normalization,
    #[serde(default = "default_d_t")]
    pub d_t: usize,
    #[serde(default = "default_kernel")]
    pub temporal_kernel: usize,
    /// Multiply the weighted sum by an extra `1/T`.
    #[serde(default)]
    pub literal_eq1: bool,
}

fn default_d_t() -> usize {
    DEFAULT_ATTENTION_CHANNELS
}

fn default_kernel() -> usize {
    DEFAULT_TEMPORAL_KERNEL
}

impl AttentionConfig {
    pub fn new(network: AttentionNetwork, normalization: Normalization) -> Self {
        Self {
            network,
            normalization,
            d_t: DEFAULT_ATTENTION_CHANNELS,
            temporal_kernel: DEFAULT_TEMPORAL_KERNEL,
            literal_eq1: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_t == 0 {
            return Err(Error::config("attention d_t must be at least 1"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "attention temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RnnCell {
    Lstm,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    FinalState,
    OutputAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnConfig {
    pub cell: RnnCell,
    pub hidden_size: usize,
    pub readout: Readout,
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::config("rnn hidden_size must be at least 1"));
        }
        Ok(())
    }
}

/// Which temporal modeling head to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorConfig {
    Pooling { mode: PoolMode },
    Attention(AttentionConfig),
    Rnn(RnnConfig),
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            AggregatorConfig::Pooling { .. } => Ok(()),
            AggregatorConfig::Attention(a) => a.validate(),
            AggregatorConfig::Rnn(r) => r.validate(),
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, AggregatorConfig::Rnn(_))
    }

    /// Short row label, e.g. `att-tconv-softmax` or `lstm-avg`.
    pub fn label(&self) -> String {
        match self {
            AggregatorConfig::Pooling { mode: PoolMode::Avg } => "avg-pool".into(),
            AggregatorConfig::Pooling { mode: PoolMode::Max } => "max-pool".into(),
            AggregatorConfig::Attention(a) => {
                let net = match a.network {
                    AttentionNetwork::SpatialFc => "fc",
                    AttentionNetwork::SpatialTemporalConv => "tconv",
                };
                let norm = match a.normalization {
                    Normalization::Softmax => "softmax",
                    Normalization::SigmoidL1 => "sigmoid",
                };
                format!("att-{net}-{norm}")
            }
            AggregatorConfig::Rnn(r) => {
                let cell = match r.cell {
                    RnnCell::Lstm => "lstm",
                    RnnCell::Gru => "gru",
                };
                let readout = match r.readout {
                    Readout::FinalState => "final",
                    Readout::OutputAverage => "avg",
                };
                format!("{cell}-{readout}")
            }
        }
    }

    /// The ten head configurations covered by the comparison and gradient
    /// suites, with the given attention width and hidden size.
    pub fn all(d_t: usize, hidden_size: usize) -> Vec<AggregatorConfig> {
        let mut out = vec![
            AggregatorConfig::Pooling { mode: PoolMode::Avg },
            AggregatorConfig::Pooling { mode: PoolMode::Max },
        ];
        for network in [AttentionNetwork::SpatialFc, AttentionNetwork::SpatialTemporalConv] {
            for normalization in [Normalization::Softmax, Normalization::SigmoidL1] {
                out.push(AggregatorConfig::Attention(AttentionConfig {
                    d_t,
                    ..AttentionConfig::new(network, normalization)
                }));
            }
        }
        for cell in [RnnCell::Lstm, RnnCell::Gru] {
            for readout in [Readout::FinalState, Readout::OutputAverage] {
                out.push(AggregatorConfig::Rnn(RnnConfig {
                    cell,
                    hidden_size,
                    readout,
                }));
            }
        }
        out
    }
}

/// Spatial extent and channel count of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl FrameShape {
    pub fn vector(dim: usize) -> Self {
        Self {
            width: 1,
            height: 1,
            channels: dim,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.width, self.height, self.channels]
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
enum HeadParams {
    Pooling(PoolMode),
    Attention(AttentionConfig, AttentionParams),
    Rnn(RnnConfig, RnnParams),
}

/// A configured head with its parameters registered in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    config: AggregatorConfig,
    frame: FrameShape,
    params: HeadParams,
}

impl Aggregator {
    /// Registers the head's parameters in `params`.
    pub fn init<R: Rng>(
        config: AggregatorConfig,
        frame: FrameShape,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if frame.is_empty() {
            return Err(Error::config("frame shape must be non-empty"));
        }
        let head = match config {
            AggregatorConfig::Pooling { mode } => HeadParams::Pooling(mode),
            AggregatorConfig::Attention(cfg) => {
                HeadParams::Attention(cfg, AttentionParams::init(&cfg, frame, params, rng))
            }
            AggregatorConfig::Rnn(cfg) => {
                HeadParams::Rnn(cfg, RnnParams::init(&cfg, frame.channels, params, rng))
            }
        };
        Ok(Self {
            config,
            frame,
            params: head,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn frame(&self) -> FrameShape {
        self.frame
    }

    pub fn output_dim(&self) -> usize {
        match &self.params {
            HeadParams::Rnn(cfg, _) => cfg.hidden_size,
            _ => self.frame.channels,
        }
    }

    /// Evaluates the head on one clip without recording gradients.
    pub fn apply(&self, params: &ParamSet, clip: &FeatureClip) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = params.bind_frozen(&mut g);
        let x = g.constant(clip.map_form());
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    /// Aggregates one clip `[T×w×h×C]` into a `[D_out]` embedding.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], clip: Var) -> Result<Var> {
        let shape = g.shape(clip).to_vec();
        if shape.len() != 4 || shape[1..] != self.frame.dims() {
            return Err(Error::Shape {
                op: "aggregator",
                lhs: shape,
                rhs: self.frame.dims().to_vec(),
            });
        }
        match &self.params {
            HeadParams::Pooling(mode) => {
                let frames = spatial_average(g, clip)?;
                temporal_pool(g, *mode, frames)
            }
            HeadParams::Attention(cfg, p) => {
                let scores = attention_scores(g, cfg, p, vars, clip)?;
                let weights = normalize_scores(g, cfg.normalization, scores)?;
                let frames = spatial_average(g, clip)?;
                attention_aggregate(g, frames, weights, cfg.literal_eq1)
            }
            HeadParams::Rnn(cfg, p) => {
                let frames = spatial_average(g, clip)?;
                rnn_aggregate(g, cfg, p, vars, frames)
            }
        }
    }
}
