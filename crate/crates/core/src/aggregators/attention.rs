use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Graph, Var};

use super::{AttentionConfig, AttentionNetwork, FrameShape, Normalization};

/// Parameter slots of an attention score network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    /// `[w×h×C×d_t]`
    pub spatial_w: usize,
    /// `[d_t]`
    pub spatial_b: usize,
    /// `[d_t×1]` for the FC network, `[k×d_t×1]` for the temporal conv.
    pub score_w: usize,
    /// `[1]`
    pub score_b: usize,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        cfg: &AttentionConfig,
        frame: FrameShape,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Self {
        let fan_in = frame.len() as f64;
        let spatial_w = params.push_uniform(
            "head.spatial_conv.weight",
            &[frame.width, frame.height, frame.channels, cfg.d_t],
            1.0 / fan_in.sqrt(),
            rng,
        );
        let spatial_b = params.push_zeros("head.spatial_conv.bias", &[cfg.d_t]);
        let (score_w, score_b) = match cfg.network {
            AttentionNetwork::SpatialFc => (
                params.push_uniform(
                    "head.score_fc.weight",
                    &[cfg.d_t, 1],
                    1.0 / (cfg.d_t as f64).sqrt(),
                    rng,
                ),
                params.push_zeros("head.score_fc.bias", &[1]),
            ),
            AttentionNetwork::SpatialTemporalConv => (
                params.push_uniform(
                    "head.temporal_conv.weight",
                    &[cfg.temporal_kernel, cfg.d_t, 1],
                    1.0 / ((cfg.temporal_kernel * cfg.d_t) as f64).sqrt(),
                    rng,
                ),
                params.push_zeros("head.temporal_conv.bias", &[1]),
            ),
        };
        Self {
            spatial_w,
            spatial_b,
            score_w,
            score_b,
        }
    }
}

/// Raw per-frame scores `s[T]` for a map-form clip `[T×w×h×C]`.
pub fn attention_scores(
    g: &mut Graph,
    cfg: &AttentionConfig,
    p: &AttentionParams,
    vars: &[Var],
    clip: Var,
) -> Result<Var> {
    let t = g.shape(clip)[0];
    let hidden = g.spatial_conv(clip, vars[p.spatial_w], vars[p.spatial_b])?;
    let scores = match cfg.network {
        AttentionNetwork::SpatialFc => g.affine(hidden, vars[p.score_w], vars[p.score_b])?,
        AttentionNetwork::SpatialTemporalConv => {
            g.time_conv(hidden, vars[p.score_w], vars[p.score_b])?
        }
    };
    g.reshape(scores, &[t])
}

/// Turns raw scores into weights summing to one.
pub fn normalize_scores(g: &mut Graph, mode: Normalization, scores: Var) -> Result<Var> {
    if g.shape(scores).len() != 1 {
        return Err(Error::Shape {
            op: "normalize_scores",
            lhs: g.shape(scores).to_vec(),
            rhs: vec![0],
        });
    }
    match mode {
        Normalization::Softmax => g.softmax(scores, 0),
        Normalization::SigmoidL1 => {
            let s = g.sigmoid(scores)?;
            let total = g.sum_all(s)?;
            g.div_by(s, total)
        }
    }
}

/// `Σ_t a_t f_t` over `frames[T×D]`; with `literal_eq1` the sum is further
/// divided by `T`.
pub fn attention_aggregate(
    g: &mut Graph,
    frames: Var,
    weights: Var,
    literal_eq1: bool,
) -> Result<Var> {
    let (fs, ws) = (g.shape(frames).to_vec(), g.shape(weights).to_vec());
    if fs.len() != 2 || ws != [fs[0]] {
        return Err(Error::Shape {
            op: "attention_aggregate",
            lhs: fs,
            rhs: ws,
        });
    }
    let (t, d) = (fs[0], fs[1]);
    let row = g.reshape(weights, &[1, t])?;
    let summed = g.matmul(row, frames)?;
    let out = g.reshape(summed, &[d])?;
    if literal_eq1 {
        g.scale(out, 1.0 / t as f64)
    } else {
        Ok(out)
    }
}
