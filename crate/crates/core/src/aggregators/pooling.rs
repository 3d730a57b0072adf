use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

use super::PoolMode;

/// Elementwise mean or max over time of `frames[T×D]`.
pub fn temporal_pool(g: &mut Graph, mode: PoolMode, frames: Var) -> Result<Var> {
    let shape = g.shape(frames);
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "temporal_pool",
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        });
    }
    match mode {
        PoolMode::Avg => g.mean_axis(frames, 0),
        PoolMode::Max => g.max_axis(frames, 0),
    }
}
