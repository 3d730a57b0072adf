use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

use super::FrameShape;

/// `T` consecutive frame features of one tracklet.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    /// `T×D` (vector form) or `T×w×h×C` (map form).
    pub frames: Tensor,
    /// True when trailing frames repeat the last real frame.
    pub padded: bool,
}

impl FeatureClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        if !(frames.rank() == 2 || frames.rank() == 4) {
            return Err(Error::invalid(format!(
                "clip frames must be T×D or T×w×h×C, got {:?}",
                frames.shape()
            )));
        }
        Ok(Self {
            frames,
            padded: false,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> FrameShape {
        let s = self.frames.shape();
        if s.len() == 4 {
            FrameShape {
                width: s[1],
                height: s[2],
                channels: s[3],
            }
        } else {
            FrameShape::vector(s[1])
        }
    }

    /// Frames as `T×w×h×C`.
    pub fn map_form(&self) -> Tensor {
        let f = self.frame_shape();
        self.frames
            .reshape(&[self.len(), f.width, f.height, f.channels])
            .expect("element count preserved")
    }

    /// Frames as `T×C`, averaging over the spatial grid.
    pub fn vector_form(&self) -> Tensor {
        let f = self.frame_shape();
        let (t, area, c) = (self.len(), f.width * f.height, f.channels);
        if area == 1 {
            return self.frames.reshape(&[t, c]).expect("element count preserved");
        }
        let src = self.frames.data();
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let dst = &mut out[ti * c..(ti + 1) * c];
            for p in 0..area {
                let base = (ti * area + p) * c;
                for (o, &v) in dst.iter_mut().zip(&src[base..base + c]) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o /= area as f64;
            }
        }
        Tensor::from_parts(vec![t, c], out)
    }
}

/// `[T×w×h×C] → [T×C]` by averaging over the `w×h` grid.
pub fn spatial_average(g: &mut Graph, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "spatial_average",
            lhs: s,
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (t, area, c) = (s[0], s[1] * s[2], s[3]);
    if area == 1 {
        return g.reshape(map, &[t, c]);
    }
    let grid = g.reshape(map, &[t, area, c])?;
    g.mean_axis(grid, 1)
}
