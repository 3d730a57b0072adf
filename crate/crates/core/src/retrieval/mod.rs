//! Video-level embeddings, distances, mAP/CMC evaluation and re-ranking.

mod metrics;
mod rerank;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use metrics::{evaluate, MetricsReport, RetrievalResult, DEFAULT_RANKS};
pub use rerank::{rerank, RerankConfig};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "TRACKRANK_THREADS";

/// Identity and camera of one query or gallery item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Meta {
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbedding {
    pub vector: Vec<f64>,
    pub meta: Meta,
}

/// Averages clip embeddings into one video embedding.
pub fn video_embedding(clips: &[Vec<f64>], meta: Meta) -> Result<VideoEmbedding> {
    let first = clips
        .first()
        .ok_or_else(|| Error::invalid("video embedding needs at least one clip"))?;
    let mut sum = vec![0.0; first.len()];
    for c in clips {
        if c.len() != sum.len() {
            return Err(Error::Shape {
                op: "video_embedding",
                lhs: vec![sum.len()],
                rhs: vec![c.len()],
            });
        }
        for (s, v) in sum.iter_mut().zip(c) {
            *s += v;
        }
    }
    let n = clips.len() as f64;
    let vector: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("video embedding is not finite"));
    }
    Ok(VideoEmbedding { vector, meta })
}

/// Stacks embeddings into an `N×D` matrix.
pub fn stack_embeddings(items: &[VideoEmbedding]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = items.iter().map(|e| e.vector.clone()).collect();
    Tensor::from_rows(&rows)
}

/// Euclidean distances between the rows of `queries[Q×D]` and
/// `gallery[G×D]`.
pub fn distance_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.shape()[1] != gallery.shape()[1] {
        return Err(Error::Shape {
            op: "distance_matrix",
            lhs: queries.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let (q, g) = (queries.shape()[0], gallery.shape()[0]);
    let mut out = vec![0.0; q * g];
    out.par_chunks_mut(g).enumerate().for_each(|(i, row)| {
        let a = queries.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let sq: f64 = a
                .iter()
                .zip(gallery.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            *slot = sq.sqrt();
        }
    });
    Tensor::new(vec![q, g], out)
}

/// Thread pool sized by `TRACKRANK_THREADS` (unset or 0: rayon's default).
pub fn eval_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a thread count, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot build evaluation thread pool: {e}")))
}
