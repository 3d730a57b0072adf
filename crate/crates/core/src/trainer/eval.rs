use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamSet;
use crate::retrieval::{
    distance_matrix, eval_pool, evaluate, rerank, stack_embeddings, MetricsReport, RerankConfig,
    RetrievalResult, VideoEmbedding, DEFAULT_RANKS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    /// Leave padded trailing clips out of video averages.
    #[serde(default)]
    pub drop_padded: bool,
    #[serde(default)]
    pub rerank: Option<RerankConfig>,
}

fn default_ranks() -> Vec<usize> {
    DEFAULT_RANKS.to_vec()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ranks: default_ranks(),
            drop_padded: false,
            rerank: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::config("evaluation ranks must be a non-empty list of positive ranks"));
        }
        if let Some(r) = &self.rerank {
            r.validate()?;
        }
        Ok(())
    }
}

/// Metrics at one training step, without timing so logs stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub num_valid_queries: usize,
}

impl EvalRecord {
    pub fn new(step: usize, report: &MetricsReport) -> Self {
        Self {
            step,
            map: report.map,
            cmc: report.cmc.clone(),
            num_valid_queries: report.num_valid_queries,
        }
    }
}

/// Video embeddings of every tracklet, computed on the evaluation pool.
pub fn embed_dataset(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    t: usize,
    drop_padded: bool,
) -> Result<Vec<VideoEmbedding>> {
    eval_pool()?.install(|| {
        dataset
            .tracklets
            .par_iter()
            .map(|tr| model.embed_tracklet(params, tr, t, drop_padded))
            .collect()
    })
}

/// Ranks the gallery (every tracklet) for each query tracklet.
pub fn evaluate_model(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    t: usize,
    config: &EvalConfig,
) -> Result<(RetrievalResult, MetricsReport)> {
    config.validate()?;
    if dataset.queries.is_empty() {
        return Err(Error::invalid("evaluation dataset has no query tracklets"));
    }
    let start = Instant::now();
    let gallery = embed_dataset(model, params, dataset, t, config.drop_padded)?;
    let queries: Vec<VideoEmbedding> = dataset.queries.iter().map(|&i| gallery[i].clone()).collect();
    let g = stack_embeddings(&gallery)?;
    let q = stack_embeddings(&queries)?;
    let pool = eval_pool()?;
    let mut dist = pool.install(|| distance_matrix(&q, &g))?;
    if let Some(rr) = &config.rerank {
        let (qq, gg) = pool.install(|| Ok::<_, Error>((distance_matrix(&q, &q)?, distance_matrix(&g, &g)?)))?;
        dist = rerank(&dist, &qq, &gg, rr)?;
    }
    let result = pool.install(|| evaluate(&dist, &dataset.query_meta(), &dataset.gallery_meta()))?;
    let report = result.report(&config.ranks, start.elapsed().as_secs_f64());
    Ok((result, report))
}
