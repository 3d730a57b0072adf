use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Meta;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Ranked retrieval outcome for a query set.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub distances: Tensor,
    /// Per query, gallery indices in rank order with same-identity
    /// same-camera entries removed.
    pub ranked: Vec<Vec<usize>>,
    /// `None` for queries without a cross-camera match.
    pub average_precision: Vec<Option<f64>>,
    pub map: f64,
    /// `cmc[k - 1]` is CMC at rank `k`, for `k = 1..=G`.
    pub cmc: Vec<f64>,
    pub num_valid_queries: usize,
    pub num_skipped_queries: usize,
}

/// Machine-readable metrics summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub num_valid_queries: usize,
    pub num_skipped_queries: usize,
    pub runtime_secs: f64,
}

impl RetrievalResult {
    /// CMC at rank `k`; ranks past the gallery size saturate.
    pub fn cmc_at(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.cmc[k.min(self.cmc.len()) - 1]
    }

    pub fn report(&self, ranks: &[usize], runtime_secs: f64) -> MetricsReport {
        MetricsReport {
            map: self.map,
            cmc: ranks.iter().map(|&k| (k, self.cmc_at(k))).collect(),
            num_valid_queries: self.num_valid_queries,
            num_skipped_queries: self.num_skipped_queries,
            runtime_secs,
        }
    }
}

struct QueryOutcome {
    ranked: Vec<usize>,
    ap: Option<f64>,
    first_hit: Option<usize>,
}

fn score_query(row: &[f64], query: Meta, gallery: &[Meta]) -> QueryOutcome {
    let mut ranked: Vec<usize> = (0..gallery.len())
        .filter(|&j| gallery[j] != query)
        .collect();
    ranked.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = None;
    for (pos, &j) in ranked.iter().enumerate() {
        if gallery[j].identity == query.identity {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first_hit.get_or_insert(pos);
        }
    }
    QueryOutcome {
        ranked,
        ap: (hits > 0).then(|| precision_sum / hits as f64),
        first_hit,
    }
}

/// Scores a `Q×G` distance matrix under the cross-camera protocol.
///
/// Gallery items sharing both identity and camera with a query are dropped
/// from its ranking; ties are broken by gallery index. Queries with no
/// remaining same-identity item are skipped and counted.
pub fn evaluate(distances: &Tensor, queries: &[Meta], gallery: &[Meta]) -> Result<RetrievalResult> {
    if distances.shape() != [queries.len(), gallery.len()] {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: distances.shape().to_vec(),
            rhs: vec![queries.len(), gallery.len()],
        });
    }
    let outcomes: Vec<QueryOutcome> = queries
        .par_iter()
        .enumerate()
        .map(|(i, &q)| score_query(distances.row(i), q, gallery))
        .collect();
    let valid: Vec<&QueryOutcome> = outcomes.iter().filter(|o| o.ap.is_some()).collect();
    if valid.is_empty() {
        return Err(Error::invalid(
            "no query has a cross-camera match in the gallery",
        ));
    }
    let n = valid.len() as f64;
    let map = valid.iter().filter_map(|o| o.ap).sum::<f64>() / n;
    let mut first_hits = vec![0usize; gallery.len()];
    for o in &valid {
        first_hits[o.first_hit.expect("valid query has a hit")] += 1;
    }
    let mut cmc = Vec::with_capacity(gallery.len());
    let mut acc = 0usize;
    for c in first_hits {
        acc += c;
        cmc.push(acc as f64 / n);
    }
    let num_valid_queries = valid.len();
    let (ranked, average_precision) = outcomes.into_iter().map(|o| (o.ranked, o.ap)).unzip();
    Ok(RetrievalResult {
        distances: distances.clone(),
        ranked,
        average_precision,
        map,
        cmc,
        num_valid_queries,
        num_skipped_queries: queries.len() - num_valid_queries,
    })
}
