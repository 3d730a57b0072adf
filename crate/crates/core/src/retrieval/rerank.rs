use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankConfig {
    #[serde(default = "default_k1")]
    pub k1: usize,
    #[serde(default = "default_k2")]
    pub k2: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_k1() -> usize {
    20
}
fn default_k2() -> usize {
    6
}
fn default_lambda() -> f64 {
    0.3
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k1: default_k1(),
            k2: default_k2(),
            lambda: default_lambda(),
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("rerank lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::config("rerank k1 and k2 must be at least 1"));
        }
        Ok(())
    }
}

/// Top `k` columns of each row of `dist`, nearest first, ties by index.
fn initial_rank(dist: &[f64], n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Members of `rank[i][..=k]` that also have `i` within their own top `k + 1`.
fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k]
        .iter()
        .copied()
        .filter(|&c| rank[c][..=k].contains(&i))
        .collect()
}

/// Round half to even, as used for the `k1/2` expansion neighborhood.
fn half_round_even(k: usize) -> usize {
    let h = k / 2;
    if k % 2 == 1 && h % 2 == 1 {
        h + 1
    } else {
        h
    }
}

/// k-reciprocal re-ranking of `q_g[Q×G]`, given `q_q[Q×Q]` and `g_g[G×G]`.
///
/// Returns `λ·q_g + (1 − λ)·J` where `J` is the Jaccard distance between
/// expanded k-reciprocal neighbor encodings.
pub fn rerank(q_g: &Tensor, q_q: &Tensor, g_g: &Tensor, config: &RerankConfig) -> Result<Tensor> {
    config.validate()?;
    let (q, g) = match q_g.shape() {
        [q, g] => (*q, *g),
        s => {
            return Err(Error::Shape {
                op: "rerank",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    if q_q.shape() != [q, q] || g_g.shape() != [g, g] {
        return Err(Error::Shape {
            op: "rerank",
            lhs: q_q.shape().to_vec(),
            rhs: g_g.shape().to_vec(),
        });
    }
    if config.k1 > g || config.k2 > g {
        return Err(Error::invalid(format!(
            "rerank k1={} / k2={} exceed the gallery size {g}",
            config.k1, config.k2
        )));
    }
    let n = q + g;
    // Joint squared distances, each row scaled by its maximum.
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = match (i < q, j < q) {
                (true, true) => q_q.data()[i * q + j],
                (true, false) => q_g.data()[i * g + (j - q)],
                (false, true) => q_g.data()[j * g + (i - q)],
                (false, false) => g_g.data()[(i - q) * g + (j - q)],
            };
            dist[i * n + j] = d * d;
        }
    }
    for row in dist.chunks_mut(n) {
        let max = row.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v /= max);
        }
    }
    let rank = initial_rank(&dist, n);
    let half = half_round_even(config.k1);

    let mut v = vec![0.0; n * n];
    for i in 0..n {
        let base = reciprocal(&rank, i, config.k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = reciprocal(&rank, c, half);
            let shared = cand.iter().filter(|x| base.contains(x)).count();
            if shared as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let weights: Vec<f64> = expanded.iter().map(|&j| (-dist[i * n + j]).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in expanded.iter().zip(weights) {
            v[i * n + j] = w / total;
        }
    }

    if config.k2 != 1 {
        let mut qe = vec![0.0; n * n];
        for i in 0..n {
            let dst = &mut qe[i * n..(i + 1) * n];
            for &j in &rank[i][..config.k2] {
                for (d, s) in dst.iter_mut().zip(&v[j * n..(j + 1) * n]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= config.k2 as f64);
        }
        v = qe;
    }

    let lambda = config.lambda;
    let mut out = vec![0.0; q * g];
    for i in 0..q {
        let vi = &v[i * n..(i + 1) * n];
        for j in 0..g {
            let vj = &v[(q + j) * n..(q + j + 1) * n];
            let overlap: f64 = vi.iter().zip(vj).map(|(a, b)| a.min(*b)).sum();
            let jaccard = 1.0 - overlap / (2.0 - overlap);
            out[i * g + j] = lambda * q_g.data()[i * g + j] + (1.0 - lambda) * jaccard;
        }
    }
    Tensor::new(vec![q, g], out)
}
