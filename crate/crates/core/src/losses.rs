//! Batch-hard triplet loss, identity cross-entropy and their sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over anchors.
    Sum,
    /// Mean over anchors.
    #[default]
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            reduction: Reduction::Mean,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config(format!(
                "triplet margin must be a non-negative number, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Checks the P×K structure: at least two identities, each appearing the
/// same number of times. Returns `(P, K)`.
pub fn pk_structure(labels: &[usize]) -> Result<(usize, usize)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid(format!(
            "batch needs at least 2 identities for negatives, got {}",
            counts.len()
        )));
    }
    let k = *counts.values().next().unwrap();
    if counts.values().any(|&c| c != k) {
        return Err(Error::invalid(format!(
            "batch is not P×K balanced: per-identity counts {:?}",
            counts.values().collect::<Vec<_>>()
        )));
    }
    Ok((counts.len(), k))
}

/// For every anchor, the flat indices into the `N×N` distance matrix of its
/// hardest positive (largest same-label distance, self included) and hardest
/// negative (smallest other-label distance). Ties keep the lowest index.
pub fn hardest_pairs(dist: &Tensor, labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let d = dist.data();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for a in 0..n {
        let row = &d[a * n..(a + 1) * n];
        let mut best_p: Option<usize> = None;
        let mut best_n: Option<usize> = None;
        for (j, &v) in row.iter().enumerate() {
            if labels[j] == labels[a] {
                if best_p.is_none_or(|b| v > row[b]) {
                    best_p = Some(j);
                }
            } else if best_n.is_none_or(|b| v < row[b]) {
                best_n = Some(j);
            }
        }
        pos.push(a * n + best_p.expect("anchor is its own positive"));
        neg.push(a * n + best_n.expect("validated: a negative exists"));
    }
    (pos, neg)
}

/// Batch-hard triplet loss over `embeddings[N×D]`.
///
/// Per anchor: `[(d(a, hardest positive) − d(a, hardest negative)) + m]₊`
/// with Euclidean `d`, reduced by sum or mean.
pub fn batch_hard_triplet(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    config: &TripletConfig,
) -> Result<Var> {
    config.validate()?;
    let shape = g.shape(embeddings);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "batch_hard_triplet",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    pk_structure(labels)?;
    let dist = g.pairwise_distance(embeddings)?;
    let (pos_idx, neg_idx) = hardest_pairs(g.value(dist), labels);
    let pos = g.gather(dist, &pos_idx)?;
    let neg = g.gather(dist, &neg_idx)?;
    let gap = g.sub(pos, neg)?;
    let pre = g.add_scalar(gap, config.margin)?;
    let hinge = g.relu(pre)?;
    match config.reduction {
        Reduction::Sum => g.sum_all(hinge),
        Reduction::Mean => g.mean_all(hinge),
    }
}

/// `−(1/N) Σ log softmax(logits)[label]`.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let logp = g.log_softmax(logits, 1)?;
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| i * classes + l)
        .collect();
    let picked = g.gather(logp, &idx)?;
    let mean = g.mean_all(picked)?;
    g.scale(mean, -1.0)
}

/// The three scalar nodes of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub triplet: Var,
    pub cross_entropy: Var,
}

/// `L = L_softmax + L_triplet`.
pub fn total_loss(
    g: &mut Graph,
    embeddings: Var,
    logits: Var,
    labels: &[usize],
    config: &TripletConfig,
) -> Result<LossTerms> {
    let triplet = batch_hard_triplet(g, embeddings, labels, config)?;
    let cross_entropy = softmax_cross_entropy(g, logits, labels)?;
    let total = g.add(cross_entropy, triplet)?;
    Ok(LossTerms {
        total,
        triplet,
        cross_entropy,
    })
}

/// A P×K batch of clip embeddings with identity labels and, optionally,
/// classifier logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub embeddings: Tensor,
    pub identities: Vec<usize>,
    pub logits: Option<Tensor>,
}

impl LabeledBatch {
    pub fn new(embeddings: Tensor, identities: Vec<usize>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != identities.len() {
            return Err(Error::invalid(format!(
                "embeddings {:?} do not match {} labels",
                embeddings.shape(),
                identities.len()
            )));
        }
        pk_structure(&identities)?;
        Ok(Self {
            embeddings,
            identities,
            logits: None,
        })
    }

    pub fn with_logits(mut self, logits: Tensor) -> Self {
        self.logits = Some(logits);
        self
    }

    pub fn triplet(&self, config: &TripletConfig) -> Result<f64> {
        let mut g = Graph::new();
        let e = g.constant(self.embeddings.clone());
        let l = batch_hard_triplet(&mut g, e, &self.identities, config)?;
        Ok(g.value(l).data()[0])
    }

    pub fn cross_entropy(&self) -> Result<f64> {
        let logits = self
            .logits
            .clone()
            .ok_or_else(|| Error::invalid("cross-entropy needs classifier logits"))?;
        let mut g = Graph::new();
        let z = g.constant(logits);
        let l = softmax_cross_entropy(&mut g, z, &self.identities)?;
        Ok(g.value(l).data()[0])
    }

    pub fn total(&self, config: &TripletConfig) -> Result<f64> {
        Ok(self.cross_entropy()? + self.triplet(config)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn pk_labels(p: usize, k: usize) -> Vec<usize> {
        (0..p).flat_map(|i| std::iter::repeat_n(i, k)).collect()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Enumerates every (anchor, positive, negative) triple and keeps the
    /// largest hinge per anchor.
    fn oracle(emb: &Tensor, labels: &[usize], cfg: &TripletConfig) -> f64 {
        let n = labels.len();
        let dist = |i: usize, j: usize| -> f64 {
            let sq: f64 = emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            sq.max(1e-16).sqrt()
        };
        let mut total = 0.0;
        for a in 0..n {
            let mut worst = f64::NEG_INFINITY;
            for p in (0..n).filter(|&p| labels[p] == labels[a]) {
                for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                    let h = ((dist(a, p) - dist(a, q)) + cfg.margin).max(0.0);
                    worst = worst.max(h);
                }
            }
            total += worst;
        }
        match cfg.reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / n as f64,
        }
    }

    #[test]
    fn identical_embeddings_pay_full_margin() {
        let batch = LabeledBatch::new(Tensor::full(&[4, 3], 0.7), pk_labels(2, 2)).unwrap();
        let cfg = TripletConfig {
            margin: 0.3,
            reduction: Reduction::Sum,
        };
        assert!((batch.triplet(&cfg).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn satisfied_margins_give_zero() {
        let emb = Tensor::new(vec![4, 1], vec![0.0, 0.1, 1.0, 1.2]).unwrap();
        let labels = vec![0, 0, 1, 1];
        let cfg = TripletConfig {
            margin: 0.5,
            reduction: Reduction::Sum,
        };
        let expected = oracle(&emb, &labels, &cfg);
        assert_eq!(expected, 0.0);
        let batch = LabeledBatch::new(emb, labels).unwrap();
        assert_eq!(batch.triplet(&cfg).unwrap(), expected);
    }

    #[test]
    fn single_identity_is_rejected() {
        assert!(LabeledBatch::new(Tensor::zeros(&[3, 2]), vec![1, 1, 1]).is_err());
        assert!(LabeledBatch::new(Tensor::zeros(&[3, 2]), vec![0, 0, 1]).is_err());
    }

    #[test]
    fn random_batches_match_enumeration_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (p, k, d) = (rng.random_range(2..=5), rng.random_range(1..=5), rng.random_range(1..=16));
            let emb = random(&mut rng, &[p * k, d]);
            let labels = pk_labels(p, k);
            for reduction in [Reduction::Sum, Reduction::Mean] {
                let cfg = TripletConfig { margin: 0.3, reduction };
                let batch = LabeledBatch::new(emb.clone(), labels.clone()).unwrap();
                assert_eq!(batch.triplet(&cfg).unwrap(), oracle(&emb, &labels, &cfg));
            }
        }
    }

    #[test]
    fn cross_entropy_limits() {
        let mut logits = vec![0.0; 4 * 3];
        for (i, l) in [0usize, 1, 2, 0].iter().enumerate() {
            logits[i * 3 + l] = 1000.0;
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![4, 3], logits).unwrap());
        let l = softmax_cross_entropy(&mut g, z, &[0, 1, 2, 0]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);

        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[6, 5], 0.4));
        let l = softmax_cross_entropy(&mut g, z, &[0, 1, 2, 3, 4, 0]).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (n, c) = (8, rng.random_range(2..10));
            let logits = random(&mut rng, &[n, c]).map(|v| v * 5.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let direct = -(0..n)
                .map(|i| {
                    let row = logits.row(i);
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    (row[labels[i]].exp() / z).ln()
                })
                .sum::<f64>()
                / n as f64;
            let mut g = Graph::new();
            let z = g.constant(logits);
            let l = softmax_cross_entropy(&mut g, z, &labels).unwrap();
            assert!((g.value(l).data()[0] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_logits_or_bad_label() {
        let batch = LabeledBatch::new(Tensor::zeros(&[4, 2]), pk_labels(2, 2)).unwrap();
        assert!(batch.cross_entropy().is_err());
        let bad = batch.clone().with_logits(Tensor::zeros(&[4, 1]));
        assert!(bad.cross_entropy().is_err());
    }

    #[test]
    fn total_is_sum_of_parts() {
        let uniform = LabeledBatch::new(Tensor::full(&[4, 2], 1.0), pk_labels(2, 2))
            .unwrap()
            .with_logits(Tensor::zeros(&[4, 2]));
        let cfg = TripletConfig {
            margin: 0.3,
            reduction: Reduction::Sum,
        };
        assert!((uniform.total(&cfg).unwrap() - (1.2 + 2f64.ln())).abs() < 1e-12);

        let separated = LabeledBatch::new(
            Tensor::new(vec![4, 1], vec![0.0, 0.0, 10.0, 10.0]).unwrap(),
            pk_labels(2, 2),
        )
        .unwrap()
        .with_logits(Tensor::zeros(&[4, 4]));
        assert!((separated.total(&cfg).unwrap() - 4f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = random(&mut rng, &[9, 4]);
        let logits = random(&mut rng, &[9, 3]);
        let b = LabeledBatch::new(emb, pk_labels(3, 3)).unwrap().with_logits(logits);
        let cfg = TripletConfig::default();
        let parts = b.triplet(&cfg).unwrap() + b.cross_entropy().unwrap();
        assert_eq!(b.total(&cfg).unwrap(), parts);
    }

    #[test]
    fn graph_total_matches_value_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = random(&mut rng, &[8, 5]);
        let logits = random(&mut rng, &[8, 4]);
        let labels = pk_labels(4, 2);
        let cfg = TripletConfig::default();
        let mut g = Graph::new();
        let e = g.constant(emb.clone());
        let z = g.constant(logits.clone());
        let terms = total_loss(&mut g, e, z, &labels, &cfg).unwrap();
        let batch = LabeledBatch::new(emb, labels).unwrap().with_logits(logits);
        assert_eq!(g.value(terms.triplet).data()[0], batch.triplet(&cfg).unwrap());
        assert_eq!(g.value(terms.cross_entropy).data()[0], batch.cross_entropy().unwrap());
    }

    #[test]
    fn total_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = pk_labels(4, 2);
        let cfg = TripletConfig::default();
        let mut checked = 0;
        while checked < 5 {
            let emb = random(&mut rng, &[8, 3]);
            let logits = random(&mut rng, &[8, 4]);
            if kink_margin(&emb, &labels, &cfg) < 1e-3 {
                continue;
            }
            let leaves = vec![("embeddings".to_string(), emb), ("logits".to_string(), logits)];
            let report = grad_check(&leaves, 1e-4, |g, v| {
                Ok(total_loss(g, v[0], v[1], &labels, &cfg)?.total)
            });
            assert!(report.passed(), "{report}");
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn loss_is_non_negative_and_zero_iff_margins_hold(
            seed in 0u64..5000,
            margin in 0.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = random(&mut rng, &[6, 2]).map(|v| v * 3.0);
            let labels = pk_labels(3, 2);
            let cfg = TripletConfig { margin, reduction: Reduction::Sum };
            let loss = LabeledBatch::new(emb.clone(), labels.clone()).unwrap().triplet(&cfg).unwrap();
            prop_assert!(loss >= 0.0);
            let mut g = Graph::new();
            let e = g.constant(emb);
            let d = g.pairwise_distance(e).unwrap();
            let (p, n) = hardest_pairs(g.value(d), &labels);
            let dd = g.value(d).data();
            let all_hold = p.iter().zip(&n).all(|(&pi, &ni)| dd[ni] - dd[pi] >= margin);
            prop_assert_eq!(loss == 0.0, all_hold);
        }

        #[test]
        fn rotation_invariant(seed in 0u64..5000, angle in 0.0f64..std::f64::consts::TAU) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = random(&mut rng, &[8, 2]);
            let (s, c) = angle.sin_cos();
            let rotated = Tensor::new(
                vec![8, 2],
                emb.rows().flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect(),
            ).unwrap();
            let labels = pk_labels(4, 2);
            let cfg = TripletConfig::default();
            let a = LabeledBatch::new(emb, labels.clone()).unwrap().triplet(&cfg).unwrap();
            let b = LabeledBatch::new(rotated, labels).unwrap().triplet(&cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn scaling_up_never_shrinks_violated_terms(seed in 0u64..5000, alpha in 1.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = random(&mut rng, &[6, 3]);
            let labels = pk_labels(3, 2);
            let pre_hinge = |e: &Tensor| -> Vec<f64> {
                let mut g = Graph::new();
                let v = g.constant(e.clone());
                let d = g.pairwise_distance(v).unwrap();
                let (p, n) = hardest_pairs(g.value(d), &labels);
                let dd = g.value(d).data();
                p.iter().zip(&n).map(|(&pi, &ni)| dd[pi] - dd[ni]).collect()
            };
            let before = pre_hinge(&emb);
            let after = pre_hinge(&emb.map(|v| v * alpha));
            for (b, a) in before.iter().zip(&after) {
                // A violated anchor (hardest positive farther than hardest
                // negative) only gets more violated under scaling.
                if *b > 0.0 {
                    prop_assert!(*a >= *b - 1e-12);
                }
            }
        }
    }
}

/// Smallest distance to a non-differentiable point of the batch-hard loss:
/// the hinge at zero and ties in the hardest positive/negative selection.
pub fn kink_margin(emb: &Tensor, labels: &[usize], cfg: &TripletConfig) -> f64 {
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let Ok(d) = g.pairwise_distance(e) else {
        return 0.0;
    };
    let dist = g.value(d).data();
    let n = labels.len();
    let mut margin = f64::INFINITY;
    for a in 0..n {
        let row = &dist[a * n..(a + 1) * n];
        let mut pos: Vec<f64> = (0..n).filter(|&j| labels[j] == labels[a]).map(|j| row[j]).collect();
        let mut neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[a]).map(|j| row[j]).collect();
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        if pos.len() >= 2 {
            margin = margin.min(pos[pos.len() - 1] - pos[pos.len() - 2]);
        }
        if neg.len() >= 2 {
            margin = margin.min(neg[1] - neg[0]);
        }
        let pre = pos[pos.len() - 1] - neg[0] + cfg.margin;
        margin = margin.min(pre.abs());
    }
    margin
}
