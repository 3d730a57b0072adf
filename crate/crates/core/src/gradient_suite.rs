//! Finite-difference checks over every head configuration and both losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::{Aggregator, AggregatorConfig, FrameShape, PoolMode};
use crate::losses::{batch_hard_triplet, kink_margin, softmax_cross_entropy, TripletConfig};
use crate::params::ParamSet;
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};

pub const DEFAULT_SEEDS: usize = 20;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Inputs closer than this to a non-differentiable point are resampled.
const KINK_GAP: f64 = 1e-3;

const FRAME: FrameShape = FrameShape {
    width: 2,
    height: 2,
    channels: 3,
};
const CLIP_LEN: usize = 4;
const ATTENTION_CHANNELS: usize = 3;
const HIDDEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub seeds: usize,
    pub passed: usize,
    pub worst_error: f64,
    /// First failure message, if any seed failed.
    pub failure: Option<String>,
}

impl SuiteRow {
    pub fn ok(&self) -> bool {
        self.passed == self.seeds
    }
}

/// Row names in suite order: the ten heads, then `triplet` and
/// `cross_entropy`.
pub fn row_names() -> Vec<String> {
    let mut names: Vec<String> = heads().iter().map(AggregatorConfig::label).collect();
    names.push("triplet".into());
    names.push("cross_entropy".into());
    names
}

fn heads() -> Vec<AggregatorConfig> {
    AggregatorConfig::all(ATTENTION_CHANNELS, HIDDEN)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("positive shape")
}

/// Smallest gap between the two largest values over time, per channel of
/// the spatially averaged clip.
fn max_pool_gap(clip: &Tensor) -> f64 {
    let area = FRAME.width * FRAME.height;
    let c = FRAME.channels;
    let mut gap = f64::INFINITY;
    for ch in 0..c {
        let mut vals: Vec<f64> = (0..CLIP_LEN)
            .map(|t| (0..area).map(|p| clip.data()[(t * area + p) * c + ch]).sum::<f64>() / area as f64)
            .collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        gap = gap.min(vals[0] - vals[1]);
    }
    gap
}

/// Gradient check of one head on one seed. Parameters and the clip are all
/// leaves; the scalar objective is `Σ r ⊙ head(clip)` for a random `r`.
pub fn check_head(config: AggregatorConfig, seed: u64, tolerance: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let head = Aggregator::init(config, FRAME, &mut params, &mut rng).expect("suite configs are valid");
    let shape = [CLIP_LEN, FRAME.width, FRAME.height, FRAME.channels];
    let mut clip = uniform(&mut rng, &shape);
    if matches!(config, AggregatorConfig::Pooling { mode: PoolMode::Max }) {
        while max_pool_gap(&clip) < KINK_GAP {
            clip = uniform(&mut rng, &shape);
        }
    }
    let probe = uniform(&mut rng, &[head.output_dim()]);
    let mut leaves: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    leaves.push(("clip".into(), clip));
    let n = params.len();
    grad_check(&leaves, tolerance, |g: &mut Graph, v: &[Var]| {
        let out = head.forward(g, &v[..n], v[n])?;
        let r = g.constant(probe.clone());
        let weighted = g.mul(out, r)?;
        g.sum_all(weighted)
    })
}

const P: usize = 3;
const K: usize = 2;
const EMBED: usize = 4;
const CLASSES: usize = 5;

fn labels() -> Vec<usize> {
    (0..P).flat_map(|i| std::iter::repeat_n(i, K)).collect()
}

pub fn check_triplet(seed: u64, tolerance: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = labels();
    let cfg = TripletConfig::default();
    let mut emb = uniform(&mut rng, &[P * K, EMBED]);
    while kink_margin(&emb, &labels, &cfg) < KINK_GAP {
        emb = uniform(&mut rng, &[P * K, EMBED]);
    }
    grad_check(&[("embeddings".into(), emb)], tolerance, |g, v| {
        batch_hard_triplet(g, v[0], &labels, &cfg)
    })
}

pub fn check_cross_entropy(seed: u64, tolerance: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&mut rng, &[P * K, CLASSES]).map(|v| 3.0 * v);
    let labels: Vec<usize> = labels().iter().map(|&l| l % CLASSES).collect();
    grad_check(&[("logits".into(), logits)], tolerance, |g, v| {
        softmax_cross_entropy(g, v[0], &labels)
    })
}

/// Runs every row whose name is in `only` (all rows when `None`) over seeds
/// `0..seeds`.
pub fn run_suite(only: Option<&[String]>, seeds: usize, tolerance: f64) -> Vec<SuiteRow> {
    let wanted = |name: &str| only.is_none_or(|o| o.iter().any(|n| n == name));
    let mut checks: Vec<(String, Box<dyn Fn(u64) -> GradCheckReport>)> = Vec::new();
    for h in heads() {
        checks.push((h.label(), Box::new(move |s| check_head(h, s, tolerance))));
    }
    checks.push(("triplet".into(), Box::new(move |s| check_triplet(s, tolerance))));
    checks.push(("cross_entropy".into(), Box::new(move |s| check_cross_entropy(s, tolerance))));
    checks
        .into_iter()
        .filter(|(name, _)| wanted(name))
        .map(|(name, check)| {
            let mut row = SuiteRow {
                name,
                seeds,
                passed: 0,
                worst_error: 0.0,
                failure: None,
            };
            for seed in 0..seeds as u64 {
                let report = check(seed);
                row.worst_error = row.worst_error.max(report.worst());
                if report.passed() {
                    row.passed += 1;
                } else if row.failure.is_none() {
                    row.failure = Some(match &report.failure {
                        Some(msg) => format!("seed {seed}: {msg}"),
                        None => format!("seed {seed}: max relative error {:.3e}", report.worst()),
                    });
                }
            }
            row
        })
        .collect()
}
