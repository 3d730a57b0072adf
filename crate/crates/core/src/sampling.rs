//! Clip cutting and P×K batch sampling.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::{FeatureClip, FrameShape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Time-ordered frame features of one person seen by one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub identity: usize,
    pub camera: usize,
    /// `L×D` or `L×w×h×C`.
    pub frames: Tensor,
}

impl Tracklet {
    pub fn new(identity: usize, camera: usize, frames: Tensor) -> Result<Self> {
        if !(frames.rank() == 2 || frames.rank() == 4) {
            return Err(Error::invalid(format!(
                "tracklet frames must be L×D or L×w×h×C, got {:?}",
                frames.shape()
            )));
        }
        Ok(Self {
            identity,
            camera,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_shape(&self) -> FrameShape {
        let s = self.frames.shape();
        match s.len() {
            4 => FrameShape {
                width: s[1],
                height: s[2],
                channels: s[3],
            },
            _ => FrameShape::vector(s[1]),
        }
    }
}

/// Splits a tracklet into consecutive non-overlapping clips of `t` frames.
/// A trailing remainder is padded by repeating its last frame.
pub fn cut_clips(tracklet: &Tracklet, t: usize) -> Result<Vec<FeatureClip>> {
    if t == 0 {
        return Err(Error::invalid("clip length T must be at least 1"));
    }
    let len = tracklet.len();
    if len == 0 {
        return Err(Error::invalid("cannot cut clips from an empty tracklet"));
    }
    let frames = &tracklet.frames;
    let stride = frames.len() / len;
    let mut shape = frames.shape().to_vec();
    shape[0] = t;
    let mut clips = Vec::with_capacity(len.div_ceil(t));
    for start in (0..len).step_by(t) {
        let real = t.min(len - start);
        let mut data = frames.data()[start * stride..(start + real) * stride].to_vec();
        let last = data[(real - 1) * stride..].to_vec();
        for _ in real..t {
            data.extend_from_slice(&last);
        }
        clips.push(FeatureClip {
            frames: Tensor::new(shape.clone(), data)?,
            padded: real < t,
        });
    }
    Ok(clips)
}

pub const DEFAULT_P: usize = 4;
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_T: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_p() -> usize {
    DEFAULT_P
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_t() -> usize {
    DEFAULT_T
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            p: DEFAULT_P,
            k: DEFAULT_K,
            t: DEFAULT_T,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::config(format!("sampler P must be at least 2, got {}", self.p)));
        }
        if self.k == 0 || self.t == 0 {
            return Err(Error::config("sampler K and T must be at least 1"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// `P·K` clips with their identity labels, grouped by identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub clips: Vec<FeatureClip>,
    pub labels: Vec<usize>,
}

/// Draws P×K batches from a fixed pool of clips.
///
/// Batch `s` depends only on the seed and `s`, so a run resumed at step `s`
/// sees the same batches as an uninterrupted one.
#[derive(Clone, Debug)]
pub struct PkSampler {
    config: SamplerConfig,
    identities: Vec<usize>,
    clips: Vec<Vec<FeatureClip>>,
}

impl PkSampler {
    pub fn new(tracklets: &[Tracklet], config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let mut by_id: BTreeMap<usize, Vec<FeatureClip>> = BTreeMap::new();
        for tr in tracklets {
            by_id.entry(tr.identity).or_default().extend(cut_clips(tr, config.t)?);
        }
        if by_id.len() < config.p {
            return Err(Error::invalid(format!(
                "dataset has {} identities but P = {}",
                by_id.len(),
                config.p
            )));
        }
        let (identities, clips) = by_id.into_iter().unzip();
        Ok(Self {
            config,
            identities,
            clips,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Identity slots drawn at `step`, in batch order.
    fn draw(&self, step: u64) -> (Vec<usize>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        let picked = index::sample(&mut rng, self.identities.len(), self.config.p).into_vec();
        (picked, rng)
    }

    pub fn sample(&self, step: u64) -> ClipBatch {
        let k = self.config.k;
        let (picked, mut rng) = self.draw(step);
        let mut batch = ClipBatch {
            clips: Vec::with_capacity(self.config.batch_size()),
            labels: Vec::with_capacity(self.config.batch_size()),
        };
        for slot in picked {
            let pool = &self.clips[slot];
            let chosen: Vec<usize> = if pool.len() >= k {
                index::sample(&mut rng, pool.len(), k).into_vec()
            } else {
                (0..k).map(|_| rng.random_range(0..pool.len())).collect()
            };
            for c in chosen {
                batch.clips.push(pool[c].clone());
                batch.labels.push(self.identities[slot]);
            }
        }
        batch
    }
}

/// One P×K batch drawn with `config.seed`.
pub fn sample_batch(tracklets: &[Tracklet], config: &SamplerConfig) -> Result<ClipBatch> {
    Ok(PkSampler::new(tracklets, *config)?.sample(0))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::losses::pk_structure;

    /// Frame `i` of the tracklet holds the value `i + 1` in every channel.
    fn numbered(identity: usize, len: usize, dim: usize) -> Tracklet {
        let data = (0..len).flat_map(|i| std::iter::repeat_n((i + 1) as f64, dim)).collect();
        Tracklet::new(identity, 0, Tensor::new(vec![len, dim], data).unwrap()).unwrap()
    }

    fn frame_ids(clip: &FeatureClip) -> Vec<f64> {
        clip.frames.rows().map(|r| r[0]).collect()
    }

    #[test]
    fn cut_with_padding() {
        let clips = cut_clips(&numbered(0, 9, 2), 4).unwrap();
        assert_eq!(clips.len(), 3);
        assert_eq!(frame_ids(&clips[0]), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(frame_ids(&clips[1]), [5.0, 6.0, 7.0, 8.0]);
        assert_eq!(frame_ids(&clips[2]), [9.0; 4]);
        assert_eq!(clips.iter().map(|c| c.padded).collect::<Vec<_>>(), [false, false, true]);
    }

    #[test]
    fn exact_and_single_frame_cuts() {
        let clips = cut_clips(&numbered(0, 4, 1), 4).unwrap();
        assert_eq!(clips.len(), 1);
        assert!(!clips[0].padded);
        let singles = cut_clips(&numbered(0, 5, 3), 1).unwrap();
        assert_eq!(singles.len(), 5);
        assert!(singles.iter().all(|c| c.len() == 1 && !c.padded));
        assert!(cut_clips(&numbered(0, 5, 3), 0).is_err());
    }

    #[test]
    fn map_form_tracklets_keep_their_layout() {
        let tr = Tracklet::new(3, 1, Tensor::zeros(&[5, 2, 2, 3])).unwrap();
        let clips = cut_clips(&tr, 2).unwrap();
        assert_eq!(clips[0].frames.shape(), &[2, 2, 2, 3]);
        assert!(clips[2].padded);
    }

    #[test]
    fn batch_structure() {
        let data: Vec<Tracklet> = (0..6).map(|i| numbered(i, 12, 2)).collect();
        let cfg = SamplerConfig {
            p: 4,
            k: 2,
            t: 4,
            seed: 1,
        };
        let b = sample_batch(&data, &cfg).unwrap();
        assert_eq!(b.clips.len(), 8);
        assert_eq!(pk_structure(&b.labels).unwrap(), (4, 2));
        assert_eq!(b, sample_batch(&data, &cfg).unwrap());
    }

    #[test]
    fn short_identity_is_sampled_with_replacement() {
        let mut data = vec![numbered(0, 4, 1)];
        data.push(numbered(1, 40, 1));
        let cfg = SamplerConfig {
            p: 2,
            k: 4,
            t: 4,
            seed: 9,
        };
        let b = sample_batch(&data, &cfg).unwrap();
        let only: Vec<&FeatureClip> =
            b.clips.iter().zip(&b.labels).filter(|(_, &l)| l == 0).map(|(c, _)| c).collect();
        assert_eq!(only.len(), 4);
        assert!(only.iter().all(|c| *c == only[0]));
        // Enough clips: drawn without replacement.
        let other: Vec<Vec<f64>> =
            b.clips.iter().zip(&b.labels).filter(|(_, &l)| l == 1).map(|(c, _)| frame_ids(c)).collect();
        for i in 0..other.len() {
            for j in i + 1..other.len() {
                assert_ne!(other[i], other[j]);
            }
        }
    }

    #[test]
    fn too_few_identities() {
        let data: Vec<Tracklet> = (0..3).map(|i| numbered(i, 4, 1)).collect();
        assert!(sample_batch(&data, &SamplerConfig::default()).is_err());
    }

    #[test]
    fn identity_frequencies_are_uniform() {
        let n = 10;
        let data: Vec<Tracklet> = (0..n).map(|i| numbered(i, 8, 1)).collect();
        let cfg = SamplerConfig {
            p: 4,
            k: 1,
            t: 4,
            seed: 2,
        };
        let sampler = PkSampler::new(&data, cfg).unwrap();
        let batches = 10_000u64;
        let mut counts = vec![0f64; n];
        for s in 0..batches {
            for l in sampler.sample(s).labels {
                counts[l] += 1.0;
            }
        }
        let q = cfg.p as f64 / n as f64;
        let mean = batches as f64 * q;
        let sd = (batches as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c - mean).abs() < 5.0 * sd, "count {c} vs {mean} ± {sd}");
        }
    }

    proptest! {
        #[test]
        fn cutting_preserves_frame_order(len in 1usize..40, t in 1usize..9) {
            let clips = cut_clips(&numbered(0, len, 1), t).unwrap();
            let mut seen = Vec::new();
            for c in &clips {
                let ids = frame_ids(c);
                let real = if c.padded { len % t } else { t };
                seen.extend_from_slice(&ids[..real]);
                prop_assert!(ids[real..].iter().all(|&v| v == ids[real - 1]));
            }
            prop_assert_eq!(seen, (1..=len).map(|i| i as f64).collect::<Vec<_>>());
        }

        #[test]
        fn every_batch_is_pk(seed in 0u64..1000, step in 0u64..1000, p in 2usize..6, k in 1usize..5) {
            let data: Vec<Tracklet> = (0..7).map(|i| numbered(i, 3 + i, 1)).collect();
            let cfg = SamplerConfig { p, k, t: 2, seed };
            let b = PkSampler::new(&data, cfg).unwrap().sample(step);
            prop_assert_eq!(pk_structure(&b.labels).unwrap(), (p, k));
        }
    }
}
