use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Layout};
use crate::error::{Error, Result};
use crate::sampling::Tracklet;
use crate::tensor::Tensor;

/// Parameters of the synthetic tracklet generator.
///
/// Each identity gets a centroid `μ ~ N(0, σ_between² I)` and each camera an
/// offset `c ~ N(0, σ_camera² I)`. Every tracklet drifts linearly along its
/// own random unit direction `u`; frame `t` of a tracklet is
/// `μ + c + drift_rate·σ_within·t·u + N(0, σ_within² I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Total identities; the first half (rounded up) trains, the rest test.
    #[serde(default = "d_identities")]
    pub num_identities: usize,
    #[serde(default = "d_tracklets")]
    pub tracklets_per_identity: usize,
    #[serde(default = "d_frames")]
    pub frames_per_tracklet: usize,
    #[serde(default = "d_layout")]
    pub layout: Layout,
    #[serde(default = "d_cameras")]
    pub num_cameras: usize,
    #[serde(default = "d_within")]
    pub sigma_within: f64,
    #[serde(default = "d_between")]
    pub sigma_between: f64,
    /// Per-frame drift in units of `sigma_within`.
    #[serde(default = "d_drift")]
    pub drift_rate: f64,
    #[serde(default = "d_camera_shift")]
    pub camera_shift: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_identities() -> usize {
    64
}
fn d_tracklets() -> usize {
    4
}
fn d_frames() -> usize {
    16
}
fn d_layout() -> Layout {
    Layout::Vector { dim: 64 }
}
fn d_cameras() -> usize {
    2
}
fn d_within() -> f64 {
    0.1
}
fn d_between() -> f64 {
    1.0
}
fn d_drift() -> f64 {
    0.05
}
fn d_camera_shift() -> f64 {
    1.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: d_identities(),
            tracklets_per_identity: d_tracklets(),
            frames_per_tracklet: d_frames(),
            layout: d_layout(),
            num_cameras: d_cameras(),
            sigma_within: d_within(),
            sigma_between: d_between(),
            drift_rate: d_drift(),
            camera_shift: d_camera_shift(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let fail = |m: String| Err(Error::config(m));
        if !(self.sigma_between > 0.0 && self.sigma_between.is_finite()) {
            return fail(format!("sigma_between must be > 0, got {}", self.sigma_between));
        }
        if !(self.sigma_within >= 0.0 && self.sigma_within.is_finite()) {
            return fail(format!("sigma_within must be >= 0, got {}", self.sigma_within));
        }
        if !(self.camera_shift >= 0.0 && self.camera_shift.is_finite()) {
            return fail(format!("camera_shift must be >= 0, got {}", self.camera_shift));
        }
        if !self.drift_rate.is_finite() {
            return fail("drift_rate must be finite".into());
        }
        if self.num_cameras < 2 {
            return fail(format!(
                "cross-camera evaluation needs at least 2 cameras, got {}",
                self.num_cameras
            ));
        }
        if self.tracklets_per_identity < self.num_cameras {
            return fail(format!(
                "tracklets_per_identity ({}) must cover all {} cameras",
                self.tracklets_per_identity, self.num_cameras
            ));
        }
        if self.num_identities < 2 {
            return fail("need at least 2 identities (one train, one test)".into());
        }
        if self.frames_per_tracklet == 0 {
            return fail("frames_per_tracklet must be at least 1".into());
        }
        Ok(())
    }

    pub fn num_train_identities(&self) -> usize {
        self.num_identities.div_ceil(2)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates `(train, test)`. Tracklet `j` of an identity is seen by camera
/// `j mod num_cameras`; in the test split the first tracklet per
/// (identity, camera) is a query.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let frame = config.layout.frame_shape();
    let c = frame.channels;
    let cells = frame.width * frame.height;
    let noise = Normal::new(0.0, config.sigma_within).expect("validated sigma");

    let cameras: Vec<Vec<f64>> = (0..config.num_cameras)
        .map(|_| gaussian(&mut rng, c, config.camera_shift))
        .collect();
    let n_train = config.num_train_identities();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut queries = Vec::new();
    for id in 0..config.num_identities {
        let centroid = gaussian(&mut rng, c, config.sigma_between);
        for j in 0..config.tracklets_per_identity {
            let cam = j % config.num_cameras;
            let dir = unit(&mut rng, c);
            let len = config.frames_per_tracklet;
            let mut data = Vec::with_capacity(len * cells * c);
            for t in 0..len {
                let step = config.drift_rate * config.sigma_within * t as f64;
                for _ in 0..cells {
                    for k in 0..c {
                        let base = centroid[k] + cameras[cam][k] + step * dir[k];
                        data.push(base + noise.sample(&mut rng));
                    }
                }
            }
            let frames = Tensor::new(config.layout.tracklet_shape(len), data)?;
            if id < n_train {
                train.push(Tracklet::new(id, cam, frames)?);
            } else {
                if j < config.num_cameras {
                    queries.push(test.len());
                }
                test.push(Tracklet::new(id - n_train, cam, frames)?);
            }
        }
    }
    Ok((
        Dataset {
            layout: config.layout,
            tracklets: train,
            queries: Vec::new(),
            identity_ids: (0..n_train as u64).collect(),
        },
        Dataset {
            layout: config.layout,
            tracklets: test,
            queries,
            identity_ids: (n_train as u64..config.num_identities as u64).collect(),
        },
    ))
}
