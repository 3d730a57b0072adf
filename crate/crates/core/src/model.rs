//! Frame projection, temporal head and identity classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::{Aggregator, AggregatorConfig, FeatureClip, FrameShape};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::retrieval::{video_embedding, Meta, VideoEmbedding};
use crate::sampling::{cut_clips, Tracklet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub head: AggregatorConfig,
    /// Trainable per-frame `C→C` linear map applied before the head, in
    /// place of the backbone's last layer.
    #[serde(default = "yes")]
    pub frame_projection: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(head: AggregatorConfig) -> Self {
        Self {
            head,
            frame_projection: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Affine {
    weight: usize,
    bias: usize,
}

/// Parameter layout and forward pass of the trainable model. Parameters
/// live in a separate [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    frame: FrameShape,
    num_classes: usize,
    projection: Option<Affine>,
    head: Aggregator,
    classifier: Affine,
}

impl Model {
    pub fn init<R: Rng>(
        config: ModelConfig,
        frame: FrameShape,
        num_classes: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("classifier needs at least one identity"));
        }
        let c = frame.channels;
        let projection = config.frame_projection.then(|| Affine {
            weight: params.push_uniform("proj.weight", &[c, c], 1.0 / (c as f64).sqrt(), rng),
            bias: params.push_zeros("proj.bias", &[c]),
        });
        let head = Aggregator::init(config.head, frame, params, rng)?;
        let d = head.output_dim();
        let classifier = Affine {
            weight: params.push_uniform(
                "classifier.weight",
                &[d, num_classes],
                1.0 / (d as f64).sqrt(),
                rng,
            ),
            bias: params.push_zeros("classifier.bias", &[num_classes]),
        };
        Ok(Self {
            config,
            frame,
            num_classes,
            projection,
            head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn frame(&self) -> FrameShape {
        self.frame
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.output_dim()
    }

    /// One clip `[T×w×h×C]` to its `[D_out]` embedding.
    pub fn encode(&self, g: &mut Graph, vars: &[Var], clip: Var) -> Result<Var> {
        let x = match self.projection {
            None => clip,
            Some(p) => {
                let shape = g.shape(clip).to_vec();
                let rows: usize = shape[..shape.len() - 1].iter().product();
                let flat = g.reshape(clip, &[rows, self.frame.channels])?;
                let mapped = g.affine(flat, vars[p.weight], vars[p.bias])?;
                g.reshape(mapped, &shape)?
            }
        };
        self.head.forward(g, vars, x)
    }

    /// Embeddings of `clips` stacked as `[N×D_out]`.
    pub fn embed_batch(&self, g: &mut Graph, vars: &[Var], clips: &[FeatureClip]) -> Result<Var> {
        let d = self.embedding_dim();
        let mut rows = Vec::with_capacity(clips.len());
        for clip in clips {
            let x = g.constant(clip.map_form());
            let e = self.encode(g, vars, x)?;
            rows.push(g.reshape(e, &[1, d])?);
        }
        g.concat(&rows, 0)
    }

    pub fn logits(&self, g: &mut Graph, vars: &[Var], embeddings: Var) -> Result<Var> {
        g.affine(embeddings, vars[self.classifier.weight], vars[self.classifier.bias])
    }

    /// Embedding of one clip with frozen parameters.
    pub fn embed(&self, params: &ParamSet, clip: &FeatureClip) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = params.bind_frozen(&mut g);
        let x = g.constant(clip.map_form());
        let e = self.encode(&mut g, &vars, x)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Mean of the clip embeddings of a tracklet cut into `t`-frame clips.
    /// With `drop_padded`, a padded trailing clip is skipped unless it is the
    /// only one.
    pub fn embed_tracklet(
        &self,
        params: &ParamSet,
        tracklet: &Tracklet,
        t: usize,
        drop_padded: bool,
    ) -> Result<VideoEmbedding> {
        let mut clips = cut_clips(tracklet, t)?;
        if drop_padded && clips.len() > 1 {
            clips.retain(|c| !c.padded);
        }
        let vectors = clips
            .iter()
            .map(|c| self.embed(params, c))
            .collect::<Result<Vec<_>>>()?;
        video_embedding(
            &vectors,
            Meta {
                identity: tracklet.identity,
                camera: tracklet.camera,
            },
        )
    }
}

/// Frozen-graph logits for a stacked embedding matrix.
pub fn classify(model: &Model, params: &ParamSet, embeddings: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind_frozen(&mut g);
    let e = g.constant(embeddings.clone());
    let z = model.logits(&mut g, &vars, e)?;
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::aggregators::PoolMode;

    fn avg() -> AggregatorConfig {
        AggregatorConfig::Pooling { mode: PoolMode::Avg }
    }

    #[test]
    fn parameter_layout() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::init(ModelConfig::new(avg()), FrameShape::vector(6), 5, &mut p, &mut rng).unwrap();
        assert_eq!(
            p.names(),
            ["proj.weight", "proj.bias", "classifier.weight", "classifier.bias"]
        );
        assert_eq!(p.get("classifier.weight").unwrap().shape(), &[6, 5]);
        assert_eq!(m.embedding_dim(), 6);
    }

    #[test]
    fn identity_projection_leaves_pooling_unchanged() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = FrameShape {
            width: 2,
            height: 1,
            channels: 3,
        };
        let m = Model::init(ModelConfig::new(avg()), frame, 2, &mut p, &mut rng).unwrap();
        *p.get_mut("proj.weight").unwrap() = Tensor::identity(3);
        let clip = FeatureClip::new(
            Tensor::new(vec![2, 2, 1, 3], (0..12).map(f64::from).collect()).unwrap(),
        )
        .unwrap();
        // Frame means: [1.5, 2.5, 3.5] and [7.5, 8.5, 9.5].
        assert_eq!(m.embed(&p, &clip).unwrap(), [4.5, 5.5, 6.5]);
    }

    #[test]
    fn tracklet_embedding_drops_padding_on_request() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            head: avg(),
            frame_projection: false,
        };
        let m = Model::init(cfg, FrameShape::vector(1), 2, &mut p, &mut rng).unwrap();
        let tr = Tracklet::new(0, 0, Tensor::new(vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 9.0]).unwrap()).unwrap();
        // Clips [1..4] and padded [9, 9, 9, 9].
        assert_eq!(m.embed_tracklet(&p, &tr, 4, false).unwrap().vector, [(2.5 + 9.0) / 2.0]);
        assert_eq!(m.embed_tracklet(&p, &tr, 4, true).unwrap().vector, [2.5]);
    }

    #[test]
    fn batch_rows_match_single_clip_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for head in AggregatorConfig::all(3, 4) {
            let mut p = ParamSet::new();
            let m = Model::init(ModelConfig::new(head), FrameShape::vector(5), 3, &mut p, &mut rng).unwrap();
            let clips: Vec<FeatureClip> = (0..3)
                .map(|i| FeatureClip::new(Tensor::full(&[4, 5], i as f64 * 0.3 - 0.2)).unwrap())
                .collect();
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let batch = m.embed_batch(&mut g, &vars, &clips).unwrap();
            let rows = g.value(batch).clone();
            for (i, c) in clips.iter().enumerate() {
                assert_eq!(rows.row(i), m.embed(&p, c).unwrap().as_slice(), "{}", head.label());
            }
            let logits = m.logits(&mut g, &vars, batch).unwrap();
            assert_eq!(g.shape(logits), &[3, 3]);
            assert_eq!(&classify(&m, &p, &rows).unwrap(), g.value(logits));
        }
    }
}
