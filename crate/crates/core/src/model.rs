//! The full detector: backbone, post-backbone encoder and detection head.

use serde::{Deserialize, Serialize};
use vit_tad_tensor::{BoundParams, Graph, ParamStore, Var};

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{Segment, VideoDetection};
use crate::head::{
    assign_targets, compute_loss, decode, nms, pyramid_geometry, DecodeParams, Detection, FrameSpan, Head,
    LevelOutput, LevelPrediction, LocationTarget, LossTerms,
};
use crate::post_backbone::{spatial_pool, TemporalEncoder};
use crate::rng::named_rng;
use crate::synth::Sample;
use crate::video::VideoClip;

/// Post-processing thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub score_thresh: f64,
    pub topk: usize,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            topk: 100,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VitTad {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub post: TemporalEncoder,
    pub head: Head,
}

impl VitTad {
    /// Registers all parameters in `store`. Each component draws from its own
    /// named stream of `seed`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, cfg, seed)?;
        let post = TemporalEncoder::new(
            store,
            &mut named_rng(seed, "post"),
            "post",
            cfg.post_layers,
            cfg.embed_dim,
            cfg.heads,
        )?;
        let head = Head::new(
            store,
            &mut named_rng(seed, "head"),
            cfg.embed_dim,
            cfg.pyramid_levels,
            cfg.num_classes,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            post,
            head,
        })
    }

    pub fn forward<'g>(&self, graph: &'g Graph, clip: &VideoClip, p: &BoundParams<'g>) -> Result<Vec<LevelOutput<'g>>> {
        let grid = self.backbone.forward(graph, clip, p)?;
        let seq = self.post.forward(spatial_pool(grid)?, p)?;
        Ok(self.head.forward(seq, self.cfg.temporal_stride(), p)?)
    }

    /// Ground truth converted to the frame axis of a clip starting at `origin_s`.
    pub fn frame_spans(&self, segments: &[Segment], origin_s: f64) -> Vec<FrameSpan> {
        segments
            .iter()
            .map(|s| FrameSpan {
                start: (s.start_s - origin_s) * self.cfg.fps,
                end: (s.end_s - origin_s) * self.cfg.fps,
                class_id: s.class_id,
            })
            .collect()
    }

    pub fn targets(&self, segments: &[Segment], origin_s: f64) -> Result<Vec<Vec<LocationTarget>>> {
        for s in segments {
            if s.class_id >= self.cfg.num_classes {
                return Err(Error::Config(format!(
                    "label {} outside 0..{}",
                    s.class_id, self.cfg.num_classes
                )));
            }
        }
        let g = self.cfg.geometry();
        let geom = pyramid_geometry(g.tokens_t, self.cfg.temporal_stride(), self.cfg.pyramid_levels)?;
        Ok(assign_targets(&self.frame_spans(segments, origin_s), &geom))
    }

    /// Training loss of one clip on `graph`.
    pub fn loss<'g>(&self, graph: &'g Graph, sample: &Sample, p: &BoundParams<'g>) -> Result<LossTerms<'g>> {
        let outputs = self.forward(graph, &sample.clip, p)?;
        let targets = self.targets(&sample.segments, 0.0)?;
        compute_loss(graph, &outputs, &targets)
    }

    /// Head outputs for a clip, without gradient tracking.
    pub fn predict_levels(&self, store: &ParamStore, clip: &VideoClip) -> Result<Vec<LevelPrediction>> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        Ok(self.forward(&g, clip, &p)?.iter().map(LevelPrediction::from).collect())
    }

    /// Decoded and suppressed detections for a clip starting at `origin_s`.
    pub fn detect(
        &self,
        store: &ParamStore,
        clip: &VideoClip,
        origin_s: f64,
        dc: &DetectConfig,
    ) -> Result<Vec<Detection>> {
        let levels = self.predict_levels(store, clip)?;
        let raw = decode(
            &levels,
            &DecodeParams {
                score_thresh: dc.score_thresh,
                topk: dc.topk,
                fps: self.cfg.fps,
                clip_origin_s: origin_s,
                clip_frames: Some(clip.frames as f64),
            },
        );
        Ok(nms(&raw, dc.nms_iou, true))
    }

    pub fn detect_samples(&self, store: &ParamStore, samples: &[Sample], dc: &DetectConfig) -> Result<Vec<VideoDetection>> {
        let mut out = Vec::new();
        for s in samples {
            for det in self.detect(store, &s.clip, 0.0, dc)? {
                out.push(VideoDetection {
                    video_id: s.video_id.clone(),
                    det,
                });
            }
        }
        Ok(out)
    }
}

/// Mean loss over a batch on one graph, for gradient checks and training.
pub fn batch_loss<'g>(
    model: &VitTad,
    graph: &'g Graph,
    samples: &[&Sample],
    p: &BoundParams<'g>,
) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for s in samples {
        let l = model.loss(graph, s, p)?.total;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok(total.scale(1.0 / samples.len() as f64)?)
}
