//! One-stage anchor-free detection head over a temporal feature pyramid.
//!
//! Every pyramid location `t` on level `l` sits at frame `t·stride_l` and
//! predicts per-class logits plus two positive distances to the action start
//! and end. Distances are produced in units of `stride_l` and converted to
//! frames when decoding.

use rand::Rng;
use vit_tad_tensor::{
    sigmoid, softplus, BoundParams, CustomOp, Graph, InitScheme, ParamId, ParamStore, Tensor, Var,
};

use crate::error::{Error, Result};
use crate::eval::overlap;
use crate::layers::Linear;
use crate::propagation::conv_init;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Prior foreground probability encoded in the initial classification bias.
pub const PRIOR_PROB: f64 = 0.01;
pub const TOWER_DEPTH: usize = 2;
pub const OUT_STD: f64 = 0.01;

/// A ground-truth action on the frame axis of one clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSpan {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

/// Shape of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGeom {
    pub len: usize,
    /// Frames between adjacent locations.
    pub stride: usize,
}

/// Level lengths halve (rounding up) from `tokens_t`; strides double.
pub fn pyramid_geometry(tokens_t: usize, temporal_stride: usize, levels: usize) -> Result<Vec<LevelGeom>> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    if tokens_t < 1 << (levels - 1) {
        return Err(Error::Config(format!("T'={tokens_t} cannot support {levels} pyramid levels")));
    }
    let mut len = tokens_t;
    Ok((0..levels)
        .map(|l| {
            let g = LevelGeom {
                len,
                stride: temporal_stride << l,
            };
            len = len.div_ceil(2);
            g
        })
        .collect())
}

/// Range of `max(d_start, d_end)` in frames handled by `level`:
/// `(lo, hi]`, with level 0 also taking 0 and the top level unbounded.
pub fn scale_range(level: usize, levels: usize) -> (f64, f64) {
    let lo = if level == 0 { f64::NEG_INFINITY } else { (1u64 << (level + 2)) as f64 };
    let hi = if level + 1 == levels { f64::INFINITY } else { (1u64 << (level + 3)) as f64 };
    (lo, hi)
}

/// Assignment of one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocationTarget {
    Background,
    Foreground {
        class_id: usize,
        /// Frames from the location to the segment start.
        d_start: f64,
        /// Frames from the location to the segment end.
        d_end: f64,
    },
}

/// A location at frame `pos` is foreground for `g` iff `g.start ≤ pos < g.end`
/// and `max(d_start, d_end)` is in its level's scale range. Among several
/// matching segments the shortest wins (then the earliest listed).
pub fn assign_targets(gt: &[FrameSpan], geometry: &[LevelGeom]) -> Vec<Vec<LocationTarget>> {
    let levels = geometry.len();
    geometry
        .iter()
        .enumerate()
        .map(|(l, lg)| {
            let (lo, hi) = scale_range(l, levels);
            (0..lg.len)
                .map(|t| {
                    let pos = (t * lg.stride) as f64;
                    let mut best: Option<&FrameSpan> = None;
                    for g in gt {
                        let (ds, de) = (pos - g.start, g.end - pos);
                        let reach = ds.max(de);
                        if ds >= 0.0 && de > 0.0 && reach > lo && reach <= hi {
                            if best.is_none_or(|b| g.end - g.start < b.end - b.start) {
                                best = Some(g);
                            }
                        }
                    }
                    match best {
                        Some(g) => LocationTarget::Foreground {
                            class_id: g.class_id,
                            d_start: pos - g.start,
                            d_end: g.end - pos,
                        },
                        None => LocationTarget::Background,
                    }
                })
                .collect()
        })
        .collect()
}

/// A conv layer over the temporal axis of `[T_l, 1, 1, C]`.
#[derive(Debug, Clone, Copy)]
pub struct TemporalConv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl TemporalConv {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: (usize, usize),
        stride: usize,
        w_init: InitScheme,
        b_init: InitScheme,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(&format!("{name}.w"), &[3, 1, 1, dims.0, dims.1], w_init, rng)?,
            b: store.add(&format!("{name}.b"), &[dims.1], b_init, rng)?,
            stride,
        })
    }

    /// `x: [T, C_in]` to `[ceil(T/stride), C_out]`.
    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let y = x
            .reshape(&[s[0], 1, 1, s[1]])?
            .conv3d(p.var(self.w), Some(p.var(self.b)), [self.stride, 1, 1], [1, 0, 0])?;
        let ys = y.shape();
        Ok(y.reshape(&[ys[0], ys[3]])?)
    }
}

/// Raw head output for one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput<'g> {
    /// `[T_l, K]`.
    pub logits: Var<'g>,
    /// `[T_l, 2]`, positive, in units of `stride`.
    pub offsets: Var<'g>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub proj: Linear,
    pub downsample: Vec<TemporalConv>,
    pub cls_tower: Vec<TemporalConv>,
    pub cls_out: TemporalConv,
    pub reg_tower: Vec<TemporalConv>,
    pub reg_out: TemporalConv,
    pub num_classes: usize,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dim: usize,
        levels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let zeros = InitScheme::Zeros;
        let proj = Linear::new(store, rng, "head.pyramid.proj", (dim, dim), true, crate::layers::trunc_normal())?;
        let downsample = (1..levels)
            .map(|l| TemporalConv::new(store, rng, &format!("head.pyramid.down{l}"), (dim, dim), 2, conv_init(3 * dim), zeros))
            .collect::<Result<Vec<_>>>()?;
        let mut tower = |branch: &str, rng: &mut _| {
            (0..TOWER_DEPTH)
                .map(|i| {
                    TemporalConv::new(store, rng, &format!("head.{branch}_tower.conv{i}"), (dim, dim), 1, conv_init(3 * dim), zeros)
                })
                .collect::<Result<Vec<_>>>()
        };
        let cls_tower = tower("cls", rng)?;
        let reg_tower = tower("reg", rng)?;
        let out = InitScheme::TruncatedNormal { std: OUT_STD };
        let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let cls_out = TemporalConv::new(store, rng, "head.cls_out", (dim, num_classes), 1, out, InitScheme::Constant(prior))?;
        let reg_out = TemporalConv::new(store, rng, "head.reg_out", (dim, 2), 1, out, zeros)?;
        Ok(Self {
            proj,
            downsample,
            cls_tower,
            cls_out,
            reg_tower,
            reg_out,
            num_classes,
        })
    }

    pub fn levels(&self) -> usize {
        self.downsample.len() + 1
    }

    /// Level 0 is a linear projection of `seq: [T', C]`; each further level is
    /// a stride-2 temporal conv of the previous one.
    pub fn build_pyramid<'g>(&self, seq: Var<'g>, p: &BoundParams<'g>) -> Result<Vec<Var<'g>>> {
        let mut levels = vec![self.proj.forward(seq, p)?];
        for conv in &self.downsample {
            let prev = *levels.last().expect("non-empty pyramid");
            levels.push(conv.forward(prev, p)?);
        }
        Ok(levels)
    }

    /// Shared towers applied to every level.
    pub fn head_forward<'g>(
        &self,
        pyramid: &[Var<'g>],
        temporal_stride: usize,
        p: &BoundParams<'g>,
    ) -> Result<Vec<LevelOutput<'g>>> {
        let tower = |x: Var<'g>, convs: &[TemporalConv]| -> Result<Var<'g>> {
            convs.iter().try_fold(x, |h, c| Ok(c.forward(h, p)?.gelu()?))
        };
        pyramid
            .iter()
            .enumerate()
            .map(|(l, &x)| {
                let logits = self.cls_out.forward(tower(x, &self.cls_tower)?, p)?;
                let offsets = self.reg_out.forward(tower(x, &self.reg_tower)?, p)?.softplus()?;
                Ok(LevelOutput {
                    logits,
                    offsets,
                    stride: temporal_stride << l,
                })
            })
            .collect()
    }

    pub fn forward<'g>(&self, seq: Var<'g>, temporal_stride: usize, p: &BoundParams<'g>) -> Result<Vec<LevelOutput<'g>>> {
        let pyramid = self.build_pyramid(seq, p)?;
        self.head_forward(&pyramid, temporal_stride, p)
    }
}

/// Sigmoid focal loss of one logit against a binary target.
pub fn focal_term(x: f64, positive: bool) -> f64 {
    let p = sigmoid(x);
    if positive {
        FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * softplus(-x)
    } else {
        (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * softplus(x)
    }
}

/// Derivative of [`focal_term`] with respect to the logit.
pub fn focal_grad(x: f64, positive: bool) -> f64 {
    let p = sigmoid(x);
    let g = FOCAL_GAMMA;
    if positive {
        // d/dx [-(1-p)^g log p]
        FOCAL_ALPHA * (g * (1.0 - p).powf(g) * p * (-softplus(-x)) - (1.0 - p).powf(g + 1.0))
    } else {
        // d/dx [-p^g log(1-p)]
        (1.0 - FOCAL_ALPHA) * (p.powf(g + 1.0) + g * p.powf(g) * (1.0 - p) * softplus(x))
    }
}

/// `1 − tIoU` of two segments sharing an anchor point, given as distances
/// `(d_start, d_end)` from it.
pub fn anchored_iou_loss(pred: [f64; 2], target: [f64; 2]) -> f64 {
    let inter = pred[0].min(target[0]) + pred[1].min(target[1]);
    let union = pred[0] + pred[1] + target[0] + target[1] - inter;
    1.0 - inter / union
}

fn anchored_iou_grad(pred: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    let inter = pred[0].min(target[0]) + pred[1].min(target[1]);
    let union = pred[0] + pred[1] + target[0] + target[1] - inter;
    let mut g = [0.0; 2];
    for i in 0..2 {
        let di = if pred[i] < target[i] { 1.0 } else { 0.0 };
        let du = 1.0 - di;
        g[i] = -(di * union - inter * du) / (union * union);
    }
    g
}

/// Focal loss summed over one level's locations and classes, divided by `norm`.
struct FocalLoss {
    /// Per-location class, `None` for background.
    labels: Vec<Option<usize>>,
    classes: usize,
    norm: f64,
}

impl FocalLoss {
    fn value(&self, logits: &Tensor) -> f64 {
        self.fold(logits, |x, pos| focal_term(x, pos)).iter().sum::<f64>() / self.norm
    }

    fn fold(&self, logits: &Tensor, f: impl Fn(f64, bool) -> f64) -> Vec<f64> {
        logits
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, self.labels[i / self.classes] == Some(i % self.classes)))
            .collect()
    }
}

impl CustomOp for FocalLoss {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let logits = &inputs[0];
        let g = grad.item() / self.norm;
        let data = self.fold(logits, |x, pos| g * focal_grad(x, pos));
        vec![Some(Tensor::new(logits.shape(), data).expect("finite focal gradient"))]
    }
}

/// Sum of `1 − tIoU` over foreground locations of one level, divided by `norm`.
struct IouLoss {
    /// `(location, target offsets in stride units)`.
    targets: Vec<(usize, [f64; 2])>,
    norm: f64,
}

impl IouLoss {
    fn pred(offsets: &Tensor, loc: usize) -> [f64; 2] {
        [offsets.data()[2 * loc], offsets.data()[2 * loc + 1]]
    }

    fn value(&self, offsets: &Tensor) -> f64 {
        self.targets
            .iter()
            .map(|&(loc, t)| anchored_iou_loss(Self::pred(offsets, loc), t))
            .sum::<f64>()
            / self.norm
    }
}

impl CustomOp for IouLoss {
    fn name(&self) -> &'static str {
        "iou_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let offsets = &inputs[0];
        let g = grad.item() / self.norm;
        let mut data = vec![0.0; offsets.numel()];
        for &(loc, t) in &self.targets {
            let d = anchored_iou_grad(Self::pred(offsets, loc), t);
            data[2 * loc] += g * d[0];
            data[2 * loc + 1] += g * d[1];
        }
        vec![Some(Tensor::new(offsets.shape(), data).expect("finite iou gradient"))]
    }
}

/// Loss terms of one clip.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub cls: f64,
    pub reg: f64,
    pub num_fg: usize,
}

/// Focal classification loss over every location (normalized by
/// `max(num_fg, 1)`) plus the mean `1 − tIoU` over foreground locations.
pub fn compute_loss<'g>(
    graph: &'g Graph,
    outputs: &[LevelOutput<'g>],
    targets: &[Vec<LocationTarget>],
) -> Result<LossTerms<'g>> {
    if outputs.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} prediction levels but {} target levels",
            outputs.len(),
            targets.len()
        )));
    }
    let num_fg = targets
        .iter()
        .flatten()
        .filter(|t| matches!(t, LocationTarget::Foreground { .. }))
        .count();
    let norm = num_fg.max(1) as f64;
    let mut total: Option<Var<'g>> = None;
    let (mut cls, mut reg) = (0.0, 0.0);
    let mut push = |v: Var<'g>| -> Result<()> {
        total = Some(match total {
            Some(t) => t.add(v)?,
            None => v,
        });
        Ok(())
    };
    for (out, tgt) in outputs.iter().zip(targets) {
        let logits = out.logits.value();
        let classes = logits.last_dim();
        if logits.shape()[0] != tgt.len() {
            return Err(Error::Config(format!(
                "level has {} locations but {} targets",
                logits.shape()[0],
                tgt.len()
            )));
        }
        let labels = tgt
            .iter()
            .map(|t| match *t {
                LocationTarget::Foreground { class_id, .. } => Some(class_id),
                LocationTarget::Background => None,
            })
            .collect();
        let focal = FocalLoss { labels, classes, norm };
        let v = focal.value(&logits);
        cls += v;
        push(graph.custom(&[out.logits], Tensor::scalar(v), Box::new(focal))?)?;

        let s = out.stride as f64;
        let fg: Vec<(usize, [f64; 2])> = tgt
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match *t {
                LocationTarget::Foreground { d_start, d_end, .. } => Some((i, [d_start / s, d_end / s])),
                LocationTarget::Background => None,
            })
            .collect();
        if !fg.is_empty() {
            let iou = IouLoss { targets: fg, norm };
            let v = iou.value(&out.offsets.value());
            reg += v;
            push(graph.custom(&[out.offsets], Tensor::scalar(v), Box::new(iou))?)?;
        }
    }
    let total = total.ok_or_else(|| Error::Config("no pyramid levels".into()))?;
    Ok(LossTerms { total, cls, reg, num_fg })
}

/// One detected action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub start_s: f64,
    pub end_s: f64,
    pub class_id: usize,
    pub score: f64,
}

/// Head output of one level, detached from the graph.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub logits: Tensor,
    pub offsets: Tensor,
    pub stride: usize,
}

impl From<&LevelOutput<'_>> for LevelPrediction {
    fn from(o: &LevelOutput<'_>) -> Self {
        Self {
            logits: (*o.logits.value()).clone(),
            offsets: (*o.offsets.value()).clone(),
            stride: o.stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub topk: usize,
    pub fps: f64,
    pub clip_origin_s: f64,
    /// Segments are clipped to `[0, clip_frames]` when set.
    pub clip_frames: Option<f64>,
}

/// Ordering used everywhere detections are ranked: score descending, then
/// start, end and class ascending.
pub fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_s.total_cmp(&b.start_s))
        .then(a.end_s.total_cmp(&b.end_s))
        .then(a.class_id.cmp(&b.class_id))
}

/// Converts each location whose best class score reaches the threshold into
/// a segment `[t·stride − d_start, t·stride + d_end]` frames, in seconds.
pub fn decode(preds: &[LevelPrediction], params: &DecodeParams) -> Vec<Detection> {
    let mut dets = Vec::new();
    for lp in preds {
        let k = lp.logits.last_dim();
        let s = lp.stride as f64;
        for (t, row) in lp.logits.data().chunks_exact(k).enumerate() {
            let (class_id, &best) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            let score = sigmoid(best);
            if score < params.score_thresh || score <= 0.0 {
                continue;
            }
            let pos = t as f64 * s;
            let mut start = pos - lp.offsets.data()[2 * t] * s;
            let mut end = pos + lp.offsets.data()[2 * t + 1] * s;
            if let Some(len) = params.clip_frames {
                start = start.max(0.0);
                end = end.min(len);
            }
            if end <= start {
                continue;
            }
            dets.push(Detection {
                start_s: params.clip_origin_s + start / params.fps,
                end_s: params.clip_origin_s + end / params.fps,
                class_id,
                score,
            });
        }
    }
    dets.sort_by(rank_order);
    dets.truncate(params.topk);
    dets
}

/// Greedy hard NMS: walk detections in rank order and drop any whose tIoU
/// with an already kept one exceeds `iou_thresh` (same class only when
/// `class_aware`).
pub fn nms(dets: &[Detection], iou_thresh: f64, class_aware: bool) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept.iter().any(|k| {
            (!class_aware || k.class_id == d.class_id)
                && overlap([k.start_s, k.end_s], [d.start_s, d.end_s]) > iou_thresh
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// One JSON object per line: `video_id`, `t_start`, `t_end`, `label`, `score`,
/// with times printed to three decimals.
pub fn detections_jsonl(video_id: &str, dets: &[Detection]) -> String {
    let id = serde_json::to_string(video_id).expect("string serializes");
    dets.iter()
        .map(|d| {
            format!(
                "{{\"video_id\":{id},\"t_start\":{:.3},\"t_end\":{:.3},\"label\":{},\"score\":{:.6}}}\n",
                d.start_s, d.end_s, d.class_id, d.score
            )
        })
        .collect()
}
