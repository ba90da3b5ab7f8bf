//! Temporal detection metrics: tIoU, per-class AP, multi-threshold mAP and
//! the top-10G false-positive breakdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};
use crate::head::{rank_order, Detection};

/// tIoU thresholds of the THUMOS14 protocol.
pub const THUMOS_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
/// tIoU thresholds of the ActivityNet protocol.
pub const ACTIVITYNET_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
/// tIoU at which the error breakdown separates hits from misses.
pub const ERROR_TIOU: f64 = 0.5;
/// Below this tIoU against every ground truth a prediction is background.
pub const BACKGROUND_TIOU: f64 = 0.1;

/// A ground-truth action.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub class_id: usize,
}

/// A prediction attributed to a video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDetection {
    pub video_id: String,
    pub det: Detection,
}

/// tIoU of two intervals; errors on degenerate or non-finite ones.
pub fn tiou(a: [f64; 2], b: [f64; 2]) -> Result<f64> {
    for iv in [a, b] {
        if !(iv[0].is_finite() && iv[1].is_finite() && iv[0] < iv[1]) {
            return Err(Error::Eval(format!("degenerate interval [{}, {}]", iv[0], iv[1])));
        }
    }
    Ok(overlap(a, b))
}

/// tIoU without validation; 0 for disjoint or empty intervals.
pub fn overlap(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn det_order(a: &VideoDetection, b: &VideoDetection) -> std::cmp::Ordering {
    rank_order(&a.det, &b.det).then_with(|| a.video_id.cmp(&b.video_id))
}

/// Detections sorted by rank with ties broken by video id.
pub fn ranked(dets: &[VideoDetection]) -> Vec<&VideoDetection> {
    let mut v: Vec<&VideoDetection> = dets.iter().collect();
    v.sort_by(|a, b| det_order(a, b));
    v
}

/// AP of one class at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAp {
    pub ap: f64,
    pub num_gt: usize,
}

impl ClassAp {
    /// True when the class had no ground truth and `ap` is 0 by definition.
    pub fn undefined(&self) -> bool {
        self.num_gt == 0
    }
}

/// Marks each ranked detection as a hit (`true`) or a miss: a detection takes
/// the unmatched same-video ground truth with the highest tIoU, if that is at
/// least `thresh`.
pub fn match_detections(ranked: &[&VideoDetection], gts: &[&Segment], thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                if used[i] || g.video_id != d.video_id {
                    continue;
                }
                let o = overlap([d.det.start_s, d.det.end_s], [g.start_s, g.end_s]);
                if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((i, o));
                }
            }
            if let Some((i, _)) = best {
                used[i] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Area under the precision-recall staircase with precision made monotone
/// from the right (all-point interpolation).
pub fn ap_from_hits(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = 0.0;
    let mut steps = Vec::new();
    for &(r, p) in points.iter().rev() {
        envelope = envelope.max(p);
        steps.push((r, envelope));
    }
    for &(r, p) in steps.iter().rev() {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

pub fn average_precision(dets: &[VideoDetection], gts: &[Segment], class_id: usize, thresh: f64) -> ClassAp {
    let class_gts: Vec<&Segment> = gts.iter().filter(|g| g.class_id == class_id).collect();
    let class_dets: Vec<VideoDetection> = dets.iter().filter(|d| d.det.class_id == class_id).cloned().collect();
    let order = ranked(&class_dets);
    let hits = match_detections(&order, &class_gts, thresh);
    ClassAp {
        ap: ap_from_hits(&hits, class_gts.len()),
        num_gt: class_gts.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// mAP at each threshold.
    pub map: Vec<f64>,
    /// Mean of `map`.
    pub average: f64,
    /// `(threshold, class, AP)` for every class with ground truth.
    pub per_class: Vec<(f64, usize, f64)>,
    pub errors: ErrorReport,
}

impl EvalReport {
    pub fn map_at(&self, thresh: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == thresh).map(|i| self.map[i])
    }
}

/// mAP at each threshold over the classes that have ground truth, their mean,
/// and the error breakdown.
pub fn mean_ap(dets: &[VideoDetection], gts: &[Segment], thresholds: &[f64]) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Eval("ground truth is empty".into()));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Eval(format!("thresholds must be non-empty and ascending: {thresholds:?}")));
    }
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut map = Vec::with_capacity(thresholds.len());
    let mut per_class = Vec::new();
    for &t in thresholds {
        let aps: Vec<f64> = classes.iter().map(|&c| average_precision(dets, gts, c, t).ap).collect();
        per_class.extend(classes.iter().zip(&aps).map(|(&c, &ap)| (t, c, ap)));
        map.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        average: map.iter().sum::<f64>() / map.len() as f64,
        map,
        per_class,
        errors: error_analysis(dets, gts, ERROR_TIOU),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    TruePositive,
    DoubleDetection,
    WrongLabel,
    Localization,
    Confusion,
    Background,
}

impl Outcome {
    pub const ERRORS: [Outcome; 5] = [
        Outcome::Background,
        Outcome::Localization,
        Outcome::Confusion,
        Outcome::WrongLabel,
        Outcome::DoubleDetection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::TruePositive => "true_positive",
            Outcome::DoubleDetection => "double_detection",
            Outcome::WrongLabel => "wrong_label",
            Outcome::Localization => "localization",
            Outcome::Confusion => "confusion",
            Outcome::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Number of top-ranked predictions examined (`10·G` or fewer).
    pub considered: usize,
    /// Outcome of each examined prediction, in rank order.
    pub outcomes: Vec<Outcome>,
}

impl ErrorReport {
    pub fn count(&self, o: Outcome) -> usize {
        self.outcomes.iter().filter(|&&x| x == o).count()
    }

    /// Share of examined predictions with outcome `o`.
    pub fn rate(&self, o: Outcome) -> f64 {
        if self.considered == 0 {
            0.0
        } else {
            self.count(o) as f64 / self.considered as f64
        }
    }
}

/// Labels each of the top `10·G` predictions. A prediction that takes an
/// unmatched same-label ground truth at tIoU ≥ `tau` is a true positive;
/// otherwise the first matching rule wins:
/// same label ≥ `tau` (already taken) → double detection;
/// other label ≥ `tau` → wrong label;
/// same label ≥ 0.1 → localization;
/// other label ≥ 0.1 → confusion;
/// else background.
pub fn error_analysis(dets: &[VideoDetection], gts: &[Segment], tau: f64) -> ErrorReport {
    let order = ranked(dets);
    let top = order.len().min(10 * gts.len());
    let mut used = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(top);
    for d in &order[..top] {
        let iv = [d.det.start_s, d.det.end_s];
        let mut take: Option<(usize, f64)> = None;
        let (mut same_best, mut other_best) = (0.0f64, 0.0f64);
        for (i, g) in gts.iter().enumerate() {
            if g.video_id != d.video_id {
                continue;
            }
            let o = overlap(iv, [g.start_s, g.end_s]);
            if g.class_id == d.det.class_id {
                same_best = same_best.max(o);
                if !used[i] && o >= tau && take.is_none_or(|(_, b)| o > b) {
                    take = Some((i, o));
                }
            } else {
                other_best = other_best.max(o);
            }
        }
        let outcome = if let Some((i, _)) = take {
            used[i] = true;
            Outcome::TruePositive
        } else if same_best >= tau {
            Outcome::DoubleDetection
        } else if other_best >= tau {
            Outcome::WrongLabel
        } else if same_best >= BACKGROUND_TIOU {
            Outcome::Localization
        } else if other_best >= BACKGROUND_TIOU {
            Outcome::Confusion
        } else {
            Outcome::Background
        };
        outcomes.push(outcome);
    }
    ErrorReport { considered: top, outcomes }
}

/// One annotated action in the ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotations {
    pub duration_s: f64,
    pub annotations: Vec<Annotation>,
}

/// Ground-truth file keyed by video id.
pub type GroundTruth = BTreeMap<String, VideoAnnotations>;

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

pub fn save_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let text = serde_json::to_string_pretty(gt).map_err(json_err(path))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn segments(gt: &GroundTruth) -> Vec<Segment> {
    gt.iter()
        .flat_map(|(id, v)| {
            v.annotations.iter().map(move |a| Segment {
                video_id: id.clone(),
                start_s: a.start,
                end_s: a.end,
                class_id: a.label,
            })
        })
        .collect()
}

/// `threshold,class,AP` rows, then one `mAP` row per threshold and an `avg` row.
pub fn metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("threshold,class,AP\n");
    for &(t, c, ap) in &report.per_class {
        writeln!(out, "{t:.2},{c},{ap:.6}").unwrap();
    }
    for (t, m) in report.thresholds.iter().zip(&report.map) {
        writeln!(out, "{t:.2},mAP,{m:.6}").unwrap();
    }
    writeln!(out, "avg,mAP,{:.6}", report.average).unwrap();
    out
}

/// `type,count,rate` for the true positives and the five error types.
pub fn errors_csv(report: &ErrorReport) -> String {
    let mut out = String::from("type,count,rate\n");
    for o in std::iter::once(Outcome::TruePositive).chain(Outcome::ERRORS) {
        writeln!(out, "{},{},{:.6}", o.name(), report.count(o), report.rate(o)).unwrap();
    }
    out
}
