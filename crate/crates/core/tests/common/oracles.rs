//! Slow reference implementations of the evaluation rules.

use vit_tad_core::eval::{Outcome, Segment, VideoDetection};
use vit_tad_core::head::{rank_order, Detection};

pub fn tiou_ref(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)
}

fn rank(dets: &[VideoDetection]) -> Vec<VideoDetection> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| rank_order(&a.det, &b.det).then_with(|| a.video_id.cmp(&b.video_id)));
    v
}

/// Enumerates every injective assignment of ranked detections to eligible
/// ground truths and returns the hits of the lexicographically best one:
/// earlier detections first prefer any match, then a higher tIoU, then a lower
/// ground-truth index.
pub fn exhaustive_hits(ranked: &[VideoDetection], gts: &[Segment], thresh: f64) -> Vec<bool> {
    let eligible: Vec<Vec<(usize, f64)>> = ranked
        .iter()
        .map(|d| {
            gts.iter()
                .enumerate()
                .filter(|(_, g)| g.video_id == d.video_id)
                .map(|(i, g)| (i, tiou_ref([d.det.start_s, d.det.end_s], [g.start_s, g.end_s])))
                .filter(|&(_, o)| o >= thresh)
                .collect()
        })
        .collect();
    // key entries: (matched, tIoU, -index) per detection
    type Key = Vec<(bool, f64, isize)>;
    fn search(i: usize, eligible: &[Vec<(usize, f64)>], used: &mut Vec<bool>, cur: &mut Key, best: &mut Option<Key>) {
        if i == eligible.len() {
            let better = match best {
                None => true,
                Some(b) => cur
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2)))
                    .find(|o| o.is_ne())
                    .is_some_and(|o| o.is_gt()),
            };
            if better {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push((false, 0.0, 0));
        search(i + 1, eligible, used, cur, best);
        cur.pop();
        for &(g, o) in &eligible[i] {
            if !used[g] {
                used[g] = true;
                cur.push((true, o, -(g as isize)));
                search(i + 1, eligible, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    search(0, &eligible, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    best.expect("at least the empty assignment").iter().map(|k| k.0).collect()
}

/// All-point AP as the sum over hits of the best precision at or beyond
/// that rank, divided by the number of ground truths.
pub fn ap_ref(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let prec: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    (0..hits.len())
        .filter(|&k| hits[k])
        .map(|k| prec[k..].iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / num_gt as f64
}

pub fn average_precision_ref(dets: &[VideoDetection], gts: &[Segment], class_id: usize, thresh: f64) -> f64 {
    let gts: Vec<Segment> = gts.iter().filter(|g| g.class_id == class_id).cloned().collect();
    let dets: Vec<VideoDetection> = dets.iter().filter(|d| d.det.class_id == class_id).cloned().collect();
    let ranked = rank(&dets);
    ap_ref(&exhaustive_hits(&ranked, &gts, thresh), gts.len())
}

/// Error type of every top-`10·G` prediction, decided rule by rule from the
/// per-class matching and the best same-label and other-label overlaps.
pub fn error_outcomes_ref(dets: &[VideoDetection], gts: &[Segment], tau: f64) -> Vec<Outcome> {
    let ranked = rank(dets);
    let top = ranked.len().min(10 * gts.len());
    let mut tp = vec![false; ranked.len()];
    let mut classes: Vec<usize> = ranked.iter().map(|d| d.det.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let idx: Vec<usize> = (0..top).filter(|&i| ranked[i].det.class_id == c).collect();
        let sub: Vec<VideoDetection> = idx.iter().map(|&i| ranked[i].clone()).collect();
        let class_gts: Vec<Segment> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        for (k, hit) in exhaustive_hits(&sub, &class_gts, tau).into_iter().enumerate() {
            tp[idx[k]] = hit;
        }
    }
    (0..top)
        .map(|i| {
            let d = &ranked[i];
            let best = |same: bool| {
                gts.iter()
                    .filter(|g| g.video_id == d.video_id && (g.class_id == d.det.class_id) == same)
                    .map(|g| tiou_ref([d.det.start_s, d.det.end_s], [g.start_s, g.end_s]))
                    .fold(0.0, f64::max)
            };
            let (same, other) = (best(true), best(false));
            let rules = [
                (tp[i], Outcome::TruePositive),
                (same >= tau, Outcome::DoubleDetection),
                (other >= tau, Outcome::WrongLabel),
                (same >= 0.1, Outcome::Localization),
                (other >= 0.1, Outcome::Confusion),
                (true, Outcome::Background),
            ];
            rules.iter().find(|r| r.0).expect("background always applies").1
        })
        .collect()
}

fn vdet(video_id: &str, start_s: f64, end_s: f64, class_id: usize, score: f64) -> VideoDetection {
    VideoDetection {
        video_id: video_id.into(),
        det: Detection {
            start_s,
            end_s,
            class_id,
            score,
        },
    }
}

pub fn seg(video_id: &str, start_s: f64, end_s: f64, class_id: usize) -> Segment {
    Segment {
        video_id: video_id.into(),
        start_s,
        end_s,
        class_id,
    }
}

/// Three ground truths and 31 detections, of which the top 30 are examined.
/// Returns the fixture and its hand-derived counts in the order
/// true positive, double, wrong label, localization, confusion, background.
pub fn error_fixture() -> (Vec<VideoDetection>, Vec<Segment>, [usize; 6]) {
    let gts = vec![seg("v", 0.0, 10.0, 0), seg("v", 20.0, 30.0, 1), seg("v", 40.0, 50.0, 0)];
    let spans: [(f64, f64, usize); 31] = [
        (0.0, 10.0, 0),   // true positive
        (20.0, 30.0, 1),  // true positive
        (0.0, 10.0, 0),   // double
        (1.0, 10.0, 0),   // double
        (40.0, 50.0, 1),  // wrong label
        (40.0, 46.0, 0),  // true positive at 0.6
        (60.0, 70.0, 0),  // background
        (0.0, 4.0, 0),    // localization
        (20.0, 24.0, 0),  // confusion
        (20.0, 30.0, 0),  // wrong label
        (5.0, 15.0, 1),   // confusion
        (45.0, 55.0, 0),  // localization
        (100.0, 110.0, 1), // background
        (8.0, 22.0, 0),   // background, 1/11 to both
        (0.0, 10.0, 1),   // wrong label
        (20.0, 30.0, 1),  // double
        (25.0, 35.0, 1),  // localization
        (42.0, 48.0, 1),  // wrong label
        (9.0, 21.0, 0),   // background
        (3.0, 13.0, 0),   // double at 7/13
        (0.0, 10.0, 2),   // wrong label
        (30.0, 40.0, 1),  // background, touching only
        (2.0, 9.0, 0),    // double
        (19.0, 31.0, 1),  // double
        (44.0, 60.0, 1),  // confusion
        (40.0, 60.0, 0),  // double at exactly 0.5
        (21.0, 23.0, 1),  // localization
        (70.0, 80.0, 2),  // background
        (0.0, 30.0, 1),   // localization wins over confusion
        (1.0, 9.0, 0),    // double
        (0.0, 10.0, 0),   // outside the top 30
    ];
    let dets = spans
        .iter()
        .enumerate()
        .map(|(i, &(s, e, c))| vdet("v", s, e, c, (32 - i) as f64 / 32.0))
        .collect();
    (dets, gts, [3, 8, 5, 5, 3, 6])
}

pub const FIXTURE_ORDER: [Outcome; 6] = [
    Outcome::TruePositive,
    Outcome::DoubleDetection,
    Outcome::WrongLabel,
    Outcome::Localization,
    Outcome::Confusion,
    Outcome::Background,
];

pub fn random_vdet(r: &mut impl rand::Rng, videos: usize, classes: usize) -> VideoDetection {
    let s = r.random_range(0..16) as f64;
    vdet(
        &format!("v{}", r.random_range(0..videos)),
        s,
        s + r.random_range(1..8) as f64,
        r.random_range(0..classes),
        r.random_range(1..8) as f64 / 8.0,
    )
}

pub fn random_seg(r: &mut impl rand::Rng, videos: usize, classes: usize) -> Segment {
    let s = r.random_range(0..16) as f64;
    seg(
        &format!("v{}", r.random_range(0..videos)),
        s,
        s + r.random_range(1..8) as f64,
        r.random_range(0..classes),
    )
}

pub fn random_detections(r: &mut impl rand::Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let s = r.random_range(0..20) as f64 * 0.5;
            Detection {
                start_s: s,
                end_s: s + r.random_range(1..12) as f64 * 0.5,
                class_id: r.random_range(0..classes),
                // coarse scores so ties exercise the tie-break
                score: r.random_range(1..10) as f64 / 10.0,
            }
        })
        .collect()
}

/// Fixed point of "kept iff no kept higher-ranked same-class detection
/// overlaps it too much", from the full pairwise suppression matrix.
pub fn nms_oracle(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank_order);
    let n = sorted.len();
    let mut sup = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (&sorted[i], &sorted[j]);
            sup[i][j] = i < j && a.class_id == b.class_id && tiou_ref([a.start_s, a.end_s], [b.start_s, b.end_s]) > thresh;
        }
    }
    let mut kept = vec![true; n];
    loop {
        let next: Vec<bool> = (0..n).map(|j| !(0..n).any(|i| kept[i] && sup[i][j])).collect();
        if next == kept {
            break;
        }
        kept = next;
    }
    sorted.into_iter().zip(kept).filter(|(_, k)| *k).map(|(d, _)| d).collect()
}
