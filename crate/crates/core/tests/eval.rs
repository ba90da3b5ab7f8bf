mod common;

use common::oracles::*;
use common::rng;
use proptest::prelude::*;
use rand::Rng;
use vit_tad_core::eval::*;
use vit_tad_core::head::Detection;

fn vd(video: &str, s: f64, e: f64, c: usize, score: f64) -> VideoDetection {
    VideoDetection {
        video_id: video.into(),
        det: Detection {
            start_s: s,
            end_s: e,
            class_id: c,
            score,
        },
    }
}

#[test]
fn tiou_examples() {
    assert_eq!(tiou([0.0, 10.0], [0.0, 10.0]).unwrap(), 1.0);
    assert_eq!(tiou([0.0, 10.0], [20.0, 30.0]).unwrap(), 0.0);
    assert!((tiou([0.0, 10.0], [5.0, 15.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(tiou([1.0, 1.0], [0.0, 2.0]).is_err());
    assert!(tiou([0.0, 2.0], [3.0, f64::NAN]).is_err());
}

#[test]
fn threshold_grids() {
    assert_eq!(THUMOS_THRESHOLDS, [0.3, 0.4, 0.5, 0.6, 0.7]);
    assert_eq!(ACTIVITYNET_THRESHOLDS.len(), 10);
    for (i, t) in ACTIVITYNET_THRESHOLDS.iter().enumerate() {
        assert!((t - (0.5 + 0.05 * i as f64)).abs() < 1e-12);
    }
}

#[test]
fn ap_examples() {
    let gts = vec![seg("a", 0.0, 2.0, 0), seg("a", 4.0, 6.0, 0), seg("b", 1.0, 3.0, 0)];
    let perfect: Vec<VideoDetection> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| vd(&g.video_id, g.start_s, g.end_s, 0, 0.9 - 0.1 * i as f64))
        .collect();
    assert_eq!(average_precision(&perfect, &gts, 0, 0.5).ap, 1.0);
    assert_eq!(average_precision(&[], &gts, 0, 0.5).ap, 0.0);
    let none = average_precision(&perfect, &gts, 1, 0.5);
    assert!(none.undefined() && none.ap == 0.0);
    // hit, miss, hit over two gts: (1/2)·1 + (1/2)·(2/3)
    let mixed = vec![
        vd("a", 0.0, 2.0, 0, 0.9),
        vd("a", 10.0, 12.0, 0, 0.8),
        vd("a", 4.0, 6.0, 0, 0.7),
    ];
    let ap = average_precision(&mixed, &gts[..2], 0, 0.5).ap;
    assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    assert!((ap - average_precision_ref(&mixed, &gts[..2], 0, 0.5)).abs() < 1e-12);
}

#[test]
fn ap_matches_exhaustive_matching_on_random_instances() {
    let mut r = rng(1);
    for case in 0..200 {
        let gts: Vec<Segment> = (0..r.random_range(1..=5)).map(|_| random_seg(&mut r, 2, 1)).collect();
        let dets: Vec<VideoDetection> = (0..r.random_range(0..=8)).map(|_| random_vdet(&mut r, 2, 1)).collect();
        for &t in &THUMOS_THRESHOLDS {
            let got = average_precision(&dets, &gts, 0, t).ap;
            let want = average_precision_ref(&dets, &gts, 0, t);
            assert!((got - want).abs() <= 1e-12, "case {case} t {t}: {got} vs {want}");
        }
    }
}

#[test]
fn map_on_perfect_predictions_is_one() {
    let gts: Vec<Segment> = (0..6).map(|i| seg(&format!("v{}", i % 2), i as f64 * 3.0, i as f64 * 3.0 + 2.0, i % 3)).collect();
    let dets: Vec<VideoDetection> = gts.iter().map(|g| vd(&g.video_id, g.start_s, g.end_s, g.class_id, 0.5)).collect();
    let report = mean_ap(&dets, &gts, &ACTIVITYNET_THRESHOLDS).unwrap();
    assert!(report.map.iter().all(|&m| m == 1.0));
    assert_eq!(report.average, 1.0);
    assert_eq!(report.map_at(0.95), Some(1.0));
}

#[test]
fn map_rejects_bad_input() {
    assert!(mean_ap(&[], &[], &THUMOS_THRESHOLDS).is_err());
    let gts = vec![seg("a", 0.0, 1.0, 0)];
    assert!(mean_ap(&[], &gts, &[]).is_err());
    assert!(mean_ap(&[], &gts, &[0.5, 0.3]).is_err());
}

#[test]
fn average_is_mean_of_thresholds_and_classes_without_gt_are_skipped() {
    let mut r = rng(2);
    let gts: Vec<Segment> = (0..6).map(|_| random_seg(&mut r, 2, 2)).collect();
    let mut dets: Vec<VideoDetection> = (0..12).map(|_| random_vdet(&mut r, 2, 2)).collect();
    let before = mean_ap(&dets, &gts, &THUMOS_THRESHOLDS).unwrap();
    // detections of a class that has no ground truth do not enter the mean
    dets.push(vd("v0", 0.0, 3.0, 7, 1.0));
    let after = mean_ap(&dets, &gts, &THUMOS_THRESHOLDS).unwrap();
    assert_eq!(before.map, after.map);
    let mean = before.map.iter().sum::<f64>() / 5.0;
    assert!((before.average - mean).abs() < 1e-15);
}

#[test]
fn false_positive_on_top_never_raises_ap() {
    let mut r = rng(3);
    for _ in 0..100 {
        let gts: Vec<Segment> = (0..3).map(|_| random_seg(&mut r, 1, 1)).collect();
        let mut dets: Vec<VideoDetection> = (0..6).map(|_| random_vdet(&mut r, 1, 1)).collect();
        let before = average_precision(&dets, &gts, 0, 0.5).ap;
        dets.push(vd("v0", 100.0, 101.0, 0, 2.0));
        assert!(average_precision(&dets, &gts, 0, 0.5).ap <= before);
    }
}

#[test]
fn error_examples() {
    let gts = vec![seg("a", 0.0, 10.0, 0), seg("a", 20.0, 30.0, 1)];
    let perfect = vec![vd("a", 0.0, 10.0, 0, 0.9), vd("a", 20.0, 30.0, 1, 0.8)];
    let report = error_analysis(&perfect, &gts, 0.5);
    assert!(Outcome::ERRORS.iter().all(|&o| report.rate(o) == 0.0));
    let mut dup = perfect.clone();
    dup.push(vd("a", 0.0, 10.0, 0, 0.1));
    let report = error_analysis(&dup, &gts, 0.5);
    assert_eq!(report.count(Outcome::DoubleDetection), 1);
    assert_eq!(report.considered, 3);
}

#[test]
fn error_fixture_matches_hand_counts_and_oracle() {
    let (dets, gts, expected) = error_fixture();
    let report = error_analysis(&dets, &gts, ERROR_TIOU);
    assert_eq!(report.considered, 30);
    let counts: Vec<usize> = FIXTURE_ORDER.iter().map(|&o| report.count(o)).collect();
    assert_eq!(counts, expected);
    assert_eq!(report.outcomes, error_outcomes_ref(&dets, &gts, ERROR_TIOU));
}

#[test]
fn error_analysis_matches_rule_oracle_on_random_cases() {
    let mut r = rng(4);
    for case in 0..200 {
        let gts: Vec<Segment> = (0..r.random_range(1..=3)).map(|_| random_seg(&mut r, 2, 3)).collect();
        let dets: Vec<VideoDetection> = (0..20).map(|_| random_vdet(&mut r, 2, 3)).collect();
        let report = error_analysis(&dets, &gts, ERROR_TIOU);
        assert_eq!(report.outcomes, error_outcomes_ref(&dets, &gts, ERROR_TIOU), "case {case}");
        assert_eq!(report.considered, 20.min(10 * gts.len()));
    }
}

#[test]
fn csv_outputs_have_expected_rows() {
    let (dets, gts, _) = error_fixture();
    let report = mean_ap(&dets, &gts, &THUMOS_THRESHOLDS).unwrap();
    let metrics = metrics_csv(&report);
    assert!(metrics.starts_with("threshold,class,AP\n"));
    let errors = errors_csv(&report.errors);
    assert_eq!(errors.lines().count(), 7);
    assert!(errors.contains("double_detection,8,"));
}

#[test]
fn ground_truth_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.json");
    let mut gt = GroundTruth::new();
    gt.insert(
        "val_0001".into(),
        VideoAnnotations {
            duration_s: 4.0,
            annotations: vec![Annotation {
                start: 0.5,
                end: 1.75,
                label: 1,
            }],
        },
    );
    save_ground_truth(&path, &gt).unwrap();
    let back = load_ground_truth(&path).unwrap();
    assert_eq!(back, gt);
    assert_eq!(segments(&back), vec![seg("val_0001", 0.5, 1.75, 1)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tiou_is_symmetric_and_bounded(a in 0.0f64..10.0, la in 0.01f64..10.0, b in 0.0f64..10.0, lb in 0.01f64..10.0) {
        let (x, y) = ([a, a + la], [b, b + lb]);
        let t = tiou(x, y).unwrap();
        prop_assert_eq!(t, tiou(y, x).unwrap());
        prop_assert!((0.0..=1.0).contains(&t));
        prop_assert_eq!(t == 1.0, x == y);
        prop_assert!((t - tiou_ref(x, y)).abs() < 1e-12);
    }

    #[test]
    fn ap_depends_only_on_ranking(seed in 0u64..1000) {
        let mut r = rng(seed);
        let gts: Vec<Segment> = (0..4).map(|_| random_seg(&mut r, 2, 2)).collect();
        let dets: Vec<VideoDetection> = (0..10).map(|_| random_vdet(&mut r, 2, 2)).collect();
        let squashed: Vec<VideoDetection> = dets
            .iter()
            .map(|d| VideoDetection { det: Detection { score: d.det.score.powi(3) * 0.5, ..d.det }, ..d.clone() })
            .collect();
        let mut shuffled = dets.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut r);
        let base = mean_ap(&dets, &gts, &THUMOS_THRESHOLDS).unwrap();
        prop_assert_eq!(&base.map, &mean_ap(&squashed, &gts, &THUMOS_THRESHOLDS).unwrap().map);
        prop_assert_eq!(&base, &mean_ap(&shuffled, &gts, &THUMOS_THRESHOLDS).unwrap());
    }
}
