mod common;

use common::*;
use vit_tad_core::optim::OptimizerConfig;
use vit_tad_core::synth::{generate_samples, SynthSpec, TRAIN_SPLIT};
use vit_tad_core::train::{loss_csv, train, TrainConfig};
use vit_tad_core::{DetectConfig, ModelConfig, Placement, PropKind, VitTad};
use vit_tad_tensor::{grad_check, Graph, ParamStore};

fn tiny_cfg(kind: PropKind) -> ModelConfig {
    ModelConfig {
        frames: 16,
        height: 16,
        width: 16,
        snippets: 2,
        depth: 2,
        embed_dim: 8,
        heads: 2,
        tubelet: [2, 8, 8],
        k_prop: 1,
        prop_kind: kind,
        placement: Placement::Evenly,
        post_layers: 1,
        pyramid_levels: 2,
        num_classes: 2,
        fps: 8.0,
    }
}

fn tiny_spec() -> SynthSpec {
    SynthSpec {
        frames: 16,
        height: 16,
        width: 16,
        actions: [1, 1],
        action_len: [4, 8],
        ..SynthSpec::default()
    }
}

#[test]
fn full_model_loss_passes_sampled_gradient_check() {
    for kind in [PropKind::Local, PropKind::Global1d] {
        let cfg = tiny_cfg(kind);
        let mut store = ParamStore::new();
        let model = VitTad::new(&mut store, &cfg, 1).unwrap();
        randomize(&mut store, "backbone.prop", &mut rng(2), 0.3);
        let sample = generate_samples(&tiny_spec(), TRAIN_SPLIT, 0..1).unwrap().remove(0);
        let report = grad_check(
            &store,
            |g, p| Ok(model.loss(g, &sample, p).map_err(to_tensor_err)?.total),
            &gradcheck_opts(Some(3)),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{kind:?}: {report:?}");
    }
}

#[test]
fn labels_outside_the_class_range_are_rejected() {
    let mut store = ParamStore::new();
    let model = VitTad::new(&mut store, &tiny_cfg(PropKind::None), 3).unwrap();
    let mut sample = generate_samples(&tiny_spec(), TRAIN_SPLIT, 0..1).unwrap().remove(0);
    sample.segments[0].class_id = 5;
    let g = Graph::new();
    let p = store.bind(&g);
    assert!(model.loss(&g, &sample, &p).is_err());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let cfg = tiny_cfg(PropKind::Global1d);
    let samples = generate_samples(&tiny_spec(), TRAIN_SPLIT, 0..2).unwrap();
    let tc = TrainConfig {
        steps: 30,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut store = ParamStore::new();
        let model = VitTad::new(&mut store, &cfg, 4).unwrap();
        let records = train(&model, &mut store, &samples, &tc, 5, |_| {}).unwrap();
        (records, store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert!(sa.iter().zip(sb.iter()).all(|(x, y)| x.tensor == y.tensor));
    let head: f64 = a[..5].iter().map(|r| r.loss).sum();
    let tail: f64 = a[25..].iter().map(|r| r.loss).sum();
    assert!(tail < head, "loss went from {head} to {tail}");
    assert_eq!(loss_csv(&a).lines().count(), 31);
}

#[test]
fn divergence_is_reported_with_the_step() {
    let samples = generate_samples(&tiny_spec(), TRAIN_SPLIT, 0..1).unwrap();
    let mut store = ParamStore::new();
    let model = VitTad::new(&mut store, &tiny_cfg(PropKind::None), 6).unwrap();
    let tc = TrainConfig {
        optimizer: OptimizerConfig::Sgd {
            lr: 1e12,
            momentum: 0.0,
            weight_decay: 0.0,
        },
        steps: 20,
        ..TrainConfig::default()
    };
    let err = train(&model, &mut store, &samples, &tc, 0, |_| {}).unwrap_err().to_string();
    assert!(err.contains("step"), "{err}");
}

#[test]
fn checkpoint_roundtrip_preserves_detections() {
    let cfg = tiny_cfg(PropKind::Local);
    let mut store = ParamStore::new();
    let model = VitTad::new(&mut store, &cfg, 7).unwrap();
    randomize(&mut store, "head", &mut rng(8), 0.3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    store.save(&path).unwrap();
    let mut loaded = ParamStore::new();
    let _ = VitTad::new(&mut loaded, &cfg, 99).unwrap();
    loaded.load(&path).unwrap();
    let samples = generate_samples(&tiny_spec(), TRAIN_SPLIT, 0..2).unwrap();
    let dc = DetectConfig {
        score_thresh: 0.0,
        ..DetectConfig::default()
    };
    let a = model.detect_samples(&store, &samples, &dc).unwrap();
    let b = model.detect_samples(&loaded, &samples, &dc).unwrap();
    assert_eq!(a, b);
    for d in &a {
        assert!(d.det.start_s < d.det.end_s && d.det.start_s >= 0.0 && d.det.end_s <= 2.0);
        assert!(d.det.score > 0.0 && d.det.score <= 1.0 && d.det.class_id < 2);
    }
}
