//! Training loop behaviour on a toy atlas.

use glyphslot::checkpoint::{self, CheckpointMeta};
use glyphslot::datagen::{Atlas, SplitSpec, SynthAtlasConfig};
use glyphslot::detector::{Detector, ModelConfig};
use glyphslot::training::{fine_tune, smoothed_ends, train, TrainConfig};

fn toy_atlas() -> Atlas {
    SynthAtlasConfig { alphabets: 2, ..Default::default() }.build(3, &SplitSpec::AllTrain).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![8, 16, 16, 16],
        fc_width: 32,
        anchor_scales: vec![20.0, 32.0, 48.0],
        ..Default::default()
    }
}

fn toy_train(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig { iterations, n_way: 2, seed: 4, ..Default::default() };
    cfg.episode.compose.max_symbols = 8;
    cfg
}

#[test]
fn zero_iterations_return_the_initialization() {
    let trained = train(&toy_atlas(), &toy_train(0), &small_model()).unwrap();
    let init = Detector::new(small_model(), 4).unwrap();
    assert!(trained.trace.is_empty());
    assert_eq!(trained.detector.params, init.params);
}

#[test]
fn fixed_seed_gives_identical_traces_and_weights() {
    let a = train(&toy_atlas(), &toy_train(6), &small_model()).unwrap();
    let b = train(&toy_atlas(), &toy_train(6), &small_model()).unwrap();
    assert_eq!(a.trace.len(), 6);
    assert_eq!(a.trace, b.trace);
    let meta = CheckpointMeta::new(&a.detector.config, None);
    assert_eq!(
        checkpoint::to_bytes(&a.detector, &meta).unwrap(),
        checkpoint::to_bytes(&b.detector, &meta).unwrap()
    );
    let c = train(&toy_atlas(), &TrainConfig { seed: 5, ..toy_train(6) }, &small_model()).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn loss_falls_over_two_hundred_iterations() {
    let trained = train(&toy_atlas(), &toy_train(200), &small_model()).unwrap();
    let (first, last) = smoothed_ends(&trained.trace, 30).unwrap();
    assert!(last < first, "smoothed loss {first} -> {last}");
}

#[test]
fn fine_tuning_without_pages_changes_nothing() {
    let det = Detector::new(small_model(), 1).unwrap();
    let tuned = fine_tune(&det, &[], None, &toy_train(10)).unwrap();
    assert!(tuned.trace.is_empty());
    assert_eq!(tuned.detector.params, det.params);
}

#[test]
fn fine_tuning_skips_classes_without_boxes() {
    let atlas = toy_atlas();
    let det = Detector::new(small_model(), 1).unwrap();
    let mut rng = glyphslot::datagen::child_rng(8, 0);
    let line = glyphslot::datagen::generate_line(&atlas, &Default::default(), &mut rng).unwrap();
    // Class 99 never occurs; training proceeds on the classes present.
    let tuned = fine_tune(&det, &[line.clone(), line], Some(&[0, 1, 99]), &toy_train(2)).unwrap();
    assert_eq!(tuned.trace.len(), 2);
    assert_ne!(tuned.detector.params, det.params);
}
