mod common;

use common::*;
use glossnet::model::{Mode, Model, ModelConfig};
use glossnet::tensor::{Tape, Tensor};
use glossnet::Error;

#[test]
fn gloss_step_count_formula() {
    geometry_holds(16..=200).unwrap();
}

#[test]
fn first_level_features_are_local() {
    locality_probe(7, 20).unwrap();
}

#[test]
fn too_short_sequence_is_an_error() {
    let model = Model::<f32>::new(ModelConfig::tiny(4), 0).unwrap();
    let mut tape = Tape::new();
    let mut pass = model.begin(&mut tape, Mode::Infer, false);
    let s = tape.constant(Tensor::<f32>::zeros([15, 64]));
    assert!(matches!(pass.encode_gloss_level1(&mut tape, s), Err(Error::SequenceTooShort { got: 15, min: 16 })));
}

#[test]
fn frame_features_are_independent_in_inference() {
    let model = Model::<f32>::new(ModelConfig::tiny(4), 1).unwrap();
    let mut r = rng(3);
    let frames: Tensor<f32> = random(&mut r, &[5, 3, 32, 32]).cast();
    let encode = |x: &Tensor<f32>| {
        let mut tape = Tape::new();
        let mut pass = model.begin(&mut tape, Mode::Infer, false);
        let v = tape.constant(x.clone());
        let s = pass.encode_frames(&mut tape, v).unwrap();
        tape.value(s).clone()
    };
    let all = encode(&frames);
    assert_eq!(all.shape(), &[5, 64]);
    for i in 0..5 {
        let one = encode(&frames.slice_outer(i, i + 1).unwrap());
        assert_eq!(one.data(), all.row(i));
    }
}

#[test]
fn forward_shapes_and_wrong_input() {
    let model = Model::<f32>::new(ModelConfig::tiny(6), 2).unwrap();
    let map = model.predict(&Tensor::full([16, 3, 32, 32], 0.3)).unwrap();
    assert_eq!((map.steps, map.classes), (1, 7));
    let map = model.predict(&Tensor::full([43, 3, 32, 32], 0.3)).unwrap();
    assert_eq!(map.steps, 7);
    for i in 0..map.steps {
        assert!((map.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert!(matches!(model.predict(&Tensor::full([20, 3, 28, 28], 0.3)), Err(Error::Dimension(_))));
}

#[test]
fn joint_objective_gradients() {
    let err = joint_objective_gradcheck(5, 1e-4, 0.05);
    assert!(err < 1e-4, "{err}");
    let err = joint_objective_gradcheck(6, 1e-2, 1.0);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gfw");
    let model = Model::<f32>::new(ModelConfig::tiny(5), 9).unwrap();
    model.save(&path).unwrap();
    model.config.save(&path.with_extension("cfg")).unwrap();
    let cfg = ModelConfig::load(&path.with_extension("cfg")).unwrap();
    let back = Model::<f32>::load(cfg, &path).unwrap();
    let frames = Tensor::from_fn([24, 3, 32, 32], |i| (i % 13) as f32 / 13.0);
    assert_eq!(model.predict(&frames).unwrap(), back.predict(&frames).unwrap());
    // A checkpoint for a different vocabulary is rejected.
    assert!(matches!(Model::<f32>::load(ModelConfig::tiny(6), &path), Err(Error::Format { .. })));
}

#[test]
fn initialization_is_seeded() {
    let a = Model::<f32>::new(ModelConfig::tiny(5), 1).unwrap();
    let b = Model::<f32>::new(ModelConfig::tiny(5), 1).unwrap();
    let c = Model::<f32>::new(ModelConfig::tiny(5), 2).unwrap();
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_ne!(a.params.tensors(), c.params.tensors());
}
