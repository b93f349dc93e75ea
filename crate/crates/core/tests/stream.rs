mod common;

use glossnet::datagen::{gen_benchmark, DatasetConfig};
use glossnet::model::{Model, ModelConfig};
use glossnet::stream::{stream_clip, StreamSession};
use glossnet::tensor::Tensor;
use glossnet::train::eval_view;

fn model() -> Model<f32> {
    Model::new(ModelConfig::tiny(12), 8).unwrap()
}

#[test]
fn streamed_rows_equal_offline_rows() {
    let m = model();
    let bench = gen_benchmark(&DatasetConfig { train_sentences: 1, test_sentences: 4, ..DatasetConfig::synth_v1(5) }).unwrap();
    for s in &bench.test_unseen_sentences {
        let offline = m.predict(&eval_view(&s.frames, &m.config).unwrap()).unwrap();
        let (em, hyp, _) = stream_clip(&m, &s.frames, 1).unwrap();
        let rows: Vec<f32> = em.iter().flat_map(|e| e.log_probs.clone()).collect();
        assert_eq!(rows, offline.log_probs);
        assert_eq!(hyp, offline.greedy().1);
        let words: Vec<usize> = em.iter().filter_map(|e| e.word).collect();
        assert_eq!(words, hyp);
    }
}

#[test]
fn chunking_does_not_change_emissions() {
    let m = model();
    let frames = Tensor::from_fn([61, 3, 32, 32], |i| ((i * 7919) % 255) as f32 / 255.0);
    let (a, ha, _) = stream_clip(&m, &frames, 1).unwrap();
    let (b, hb, _) = stream_clip(&m, &frames, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn buffer_is_bounded_for_long_streams() {
    let m = model();
    let frame = |i: usize| Tensor::from_fn([3, 32, 32], |j| ((i * 31 + j) % 17) as f32 / 17.0);
    let mut short = StreamSession::new(&m);
    for i in 0..60 {
        short.push(&frame(i)).unwrap();
    }
    let mut long = StreamSession::new(&m);
    for i in 0..600 {
        long.push(&frame(i)).unwrap();
    }
    assert_eq!(short.high_water_mark(), long.high_water_mark());
    assert!(long.high_water_mark() <= long.capacity());
    assert_eq!(long.emitted_steps(), (600 - 16) / 4);
    let (tail, _) = long.finish().unwrap();
    assert_eq!(tail.len(), 1);
    assert_eq!(long.emitted_steps(), (600 - 16) / 4 + 1);
}
