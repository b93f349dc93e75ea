use glossnet::datagen::{self, gen_benchmark, DatasetConfig, SplitPolicy};
use glossnet::Error;

#[test]
fn written_dataset_loads_back_bit_exact() {
    let bench = gen_benchmark(&DatasetConfig { train_sentences: 5, test_sentences: 3, ..DatasetConfig::synth_v1(8) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bench.write(dir.path()).unwrap();
    for policy in [SplitPolicy::UnseenSentences, SplitPolicy::UnseenSigners] {
        let ds = datagen::load_dataset(&dir.path().join(format!("{}.jsonl", policy.name()))).unwrap();
        let expect = bench.dataset(policy);
        assert_eq!(ds.train, expect.train);
        assert_eq!(ds.test, expect.test);
        assert_eq!(ds.vocab, expect.vocab);
    }
    let first = std::fs::read_to_string(dir.path().join("unseen-sentences.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(header["seed"], 8);
    assert_eq!(header["version"], "synth-v1");
    assert_eq!(header["vocab"].as_array().unwrap().len(), 12);
}

#[test]
fn corrupt_frame_file_reports_path_and_offset() {
    let bench = gen_benchmark(&DatasetConfig { train_sentences: 1, test_sentences: 1, ..DatasetConfig::synth_v1(8) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.gls");
    datagen::save_frames(&p, &bench.train[0].frames).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    match datagen::read_frames(&p) {
        Err(Error::Format { path, offset, .. }) => {
            assert_eq!(path, p);
            assert!(offset > 20);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn splits_follow_policies() {
    let bench = gen_benchmark(&DatasetConfig::synth_v1(1)).unwrap();
    let train_sents: std::collections::HashSet<_> = bench.train.iter().map(|s| s.labels.clone()).collect();
    assert!(bench.test_unseen_sentences.iter().all(|s| !train_sents.contains(&s.labels)));
    let train_signers: std::collections::HashSet<_> = bench.train.iter().map(|s| s.signer_id).collect();
    assert!(bench.test_unseen_signers.iter().all(|s| !train_signers.contains(&s.signer_id)));
    for s in bench.train.iter().chain(&bench.test_unseen_sentences) {
        assert!(s.len() >= 16 + 4 * (s.labels.len() - 1));
        assert_eq!(s.boundaries.first().unwrap().0, 0);
        assert_eq!(s.boundaries.last().unwrap().1, s.len());
        assert!(s.boundaries.windows(2).all(|w| w[0].1 == w[1].0));
    }
    assert_eq!(bench.train.len(), 300);
    assert_eq!(bench.test_unseen_sentences.len(), 60);
}
