//! Deterministic synthetic gloss-video benchmark.
//!
//! Every gloss is rendered as a coloured cell glyph sliding along a
//! label-specific path; the slide's phase spans exactly the gloss's frames, so
//! ground-truth boundaries are known. Signers change background, brightness,
//! offset, noise level and signing speed.

mod glyph;
mod io;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use glyph::{glyph, signer_style, Glyph, SignerStyle, MAX_GLYPHS};
pub use io::{
    read_frames, save_frames, write_frames, DatasetManifest, FrameReader, ManifestHeader, SampleRecord, Split,
    FRAME_MAGIC,
};

use crate::parallel;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FRAME_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const MIN_GLOSS_FRAMES: usize = 8;
pub const MAX_GLOSS_FRAMES: usize = 24;
/// Shortest sequence the generator emits (the temporal window).
pub const MIN_FRAMES: usize = 16;
/// Extra frames per additional gloss (the temporal stride), so a sentence of
/// `n` glosses always spans at least `n` temporal steps.
pub const STEP_FRAMES: usize = 4;

/// One rendered sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: u32,
    /// `(t, 3, 32, 32)` in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Half-open `[start, end)` per gloss, partitioning `[0, t)`.
    pub boundaries: Vec<(usize, usize)>,
    pub signer_id: u32,
    pub speed: f64,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn vocab_names(v: usize) -> Vec<String> {
    (0..v).map(|i| format!("G{i:02}")).collect()
}

fn sample_rng(seed: u64, signer_id: u32, sentence: &[usize], salt: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(signer_id.to_le_bytes());
    for &l in sentence {
        h.update((l as u32).to_le_bytes());
    }
    h.update(salt.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d[..32].try_into().unwrap())
}

/// Render one sentence. `speed` scales every gloss's base duration.
pub fn gen_sample(vocab_size: usize, sentence: &[usize], signer_id: u32, speed: f64, seed: u64) -> Result<VideoSample> {
    if vocab_size > MAX_GLYPHS {
        return Err(Error::UnsupportedVocabulary(vocab_size));
    }
    if sentence.is_empty() {
        return Err(Error::Config("sentence must contain at least one gloss".into()));
    }
    if let Some(&bad) = sentence.iter().find(|&&l| l >= vocab_size) {
        return Err(Error::Config(format!("label {bad} outside vocabulary of {vocab_size}")));
    }
    if !(speed > 0.0) {
        return Err(Error::Config(format!("speed must be positive, got {speed}")));
    }
    let mut rng = sample_rng(seed, signer_id, sentence, "durations");
    let mut durations: Vec<usize> = sentence
        .iter()
        .map(|_| {
            let base = rng.random_range(MIN_GLOSS_FRAMES..=MAX_GLOSS_FRAMES) as f64;
            ((base * speed).round() as usize).max(1)
        })
        .collect();
    // Long enough for one temporal step per gloss.
    let min_total = MIN_FRAMES + STEP_FRAMES * (sentence.len() - 1);
    let total: usize = durations.iter().sum();
    if total < min_total {
        *durations.last_mut().unwrap() += min_total - total;
    }
    let mut boundaries = Vec::with_capacity(sentence.len());
    let mut start = 0;
    for &d in &durations {
        boundaries.push((start, start + d));
        start += d;
    }
    let t = start;

    let style = signer_style(signer_id);
    let plane = FRAME_SIZE * FRAME_SIZE;
    let mut data = vec![0f32; t * CHANNELS * plane];
    let mut noise_rng = sample_rng(seed, signer_id, sentence, "noise");
    let noise = Normal::new(0.0f32, style.noise).expect("valid sigma");
    for (&label, &(s, e)) in sentence.iter().zip(&boundaries) {
        let g = glyph(label);
        for f in s..e {
            let frame = &mut data[f * CHANNELS * plane..(f + 1) * CHANNELS * plane];
            for (c, chunk) in frame.chunks_mut(plane).enumerate() {
                chunk.fill(style.background[c]);
            }
            let phase = if e - s > 1 { (f - s) as f32 / (e - s - 1) as f32 } else { 0.5 };
            glyph::draw(frame, FRAME_SIZE, &g, phase, &style);
        }
    }
    for v in data.iter_mut() {
        *v = (*v + noise.sample(&mut noise_rng)).clamp(0.0, 1.0);
    }
    Ok(VideoSample {
        id: 0,
        frames: Tensor::new([t, CHANNELS, FRAME_SIZE, FRAME_SIZE], data)?,
        labels: sentence.to_vec(),
        boundaries,
        signer_id,
        speed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPolicy {
    /// Test sentences never occur in training (all signers seen).
    UnseenSentences,
    /// Test sentences come from training; test signers are held out.
    UnseenSigners,
}

impl SplitPolicy {
    pub fn name(self) -> &'static str {
        match self {
            SplitPolicy::UnseenSentences => "unseen-sentences",
            SplitPolicy::UnseenSigners => "unseen-signers",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unseen-sentences" => Ok(SplitPolicy::UnseenSentences),
            "unseen-signers" => Ok(SplitPolicy::UnseenSigners),
            other => Err(Error::Config(format!("unknown split policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub version: String,
    pub vocab_size: usize,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Signers `0..train_signers` sign training data.
    pub train_signers: u32,
    /// Signers `train_signers..train_signers + held_out_signers` only appear in
    /// the unseen-signers test split.
    pub held_out_signers: u32,
    pub seed: u64,
}

impl DatasetConfig {
    /// The default benchmark, "synth-v1".
    pub fn synth_v1(seed: u64) -> Self {
        DatasetConfig {
            version: "synth-v1".into(),
            vocab_size: 12,
            train_sentences: 300,
            test_sentences: 60,
            min_len: 2,
            max_len: 5,
            train_signers: 6,
            held_out_signers: 2,
            seed,
        }
    }
}

/// Samples of one split policy, in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub policy: SplitPolicy,
    pub vocab: Vec<String>,
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

/// Both split policies; the training split is shared.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: DatasetConfig,
    pub train: Vec<VideoSample>,
    pub test_unseen_sentences: Vec<VideoSample>,
    pub test_unseen_signers: Vec<VideoSample>,
}

struct Plan {
    id: u32,
    sentence: Vec<usize>,
    signer: u32,
    speed: f64,
}

fn random_sentence(rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> Vec<usize> {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut s: Vec<usize> = Vec::with_capacity(len);
    while s.len() < len {
        let l = rng.random_range(0..cfg.vocab_size);
        if s.last() != Some(&l) {
            s.push(l);
        }
    }
    s
}

/// Generate the benchmark as a pure function of `cfg`.
pub fn gen_benchmark(cfg: &DatasetConfig) -> Result<Benchmark> {
    if cfg.vocab_size > MAX_GLYPHS {
        return Err(Error::UnsupportedVocabulary(cfg.vocab_size));
    }
    if cfg.min_len < 1 || cfg.min_len > cfg.max_len || cfg.train_signers == 0 || cfg.held_out_signers == 0 {
        return Err(Error::Config("invalid dataset configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = BTreeSet::new();
    let distinct = |rng: &mut ChaCha8Rng, n: usize, seen: &mut BTreeSet<Vec<usize>>| -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * (n + 1) {
                return Err(Error::Config("vocabulary too small for the requested number of distinct sentences".into()));
            }
            let s = random_sentence(rng, cfg);
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        Ok(out)
    };
    let train_sents = distinct(&mut rng, cfg.train_sentences, &mut seen)?;
    let test_sents = distinct(&mut rng, cfg.test_sentences, &mut seen)?;
    let signer_speed = |rng: &mut ChaCha8Rng, signer: u32| signer_style(signer).speed * rng.random_range(0.95..1.05);

    let mut plans = Vec::new();
    let mut id = 0u32;
    for (i, s) in train_sents.iter().enumerate() {
        let signer = i as u32 % cfg.train_signers;
        plans.push(Plan { id, sentence: s.clone(), signer, speed: signer_speed(&mut rng, signer) });
        id += 1;
    }
    for (i, s) in test_sents.iter().enumerate() {
        let signer = i as u32 % cfg.train_signers;
        plans.push(Plan { id, sentence: s.clone(), signer, speed: signer_speed(&mut rng, signer) });
        id += 1;
    }
    for i in 0..cfg.test_sentences {
        let s = train_sents.choose(&mut rng).expect("non-empty training set").clone();
        let signer = cfg.train_signers + i as u32 % cfg.held_out_signers;
        plans.push(Plan { id, sentence: s, signer, speed: signer_speed(&mut rng, signer) });
        id += 1;
    }

    let mut samples = parallel::map(&plans, |p| {
        gen_sample(cfg.vocab_size, &p.sentence, p.signer, p.speed, cfg.seed).map(|mut s| {
            s.id = p.id;
            s
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let signers = samples.split_off(cfg.train_sentences + cfg.test_sentences);
    let sentences = samples.split_off(cfg.train_sentences);
    Ok(Benchmark {
        config: cfg.clone(),
        train: samples,
        test_unseen_sentences: sentences,
        test_unseen_signers: signers,
    })
}

impl Benchmark {
    pub fn dataset(&self, policy: SplitPolicy) -> Dataset {
        Dataset {
            policy,
            vocab: vocab_names(self.config.vocab_size),
            train: self.train.clone(),
            test: match policy {
                SplitPolicy::UnseenSentences => self.test_unseen_sentences.clone(),
                SplitPolicy::UnseenSigners => self.test_unseen_signers.clone(),
            },
        }
    }

    fn record(s: &VideoSample, split: Split) -> SampleRecord {
        SampleRecord {
            id: s.id,
            file: format!("frames/{:05}.gls", s.id),
            labels: s.labels.clone(),
            boundaries: s.boundaries.clone(),
            signer_id: s.signer_id,
            speed: s.speed,
            split,
        }
    }

    pub fn manifest(&self, policy: SplitPolicy) -> DatasetManifest {
        let test = match policy {
            SplitPolicy::UnseenSentences => &self.test_unseen_sentences,
            SplitPolicy::UnseenSigners => &self.test_unseen_signers,
        };
        DatasetManifest {
            header: ManifestHeader {
                version: self.config.version.clone(),
                seed: self.config.seed,
                policy: policy.name().into(),
                vocab: vocab_names(self.config.vocab_size),
            },
            samples: self
                .train
                .iter()
                .map(|s| Self::record(s, Split::Train))
                .chain(test.iter().map(|s| Self::record(s, Split::Test)))
                .collect(),
        }
    }

    /// Write frame files plus one manifest per split policy
    /// (`<policy>.jsonl`) under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("frames"))?;
        let all: Vec<&VideoSample> =
            self.train.iter().chain(&self.test_unseen_sentences).chain(&self.test_unseen_signers).collect();
        parallel::map(&all, |s| save_frames(&dir.join(format!("frames/{:05}.gls", s.id)), &s.frames))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        for policy in [SplitPolicy::UnseenSentences, SplitPolicy::UnseenSigners] {
            self.manifest(policy).save(&dir.join(format!("{}.jsonl", policy.name())))?;
        }
        Ok(())
    }
}

/// Load the samples referenced by a manifest; frame files resolve relative to
/// the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let policy = SplitPolicy::parse(&manifest.header.policy)?;
    let v = manifest.header.vocab.len();
    let load = |r: &SampleRecord| -> Result<VideoSample> {
        if let Some(&bad) = r.labels.iter().find(|&&l| l >= v) {
            return Err(Error::format(manifest_path, 0, format!("sample {} has label {bad} >= vocab {v}", r.id)));
        }
        let frames = read_frames(&dir.join(&r.file))?;
        Ok(VideoSample {
            id: r.id,
            frames,
            labels: r.labels.clone(),
            boundaries: r.boundaries.clone(),
            signer_id: r.signer_id,
            speed: r.speed,
        })
    };
    let records: Vec<&SampleRecord> = manifest.samples.iter().collect();
    let loaded = parallel::map(&records, |r| load(r)).into_iter().collect::<Result<Vec<_>>>()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, s) in manifest.samples.iter().zip(loaded) {
        match r.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok(Dataset { policy, vocab: manifest.header.vocab, train, test })
}
