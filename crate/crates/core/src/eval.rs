//! Word error rate, real-world simulation scenarios and evaluation reports.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::VideoSample;
use crate::model::Model;
use crate::parallel;
use crate::tensor::Tensor;
use crate::train::{eval_view, gather_frames};
use crate::{Error, Result};

/// Edit operations of a minimal alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// Minimal unit-cost edit alignment between `reference` and `hypothesis`.
pub fn edit_counts(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]) {
            counts.substitutions += usize::from(reference[i - 1] != hypothesis[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// `(sub + ins + del) / |reference|`. An empty reference is only defined
/// against an empty hypothesis.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return if hypothesis.is_empty() { Ok(0.0) } else { Err(Error::EmptyReference(hypothesis.len())) };
    }
    Ok(edit_counts(reference, hypothesis).total() as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioKind {
    Original,
    Split(usize),
    Concat(usize),
    ConcatAll,
    RandRepli,
    Shuffle,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioKind::Original => write!(f, "original"),
            ScenarioKind::Split(k) => write!(f, "split-{k}"),
            ScenarioKind::Concat(k) => write!(f, "concat-{k}"),
            ScenarioKind::ConcatAll => write!(f, "concat-all"),
            ScenarioKind::RandRepli => write!(f, "rand-repli"),
            ScenarioKind::Shuffle => write!(f, "shuffle"),
        }
    }
}

impl ScenarioKind {
    /// Parse `kind` with an optional `k` for split/concat.
    pub fn parse(kind: &str, k: Option<usize>) -> Result<Self> {
        let need_k = |k: Option<usize>| match k {
            Some(k) if k >= 2 => Ok(k),
            Some(k) => Err(Error::Config(format!("{kind} needs k >= 2, got {k}"))),
            None => Err(Error::Config(format!("{kind} needs k"))),
        };
        match kind.replace('_', "-").as_str() {
            "original" => Ok(ScenarioKind::Original),
            "split" => Ok(ScenarioKind::Split(need_k(k)?)),
            "concat" => Ok(ScenarioKind::Concat(need_k(k)?)),
            "concat-all" => Ok(ScenarioKind::ConcatAll),
            "rand-repli" => Ok(ScenarioKind::RandRepli),
            "shuffle" => Ok(ScenarioKind::Shuffle),
            other => match other.split_once('-') {
                Some(("split" | "concat", n)) => {
                    let n = n.parse().map_err(|_| Error::Config(format!("bad scenario {other:?}")))?;
                    Self::parse(other.split('-').next().unwrap_or_default(), Some(n))
                }
                _ => Err(Error::Config(format!("unknown scenario {kind:?}"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub repli_frames: usize,
    pub repli_copies: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        ScenarioSpec { kind, repli_frames: 5, repli_copies: 12, seed }
    }

    /// Original plus the six robustness scenarios.
    pub fn battery(seed: u64) -> Vec<ScenarioSpec> {
        [
            ScenarioKind::Original,
            ScenarioKind::Split(2),
            ScenarioKind::Split(3),
            ScenarioKind::Concat(2),
            ScenarioKind::Concat(3),
            ScenarioKind::RandRepli,
            ScenarioKind::Shuffle,
        ]
        .into_iter()
        .map(|k| Self::new(k, seed))
        .collect()
    }
}

/// One scenario input with its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioItem {
    pub id: String,
    pub frames: Tensor<f32>,
    pub reference: Vec<usize>,
}

impl ScenarioItem {
    fn from_sample(s: &VideoSample) -> Self {
        ScenarioItem { id: s.id.to_string(), frames: s.frames.clone(), reference: s.labels.clone() }
    }
}

fn midpoint((s, e): (usize, usize)) -> f64 {
    (s + e) as f64 / 2.0
}

/// Cut points of `k` equal spans over `t` frames, with spans shorter than
/// `min_len` merged into a neighbour.
pub fn split_spans(t: usize, k: usize, min_len: usize) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = (0..k).map(|i| (i * t / k, (i + 1) * t / k)).collect();
    while spans.len() > 1 {
        let Some(i) = spans.iter().position(|&(s, e)| e - s < min_len) else { break };
        log::info!("split span {:?} shorter than {min_len}, merged", spans[i]);
        if i > 0 {
            spans[i - 1].1 = spans[i].1;
        } else {
            spans[1].0 = spans[0].0;
        }
        spans.remove(i);
    }
    spans
}

fn split(s: &VideoSample, k: usize, min_len: usize) -> Result<Vec<ScenarioItem>> {
    let refs_of = |(start, end): (usize, usize)| -> Vec<usize> {
        s.labels
            .iter()
            .zip(&s.boundaries)
            .filter(|(_, &b)| (start as f64..end as f64).contains(&midpoint(b)))
            .map(|(&l, _)| l)
            .collect()
    };
    let mut spans = split_spans(s.len(), k, min_len);
    // A span holding no gloss midpoint has no reference; fold it into a neighbour.
    while spans.len() > 1 {
        let Some(i) = spans.iter().position(|&sp| refs_of(sp).is_empty()) else { break };
        log::info!("split span {:?} of sample {} has no gloss, merged", spans[i], s.id);
        if i > 0 {
            spans[i - 1].1 = spans[i].1;
        } else {
            spans[1].0 = spans[0].0;
        }
        spans.remove(i);
    }
    spans
        .into_iter()
        .enumerate()
        .map(|(part, sp)| {
            Ok(ScenarioItem {
                id: format!("{}.{part}", s.id),
                frames: s.frames.slice_outer(sp.0, sp.1)?,
                reference: refs_of(sp),
            })
        })
        .collect()
}

fn concat(group: &[VideoSample]) -> Result<ScenarioItem> {
    let parts: Vec<&Tensor<f32>> = group.iter().map(|s| &s.frames).collect();
    Ok(ScenarioItem {
        id: group.iter().map(|s| s.id.to_string()).collect::<Vec<_>>().join("+"),
        frames: Tensor::concat_outer(&parts)?,
        reference: group.iter().flat_map(|s| s.labels.iter().copied()).collect(),
    })
}

/// Source frame index sequence for rand-repli: `frames` distinct positions,
/// each replaced in place by `copies` copies.
pub fn repli_indices(t: usize, frames: usize, copies: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let picked = index::sample(rng, t, frames.min(t)).into_vec();
    let mut idx = Vec::with_capacity(t + picked.len() * copies.saturating_sub(1));
    for i in 0..t {
        let n = if picked.contains(&i) { copies } else { 1 };
        idx.extend(std::iter::repeat_n(i, n));
    }
    idx
}

/// Source frame index sequence for shuffle: the second half is inserted at the
/// temporal midpoint of the first half.
pub fn shuffle_indices(t: usize) -> Vec<usize> {
    let h = t / 2;
    let m = h / 2;
    (0..m).chain(h..t).chain(m..h).collect()
}

/// Position of source frame position `p` (possibly fractional) after
/// [`shuffle_indices`].
fn shuffled_position(p: f64, t: usize) -> f64 {
    let h = (t / 2) as f64;
    let m = ((t / 2) / 2) as f64;
    if p < m {
        p
    } else if p < h {
        p + (t as f64 - h)
    } else {
        p - h + m
    }
}

fn shuffle(s: &VideoSample) -> Result<ScenarioItem> {
    let t = s.len();
    let mut order: Vec<(f64, usize)> =
        s.labels.iter().zip(&s.boundaries).map(|(&l, &b)| (shuffled_position(midpoint(b), t), l)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(ScenarioItem {
        id: s.id.to_string(),
        frames: gather_frames(&s.frames, &shuffle_indices(t))?,
        reference: order.into_iter().map(|(_, l)| l).collect(),
    })
}

/// Build a scenario as a pure function of `samples` and `spec`. `min_len` is
/// the model window; split spans shorter than it are merged.
pub fn make_scenario(samples: &[VideoSample], spec: &ScenarioSpec, min_len: usize) -> Result<Vec<ScenarioItem>> {
    match spec.kind {
        ScenarioKind::Original => Ok(samples.iter().map(ScenarioItem::from_sample).collect()),
        ScenarioKind::Split(k) => {
            let mut out = Vec::new();
            for s in samples {
                out.extend(split(s, k, min_len)?);
            }
            Ok(out)
        }
        ScenarioKind::Concat(k) => samples.chunks(k).map(concat).collect(),
        ScenarioKind::ConcatAll => {
            if samples.is_empty() {
                return Ok(Vec::new());
            }
            Ok(vec![concat(samples)?])
        }
        ScenarioKind::RandRepli => samples
            .iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(s.id as u64);
                let idx = repli_indices(s.len(), spec.repli_frames, spec.repli_copies, &mut rng);
                Ok(ScenarioItem { id: s.id.to_string(), frames: gather_frames(&s.frames, &idx)?, reference: s.labels.clone() })
            })
            .collect(),
        ScenarioKind::Shuffle => samples.iter().map(shuffle).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub wer: f64,
    pub counts: EditCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub samples: usize,
    pub mean_wer: f64,
    pub reference_words: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub scenario: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn from_rows(scenario: impl Into<String>, rows: Vec<ReportRow>) -> Self {
        Report { scenario: scenario.into(), rows }
    }

    /// Mean of per-sample WERs.
    pub fn mean_wer(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.wer).sum::<f64>() / self.rows.len() as f64
    }

    pub fn summary(&self) -> Summary {
        let mut totals = EditCounts::default();
        for r in &self.rows {
            totals.add(&r.counts);
        }
        Summary {
            scenario: self.scenario.clone(),
            samples: self.rows.len(),
            mean_wer: self.mean_wer(),
            reference_words: self.rows.iter().map(|r| r.reference.len()).sum(),
            substitutions: totals.substitutions,
            insertions: totals.insertions,
            deletions: totals.deletions,
        }
    }

    pub fn write_csv<W: Write>(&self, out: &mut W, vocab: &[String]) -> Result<()> {
        let words = |seq: &[usize]| seq.iter().map(|&l| vocab.get(l).cloned().unwrap_or_else(|| l.to_string())).collect::<Vec<_>>().join(" ");
        writeln!(out, "id,reference,hypothesis,wer")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{:.6}", r.id, words(&r.reference), words(&r.hypothesis), r.wer)?;
        }
        Ok(())
    }

    /// Write `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, stem: &Path, vocab: &[String]) -> Result<()> {
        let mut csv = Vec::new();
        self.write_csv(&mut csv, vocab)?;
        std::fs::write(stem.with_extension("csv"), csv)?;
        let json = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(stem.with_extension("json"), json + "\n")?;
        Ok(())
    }
}

pub fn score(id: String, reference: Vec<usize>, hypothesis: Vec<usize>) -> Result<ReportRow> {
    let wer = wer(&reference, &hypothesis)?;
    let counts = edit_counts(&reference, &hypothesis);
    Ok(ReportRow { id, reference, hypothesis, wer, counts })
}

/// Offline greedy hypothesis for raw `(t, c, h, w)` frames; empty if the clip
/// is shorter than the model window.
pub fn decode(model: &Model<f32>, frames: &Tensor<f32>) -> Result<Vec<usize>> {
    if model.config.steps_for(frames.shape()[0]).is_none() {
        return Ok(Vec::new());
    }
    let view = eval_view(frames, &model.config)?;
    Ok(model.predict(&view)?.greedy().1)
}

/// Greedy-decode every item and score it against its reference.
pub fn evaluate(model: &Model<f32>, items: &[ScenarioItem], scenario: impl Into<String>) -> Result<Report> {
    let rows = parallel::map(items, |it| score(it.id.clone(), it.reference.clone(), decode(model, &it.frames)?));
    Ok(Report::from_rows(scenario, rows.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Build and score a scenario. Concat-all runs through the streaming session,
/// the other kinds through offline inference.
pub fn run_scenario(model: &Model<f32>, samples: &[VideoSample], spec: &ScenarioSpec) -> Result<Report> {
    let items = make_scenario(samples, spec, model.config.window)?;
    if spec.kind != ScenarioKind::ConcatAll {
        return evaluate(model, &items, spec.kind.to_string());
    }
    let mut rows = Vec::new();
    for it in items {
        let (_, hyp, _) = crate::stream::stream_clip(model, &it.frames, 1)?;
        rows.push(score(it.id, it.reference, hyp)?);
    }
    Ok(Report::from_rows(spec.kind.to_string(), rows))
}
