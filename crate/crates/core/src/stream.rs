//! Incremental recognition with bounded memory.
//!
//! Frames are encoded one at a time into frame features kept in a ring of
//! `l + δ` rows. Each time a full window is present its first-level gloss
//! feature is computed; the second-level encoder sees a three-slot ring of
//! those, so step `i` is emitted once step `i + 1` exists. Every computation
//! uses inference-mode normalization, which makes the emitted rows equal the
//! rows of an offline pass over the whole clip.

use std::collections::VecDeque;

use crate::ctc;
use crate::model::{Mode, Model};
use crate::tensor::{Tape, Tensor};
use crate::train::{crop_origin, prepare_frame};
use crate::{Error, Result};

/// One emitted prediction row.
#[derive(Clone, Debug, PartialEq)]
pub struct Emission {
    pub step: usize,
    /// Index of the newest frame received when the step was emitted.
    pub frame: usize,
    /// `(u,)` log-probabilities.
    pub log_probs: Vec<f32>,
    /// Newly recognized gloss, if this step extends the hypothesis.
    pub word: Option<usize>,
}

pub struct StreamSession<'m> {
    model: &'m Model<f32>,
    origin: (usize, usize),
    /// Frame features of the most recent frames; front is frame `base`.
    features: VecDeque<Vec<f32>>,
    base: usize,
    frames_seen: usize,
    /// First-level features not yet consumed as right context, oldest first,
    /// with their step index. Holds at most three.
    g_ring: VecDeque<(usize, Vec<f32>)>,
    steps_computed: usize,
    emitted_steps: usize,
    last_class: Option<usize>,
    hypothesis: Vec<usize>,
    finished: bool,
    high_water: usize,
}

impl<'m> StreamSession<'m> {
    pub fn new(model: &'m Model<f32>) -> Self {
        let (l, d) = (model.config.window, model.config.stride);
        StreamSession {
            model,
            origin: crop_origin(&model.config, None),
            features: VecDeque::with_capacity(l + d),
            base: 0,
            frames_seen: 0,
            g_ring: VecDeque::with_capacity(3),
            steps_computed: 0,
            emitted_steps: 0,
            last_class: None,
            hypothesis: Vec::new(),
            finished: false,
            high_water: 0,
        }
    }

    /// Frame-feature rows the buffer may hold.
    pub fn capacity(&self) -> usize {
        self.model.config.window + self.model.config.stride
    }

    /// Largest number of frame-feature rows ever buffered.
    pub fn high_water_mark(&self) -> usize {
        self.high_water
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn emitted_steps(&self) -> usize {
        self.emitted_steps
    }

    pub fn hypothesis(&self) -> &[usize] {
        &self.hypothesis
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Feed one `(c, h, w)` frame at source resolution.
    pub fn push(&mut self, frame: &Tensor<f32>) -> Result<Vec<Emission>> {
        if self.finished {
            return Err(Error::Usage("push after finish".into()));
        }
        if frame.rank() != 3 {
            return Err(Error::dim(format!("stream frames must be (c, h, w), got {:?}", frame.shape())));
        }
        let cfg = &self.model.config;
        let input = prepare_frame(frame.data(), frame.shape(), cfg, self.origin)?;
        let x = Tensor::new([1, cfg.input_channels, cfg.input_height, cfg.input_width], input)?;
        let feature = self.encode_frame(x)?;
        self.features.push_back(feature);
        self.frames_seen += 1;
        self.high_water = self.high_water.max(self.features.len());

        let mut out = Vec::new();
        let (l, d) = (cfg.window, cfg.stride);
        // Step j needs frames j*d .. j*d + l.
        let next = self.steps_computed;
        if self.frames_seen == next * d + l {
            let start = next * d - self.base;
            let g = self.encode_window(start)?;
            self.g_ring.push_back((next, g));
            self.steps_computed += 1;
            // Frames before the next window start are no longer needed.
            let keep_from = self.steps_computed * d;
            while self.base < keep_from && !self.features.is_empty() {
                self.features.pop_front();
                self.base += 1;
            }
            if self.steps_computed >= 2 {
                out.push(self.emit(false)?);
            }
        }
        debug_assert!(self.features.len() <= self.capacity());
        Ok(out)
    }

    /// Push every frame of a `(t, c, h, w)` clip.
    pub fn push_all(&mut self, frames: &Tensor<f32>) -> Result<Vec<Emission>> {
        let mut out = Vec::new();
        for i in 0..frames.shape()[0] {
            let f = frames.slice_outer(i, i + 1)?.reshape(frames.shape()[1..].to_vec())?;
            out.extend(self.push(&f)?);
        }
        Ok(out)
    }

    /// Flush the final step and return the full hypothesis.
    pub fn finish(&mut self) -> Result<(Vec<Emission>, Vec<usize>)> {
        if self.finished {
            return Err(Error::Usage("finish called twice".into()));
        }
        self.finished = true;
        let mut out = Vec::new();
        if self.steps_computed > self.emitted_steps {
            out.push(self.emit(true)?);
        }
        Ok((out, self.hypothesis.clone()))
    }

    fn encode_frame(&self, x: Tensor<f32>) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let mut pass = self.model.begin(&mut tape, Mode::Infer, false);
        let x = tape.constant(x);
        let s = pass.encode_frames(&mut tape, x)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// First-level feature of the window starting at buffer row `start`.
    fn encode_window(&self, start: usize) -> Result<Vec<f32>> {
        let l = self.model.config.window;
        let f_s = self.model.config.f_s;
        let mut data = Vec::with_capacity(l * f_s);
        for row in self.features.range(start..start + l) {
            data.extend_from_slice(row);
        }
        let mut tape = Tape::new();
        let mut pass = self.model.begin(&mut tape, Mode::Infer, false);
        let s = tape.constant(Tensor::new([l, f_s], data)?);
        let g = pass.encode_gloss_level1(&mut tape, s)?;
        Ok(tape.value(g).data().to_vec())
    }

    /// Emit the oldest unemitted step; `last` marks the end of the stream, so
    /// the right neighbour is zero.
    fn emit(&mut self, last: bool) -> Result<Emission> {
        let cfg = &self.model.config;
        let step = self.emitted_steps;
        let f_g = cfg.f_g;
        let find = |j: usize| self.g_ring.iter().find(|(s, _)| *s == j).map(|(_, g)| g.as_slice());
        let zeros = vec![0.0f32; f_g];
        let left = if step == 0 { &zeros[..] } else { find(step - 1).expect("left context buffered") };
        let centre = find(step).expect("centre buffered");
        let right = if last { &zeros[..] } else { find(step + 1).expect("right context buffered") };
        let mut data = Vec::with_capacity(3 * f_g);
        for row in [left, centre, right] {
            data.extend_from_slice(row);
        }
        let mut tape = Tape::new();
        let mut pass = self.model.begin(&mut tape, Mode::Infer, false);
        let g = tape.constant(Tensor::new([3, f_g], data)?);
        let g2 = pass.encode_gloss_level2(&mut tape, g)?;
        let lp = pass.decode_head(&mut tape, g2)?;
        let u = cfg.classes();
        // The middle output sees exactly the offline context of `step`.
        let row = tape.value(lp).data()[u..2 * u].to_vec();

        let class = ctc::argmax(&row);
        let word = (class != cfg.blank() && Some(class) != self.last_class).then_some(class);
        self.last_class = Some(class);
        if let Some(w) = word {
            self.hypothesis.push(w);
        }
        self.emitted_steps += 1;
        while self.g_ring.front().is_some_and(|(s, _)| *s + 1 < self.emitted_steps) {
            self.g_ring.pop_front();
        }
        Ok(Emission { step, frame: self.frames_seen.saturating_sub(1), log_probs: row, word })
    }
}

/// Stream a whole clip through a fresh session, `chunk` frames at a time.
pub fn stream_clip(model: &Model<f32>, frames: &Tensor<f32>, chunk: usize) -> Result<(Vec<Emission>, Vec<usize>, usize)> {
    let mut session = StreamSession::new(model);
    let mut out = Vec::new();
    let t = frames.shape()[0];
    let mut i = 0;
    while i < t {
        let end = (i + chunk.max(1)).min(t);
        out.extend(session.push_all(&frames.slice_outer(i, end)?)?);
        i = end;
    }
    let (tail, hyp) = session.finish()?;
    out.extend(tail);
    Ok((out, hyp, session.high_water_mark()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model<f32> {
        Model::new(ModelConfig::tiny(5), 3).unwrap()
    }

    fn clip(t: usize) -> Tensor<f32> {
        Tensor::from_fn([t, 3, 32, 32], |i| ((i * 2654435761) % 1000) as f32 / 1000.0)
    }

    #[test]
    fn first_emission_after_window_plus_stride() {
        let m = model();
        let mut s = StreamSession::new(&m);
        let frames = clip(20);
        let first = s.push_all(&frames.slice_outer(0, 19).unwrap()).unwrap();
        assert!(first.is_empty());
        let next = s.push_all(&frames.slice_outer(19, 20).unwrap()).unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].step, 0);
        assert_eq!(next[0].frame, 19);
    }

    #[test]
    fn short_stream_yields_nothing() {
        let m = model();
        let (em, hyp, _) = stream_clip(&m, &clip(15), 1).unwrap();
        assert!(em.is_empty() && hyp.is_empty());
    }

    #[test]
    fn push_after_finish_is_usage_error() {
        let m = model();
        let mut s = StreamSession::new(&m);
        s.finish().unwrap();
        assert!(matches!(s.push(&Tensor::zeros([3, 32, 32])), Err(Error::Usage(_))));
    }

    #[test]
    fn rows_match_offline() {
        let m = model();
        let frames = clip(47);
        let offline = m.predict(&crate::train::eval_view(&frames, &m.config).unwrap()).unwrap();
        let (em, hyp, hw) = stream_clip(&m, &frames, 7).unwrap();
        assert_eq!(em.len(), offline.steps);
        for (i, e) in em.iter().enumerate() {
            assert_eq!(e.step, i);
            assert_eq!(&e.log_probs[..], &offline.log_probs[i * offline.classes..(i + 1) * offline.classes]);
        }
        assert_eq!(hyp, offline.greedy().1);
        assert!(hw <= 20);
    }
}
