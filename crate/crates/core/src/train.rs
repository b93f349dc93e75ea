//! Joint CTC + GFE training loop with augmentation, learning-rate schedule and
//! periodic alignment-proposal refresh.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc;
use crate::datagen::VideoSample;
use crate::gfe::{self, LossBreakdown, Proposal, ProposalCache};
use crate::model::{Mode, Model, ModelConfig};
use crate::parallel;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: u32,
    /// Epochs (1-based) at whose start the learning rate halves.
    pub lr_halving_epochs: Vec<u32>,
    /// First epoch with GFE supervision; `None` disables GFE entirely.
    pub gfe_start_epoch: Option<u32>,
    pub proposal_refresh_every: u32,
    /// Magnitude of the temporal scaling factor; 0 disables it.
    pub temporal_aug: f64,
    pub spatial_aug: bool,
    /// Weight blank GFE steps by the balance ratio; plain cross-entropy otherwise.
    pub balance_ratio: bool,
    /// Sequences per optimizer step.
    pub accumulation: usize,
    pub seed: u64,
    /// Where to persist proposals after each refresh.
    pub proposal_cache: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale schedule used for the synthetic benchmark.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            lambda1: 1e-4,
            lambda2: 0.05,
            epochs: 40,
            lr_halving_epochs: vec![20, 30],
            gfe_start_epoch: Some(8),
            proposal_refresh_every: 5,
            temporal_aug: 0.2,
            spatial_aug: true,
            balance_ratio: true,
            accumulation: 4,
            seed,
            proposal_cache: None,
        }
    }

    /// The published schedule.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 80,
            lr_halving_epochs: vec![40, 60],
            gfe_start_epoch: Some(15),
            proposal_refresh_every: 10,
            accumulation: 1,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gfe_start_epoch == Some(0) {
            return Err(Error::Config("gfe_start_epoch must be >= 1".into()));
        }
        if self.proposal_refresh_every == 0 {
            return Err(Error::Config("proposal_refresh_every must be >= 1".into()));
        }
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.temporal_aug) {
            return Err(Error::Config(format!("temporal_aug {} outside [0, 1)", self.temporal_aug)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: u32) -> f64 {
        let halvings = self.lr_halving_epochs.iter().filter(|&&h| h <= epoch).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }

    pub fn gfe_active(&self, epoch: u32) -> bool {
        self.lambda2 > 0.0 && self.gfe_start_epoch.is_some_and(|s| epoch >= s)
    }

    /// Whether proposals are regenerated at the start of `epoch`.
    pub fn refresh_at(&self, epoch: u32) -> bool {
        match self.gfe_start_epoch {
            Some(s) if self.lambda2 > 0.0 && epoch >= s => (epoch - s).is_multiple_of(self.proposal_refresh_every),
            _ => false,
        }
    }
}

/// Resample `t` frames to `round(t * (1 + factor))` by evenly spaced index
/// selection. Falls back to the identity if the result would be shorter than
/// `min_len`.
pub fn temporal_indices(t: usize, factor: f64, min_len: usize) -> Vec<usize> {
    let scaled = (t as f64 * (1.0 + factor)).round() as usize;
    if factor == 0.0 || scaled < min_len || scaled == 0 {
        return (0..t).collect();
    }
    (0..scaled).map(|j| j * t / scaled).collect()
}

pub fn temporal_augment(frames: &Tensor<f32>, factor: f64, min_len: usize) -> Result<Tensor<f32>> {
    let idx = temporal_indices(frames.shape()[0], factor, min_len);
    gather_frames(frames, &idx)
}

pub fn gather_frames(frames: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let frame_len: usize = frames.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * frame_len);
    for &i in idx {
        data.extend_from_slice(&frames.data()[i * frame_len..(i + 1) * frame_len]);
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Bilinear resize of one `(c, h, w)` frame with half-pixel centres.
fn resize_bilinear(src: &[f32], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| coord(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| coord(o, w, out_w)).collect();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Crop origin inside the resized frame: random when `rng` is given, centred
/// otherwise.
pub fn crop_origin(config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (usize, usize) {
    let slack_y = config.resize - config.input_height;
    let slack_x = config.resize - config.input_width;
    match rng {
        Some(r) => (r.random_range(0..=slack_y), r.random_range(0..=slack_x)),
        None => (slack_y / 2, slack_x / 2),
    }
}

/// Resize one `(c, h, w)` frame to `resize` and crop the model input at `origin`.
pub fn prepare_frame(frame: &[f32], shape: &[usize], config: &ModelConfig, origin: (usize, usize)) -> Result<Vec<f32>> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c != config.input_channels {
        return Err(Error::dim(format!("frames have {c} channels, model expects {}", config.input_channels)));
    }
    let (r, ih, iw) = (config.resize, config.input_height, config.input_width);
    let big = resize_bilinear(frame, c, h, w, r, r);
    let mut out = Vec::with_capacity(c * ih * iw);
    for ch in 0..c {
        for y in 0..ih {
            let row = (ch * r + origin.0 + y) * r + origin.1;
            out.extend_from_slice(&big[row..row + iw]);
        }
    }
    Ok(out)
}

/// Resize and crop a `(t, c, h, w)` clip; one crop position for the whole clip.
pub fn spatial_augment(frames: &Tensor<f32>, config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<f32>> {
    let shape = frames.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("frames must be rank 4, got {shape:?}")));
    }
    let origin = crop_origin(config, rng);
    let frame_len: usize = shape[1..].iter().product();
    let rows = parallel::map_range(shape[0], |i| {
        prepare_frame(&frames.data()[i * frame_len..(i + 1) * frame_len], &shape[1..], config, origin)
    });
    let mut data = Vec::with_capacity(shape[0] * config.input_channels * config.input_height * config.input_width);
    for r in rows {
        data.extend(r?);
    }
    Tensor::new([shape[0], config.input_channels, config.input_height, config.input_width], data)
}

/// The deterministic evaluation view of a clip.
pub fn eval_view(frames: &Tensor<f32>, config: &ModelConfig) -> Result<Tensor<f32>> {
    spatial_augment(frames, config, None)
}

/// Per-epoch training metrics; one CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub l_ctc: f64,
    /// Mean over samples that received GFE supervision.
    pub l_gfe: Option<f64>,
    pub l_reg: f64,
    pub lr: f64,
    pub train_wer_greedy: f64,
    pub skipped: usize,
}

pub const METRICS_HEADER: &str = "epoch,l_ctc,l_gfe,l_reg,lr,train_wer_greedy,skipped";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{:.6},{:e},{:.6},{}",
            self.epoch,
            self.l_ctc,
            self.l_gfe.map(|v| format!("{v:.6}")).unwrap_or_default(),
            self.l_reg,
            self.lr,
            self.train_wer_greedy,
            self.skipped
        )
    }
}

pub fn write_metrics<W: Write>(out: &mut W, metrics: &[EpochMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(out, "{}", m.csv_row())?;
    }
    Ok(())
}

pub fn save_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, metrics)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Record of one proposal regeneration.
#[derive(Clone, Debug, PartialEq)]
pub struct RefreshRecord {
    pub epoch: u32,
    pub proposals: usize,
    /// True if any proposal was computed from augmented frames. Always false
    /// unless the pipeline is broken; kept as an audit hook.
    pub augmented_inputs: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub refreshes: Vec<RefreshRecord>,
    pub proposals: ProposalCache,
    /// Samples whose GFE term was dropped because the cached proposal could
    /// not be mapped onto the augmented length.
    pub gfe_dropped: usize,
}

/// Outcome of one training sequence.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub wer: f64,
    pub used_gfe: bool,
}

fn sample_rng(seed: u64, epoch: u32, id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | id as u64);
    rng
}

/// Stretch or squeeze a proposal onto `k` steps by nearest-index sampling;
/// `None` if the result no longer collapses to `labels`.
pub fn fit_proposal(path: &[usize], k: usize, labels: &[usize], blank: usize) -> Option<Vec<usize>> {
    if path.len() == k {
        return Some(path.to_vec());
    }
    if path.is_empty() {
        return None;
    }
    let fitted: Vec<usize> = (0..k).map(|j| path[j * path.len() / k]).collect();
    (ctc::collapse(&fitted, blank) == labels).then_some(fitted)
}

/// Indices of the parameters under the L2 penalty (conv and linear weights).
pub fn regularized_params(model: &Model<f32>) -> Vec<usize> {
    model.params.names().iter().enumerate().filter(|(_, n)| n.ends_with(".w")).map(|(i, _)| i).collect()
}

/// Pick augmented frames for a sample; infeasible augmentations fall back to
/// the unscaled clip. Returns `None` if even that is infeasible.
fn training_view(
    sample: &VideoSample,
    config: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Tensor<f32>>> {
    let t = sample.len();
    let factor = if cfg.temporal_aug > 0.0 {
        [cfg.temporal_aug, -cfg.temporal_aug, 0.0][rng.random_range(0..3)]
    } else {
        0.0
    };
    let spatial = if cfg.spatial_aug { spatial_augment(&sample.frames, config, Some(rng))? } else { eval_view(&sample.frames, config)? };
    let feasible = |n: usize| config.steps_for(n).is_some_and(|k| ctc::check_feasible(k, &sample.labels).is_ok());
    let mut idx = temporal_indices(t, factor, config.window);
    if !feasible(idx.len()) {
        idx = (0..t).collect();
    }
    if !feasible(idx.len()) {
        return Ok(None);
    }
    Ok(Some(gather_frames(&spatial, &idx)?))
}

/// Forward, loss and backward for one sequence; gradients are added into
/// `grads`. Batch statistics are folded into the running estimates.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model<f32>,
    frames: &Tensor<f32>,
    labels: &[usize],
    proposal: Option<&[usize]>,
    cfg: &TrainConfig,
    reg: &[usize],
    grads: &mut [Vec<f32>],
) -> Result<StepOutcome> {
    let blank = model.config.blank();
    let mut tape = Tape::new();
    let mut pass = model.begin(&mut tape, Mode::Train, true);
    let x = tape.constant(frames.clone());
    let fwd = pass.forward_full(&mut tape, x)?;
    let l_ctc = tape.ctc_loss(fwd.log_probs, labels, blank)?;
    let l_gfe = match proposal {
        Some(p) => {
            let br = if cfg.balance_ratio { gfe::balance_ratio(p, blank) } else { 1.0 };
            let lp = pass.gfe_head(&mut tape, fwd.g)?;
            Some(gfe::gfe_loss(&mut tape, lp, p, br)?)
        }
        None => None,
    };
    let vars = pass.param_vars().to_vec();
    let reg_vars: Vec<_> = reg.iter().map(|&i| vars[i]).collect();
    let (total, loss) = gfe::total_loss(&mut tape, l_ctc, l_gfe, &reg_vars, cfg.lambda1, cfg.lambda2)?;
    tape.backward(total)?;
    let stats = pass.take_stats();
    let lp = tape.value(fwd.log_probs);
    let (_, hyp) = ctc::greedy_decode(lp.data(), lp.shape()[1], blank);
    let wer = crate::eval::wer(labels, &hyp)?;
    for (acc, v) in grads.iter_mut().zip(&vars) {
        if let Some(g) = tape.grad(*v) {
            for (a, &d) in acc.iter_mut().zip(g) {
                *a += d;
            }
        }
    }
    drop(tape);
    model.update_running_stats(&stats);
    Ok(StepOutcome { loss, wer, used_gfe: l_gfe.is_some() })
}

/// Forced-alignment proposals for every sample, computed in inference mode
/// from the unaugmented evaluation view.
pub fn generate_proposals(model: &Model<f32>, samples: &[VideoSample], epoch: u32) -> Result<(ProposalCache, RefreshRecord)> {
    let u = model.config.classes();
    let results = parallel::map(samples, |s| -> Result<Option<(u32, Vec<usize>, bool)>> {
        let view = eval_view(&s.frames, &model.config)?;
        let augmented = view.shape()[0] != s.len();
        let Some(k) = model.config.steps_for(view.shape()[0]) else { return Ok(None) };
        if ctc::check_feasible(k, &s.labels).is_err() {
            return Ok(None);
        }
        let map = model.predict(&view)?;
        let path = gfe::propose(&map.log_probs_f64(), map.steps, u, &s.labels)?;
        Ok(Some((s.id, path, augmented)))
    });
    let mut cache = ProposalCache::new();
    let mut augmented_inputs = false;
    for r in results {
        if let Some((id, path, aug)) = r? {
            augmented_inputs |= aug;
            cache.insert(id, Proposal { epoch, path });
        }
    }
    let record = RefreshRecord { epoch, proposals: cache.len(), augmented_inputs };
    Ok((cache, record))
}

/// Train `model` in place on `samples`.
pub fn train(model: &mut Model<f32>, samples: &[VideoSample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, samples, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut Model<f32>,
    samples: &[VideoSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model<f32>, &EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    let blank = model.config.blank();
    let reg = regularized_params(model);
    let lens: Vec<usize> = model.params.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, lens.iter().copied());
    let mut grads: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.0; n]).collect();
    let mut proposals = ProposalCache::new();
    let mut report = TrainReport { metrics: Vec::new(), refreshes: Vec::new(), proposals: ProposalCache::new(), gfe_dropped: 0 };
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        adam.set_lr(lr);
        if cfg.refresh_at(epoch) {
            let (cache, record) = generate_proposals(model, samples, epoch)?;
            log::info!("epoch {epoch}: refreshed {} proposals", record.proposals);
            if let Some(path) = &cfg.proposal_cache {
                cache.save(path)?;
            }
            proposals = cache;
            report.refreshes.push(record);
        }
        let gfe_on = cfg.gfe_active(epoch);

        let mut shuffle = sample_rng(cfg.seed, epoch, u32::MAX);
        order.shuffle(&mut shuffle);
        let (mut sum_ctc, mut sum_gfe, mut n_gfe, mut sum_wer, mut n, mut skipped) = (0.0, 0.0, 0usize, 0.0, 0usize, 0usize);
        let mut pending = 0usize;
        for &i in &order {
            let s = &samples[i];
            let mut rng = sample_rng(cfg.seed, epoch, s.id);
            let Some(frames) = training_view(s, &model.config, cfg, &mut rng)? else {
                log::warn!("sample {} infeasible for CTC, skipped", s.id);
                skipped += 1;
                continue;
            };
            let k = model.config.steps_for(frames.shape()[0]).expect("feasible view");
            let proposal = if gfe_on {
                let fitted = proposals.get(s.id).and_then(|p| fit_proposal(&p.path, k, &s.labels, blank));
                if fitted.is_none() {
                    report.gfe_dropped += 1;
                }
                fitted
            } else {
                None
            };
            let out = train_step(model, &frames, &s.labels, proposal.as_deref(), cfg, &reg, &mut grads)?;
            sum_ctc += out.loss.l_ctc;
            if let Some(g) = out.loss.l_gfe {
                sum_gfe += g;
                n_gfe += 1;
            }
            sum_wer += out.wer;
            n += 1;
            pending += 1;
            if pending == cfg.accumulation {
                apply(model, &mut adam, &mut grads, pending);
                pending = 0;
            }
        }
        if pending > 0 {
            apply(model, &mut adam, &mut grads, pending);
        }
        let l_reg: f64 = reg.iter().map(|&i| model.params.tensors()[i].sum_squares() as f64).sum();
        let m = EpochMetrics {
            epoch,
            l_ctc: if n > 0 { sum_ctc / n as f64 } else { 0.0 },
            l_gfe: (n_gfe > 0).then(|| sum_gfe / n_gfe as f64),
            l_reg,
            lr,
            train_wer_greedy: if n > 0 { sum_wer / n as f64 } else { 0.0 },
            skipped,
        };
        log::info!("{}", m.csv_row());
        on_epoch(model, &m);
        report.metrics.push(m);
    }
    report.proposals = proposals;
    Ok(report)
}

fn apply(model: &mut Model<f32>, adam: &mut Adam<f32>, grads: &mut [Vec<f32>], count: usize) {
    let scale = 1.0 / count as f32;
    for (i, (p, g)) in model.params.tensors_mut().iter_mut().zip(grads.iter_mut()).enumerate() {
        g.iter_mut().for_each(|x| *x *= scale);
        adam.step(i, p.data_mut(), g);
        g.iter_mut().for_each(|x| *x = 0.0);
    }
}
