//! The recognition network: frame encoder, two-level gloss encoder, CTC head
//! and the gloss feature enhancement head.

mod config;

use std::io::{Read, Write};
use std::path::Path;

pub use config::{ModelConfig, TemporalLayer};

use crate::tensor::{self, he_uniform, BnStats, ParamRng, PoolDims, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the current sequence's statistics and report them.
    Train,
    /// Normalize with running statistics only.
    Infer,
}

/// Learned weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    running_mean: Vec<Tensor<T>>,
    running_var: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Running statistics of batch-norm layer `i`.
    pub fn running(&self, i: usize) -> (&[T], &[T]) {
        (self.running_mean[i].data(), self.running_var[i].data())
    }

    /// Sum of squares of every learned weight (running statistics excluded).
    pub fn l2(&self) -> T {
        self.tensors.iter().map(|t| t.sum_squares()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            bn_names: self.bn_names.clone(),
            running_mean: self.running_mean.iter().map(|t| t.cast()).collect(),
            running_var: self.running_var.iter().map(|t| t.cast()).collect(),
        }
    }

    fn named_arrays(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self.names.iter().cloned().zip(&self.tensors).collect();
        for (i, n) in self.bn_names.iter().enumerate() {
            out.push((format!("{n}.running_mean"), &self.running_mean[i]));
            out.push((format!("{n}.running_var"), &self.running_var[i]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    /// Index of `conv.w`; `conv.b`, `bn.gamma`, `bn.beta` follow.
    param: usize,
    bn: usize,
    stride: usize,
    pad: usize,
    pool: usize,
}

/// Architecture plus weights.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    s_layers: Vec<ConvLayer>,
    g1_layers: Vec<ConvLayer>,
    g2: ConvLayer,
    d_fc: usize,
    f_fc: usize,
}

/// Output of [`Pass::forward_full`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `(k, u)` CTC log-probabilities.
    pub log_probs: Var,
    /// `(k, f_g)` first-level gloss features.
    pub g: Var,
    pub steps: usize,
}

impl<T: Real> Model<T> {
    /// Fresh model: He-uniform conv/linear weights, zero biases, unit BN scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = ParamRng::new(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut bn_names = Vec::new();
        let mut add_conv = |prefix: String, shape: Vec<usize>, stride: usize, pad: usize, pool: usize| {
            let c_out = shape[0];
            let fan_in: usize = shape[1..].iter().product();
            let param = tensors.len();
            let bn = bn_names.len();
            let w_name = format!("{prefix}.conv.w");
            tensors.push(he_uniform::<T>(&mut rng.stream(&w_name), &shape, fan_in));
            names.push(w_name);
            tensors.push(Tensor::zeros([c_out]));
            names.push(format!("{prefix}.conv.b"));
            tensors.push(Tensor::full([c_out], T::one()));
            names.push(format!("{prefix}.bn.gamma"));
            tensors.push(Tensor::zeros([c_out]));
            names.push(format!("{prefix}.bn.beta"));
            bn_names.push(format!("{prefix}.bn"));
            ConvLayer { param, bn, stride, pad, pool }
        };

        let s_layers = config
            .s_channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let pool = if w[1] > w[0] { 2 } else { 1 };
                add_conv(format!("s.{i}"), vec![w[1], w[0], 3, 3], 1, 1, pool)
            })
            .collect();
        let mut c_in = config.f_s;
        let g1_layers = config
            .g1_layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let layer = add_conv(format!("g1.{i}"), vec![config.f_g, c_in, l.filter], l.stride, l.pad, l.pool);
                c_in = config.f_g;
                layer
            })
            .collect();
        let g2 = add_conv(
            "g2".into(),
            vec![config.f_g2, config.f_g, config.g2_filter],
            1,
            config.g2_filter / 2,
            1,
        );
        let u = config.classes();
        let d_fc = tensors.len();
        let w = he_uniform::<T>(&mut rng.stream("d_fc.w"), &[u, config.f_g2], config.f_g2);
        tensors.extend([w, Tensor::zeros([u])]);
        names.extend(["d_fc.w".to_string(), "d_fc.b".to_string()]);
        let f_fc = tensors.len();
        let w = he_uniform::<T>(&mut rng.stream("f_fc.w"), &[u, config.f_g], config.f_g);
        tensors.extend([w, Tensor::zeros([u])]);
        names.extend(["f_fc.w".to_string(), "f_fc.b".to_string()]);

        let running_mean = bn_names.iter().enumerate().map(|(i, _)| Tensor::zeros([bn_width(&tensors, i, &names, &bn_names)])).collect();
        let running_var = bn_names
            .iter()
            .enumerate()
            .map(|(i, _)| Tensor::full([bn_width(&tensors, i, &names, &bn_names)], T::one()))
            .collect();
        Ok(Model {
            config,
            params: ModelParams { names, tensors, bn_names, running_mean, running_var },
            s_layers,
            g1_layers,
            g2,
            d_fc,
            f_fc,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            s_layers: self.s_layers.clone(),
            g1_layers: self.g1_layers.clone(),
            g2: self.g2,
            d_fc: self.d_fc,
            f_fc: self.f_fc,
        }
    }

    /// Indices of the CTC head parameters (`d_fc.w`, `d_fc.b`).
    pub fn ctc_head_params(&self) -> [usize; 2] {
        [self.d_fc, self.d_fc + 1]
    }

    /// Indices of the second-level encoder parameters.
    pub fn g2_params(&self) -> [usize; 4] {
        let p = self.g2.param;
        [p, p + 1, p + 2, p + 3]
    }

    /// Begin a forward pass on `tape`, registering every parameter as a leaf.
    pub fn begin<'m>(&'m self, tape: &mut Tape<T>, mode: Mode, requires_grad: bool) -> Pass<'m, T> {
        let vars = self.params.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        Pass { model: self, vars, mode, stats: Vec::new() }
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BnStats<T>)]) {
        let m = T::of(self.config.bn_momentum);
        let keep = T::one() - m;
        for (i, s) in stats {
            for (r, &b) in self.params.running_mean[*i].data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.params.running_var[*i].data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Inference-mode prediction map for a `(t, c, h, w)` frame tensor.
    pub fn predict(&self, frames: &Tensor<T>) -> Result<PredictionMap<T>> {
        let mut tape = Tape::new();
        let mut pass = self.begin(&mut tape, Mode::Infer, false);
        let x = tape.constant(frames.clone());
        let out = pass.forward_full(&mut tape, x)?;
        Ok(PredictionMap::from_log_probs(tape.value(out.log_probs)))
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        tensor::write_checkpoint(out, &self.params.named_arrays())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Load weights into a model built from `config`; every array must be
    /// present with the expected shape.
    pub fn read_checkpoint<R: Read>(config: ModelConfig, input: &mut R, path: &Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let arrays = tensor::read_checkpoint::<T, _>(input, path)?;
        let mut expected: Vec<(String, &mut Tensor<T>)> = Vec::new();
        let p = &mut model.params;
        for (n, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            expected.push((n.clone(), t));
        }
        for ((n, m), v) in p.bn_names.iter().zip(p.running_mean.iter_mut()).zip(p.running_var.iter_mut()) {
            expected.push((format!("{n}.running_mean"), m));
            expected.push((format!("{n}.running_var"), v));
        }
        if arrays.len() != expected.len() {
            return Err(Error::format(path, 4, format!("expected {} arrays, found {}", expected.len(), arrays.len())));
        }
        for ((name, slot), (got_name, got)) in expected.into_iter().zip(arrays) {
            if name != got_name || slot.shape() != got.shape() {
                return Err(Error::format(
                    path,
                    0,
                    format!("array {got_name:?} {:?} does not match {name:?} {:?}", got.shape(), slot.shape()),
                ));
            }
            *slot = got;
        }
        Ok(model)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(config, &mut &bytes[..], path)
    }
}

fn bn_width<T: Real>(tensors: &[Tensor<T>], bn: usize, names: &[String], bn_names: &[String]) -> usize {
    let gamma = format!("{}.gamma", bn_names[bn]);
    let i = names.iter().position(|n| *n == gamma).expect("gamma registered");
    tensors[i].numel()
}

/// One forward evaluation bound to a tape.
pub struct Pass<'m, T> {
    model: &'m Model<T>,
    vars: Vec<Var>,
    mode: Mode,
    stats: Vec<(usize, BnStats<T>)>,
}

impl<'m, T: Real> Pass<'m, T> {
    /// Tape handles of the parameters, in [`ModelParams`] order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Batch statistics gathered in [`Mode::Train`].
    pub fn take_stats(&mut self) -> Vec<(usize, BnStats<T>)> {
        std::mem::take(&mut self.stats)
    }

    fn conv_bn_relu(&mut self, tape: &mut Tape<T>, x: Var, layer: &ConvLayer, temporal: bool) -> Result<Var> {
        let p = &self.vars[layer.param..layer.param + 4];
        let y = if temporal {
            tape.conv1d(x, p[0], p[1], layer.stride, layer.pad)?
        } else {
            tape.conv2d(x, p[0], p[1], layer.stride, layer.pad)?
        };
        let axis = if temporal { 0 } else { 1 };
        let running = match self.mode {
            Mode::Infer => Some(self.model.params.running(layer.bn)),
            Mode::Train => None,
        };
        let (y, stats) = tape.batch_norm(y, p[2], p[3], axis, running, self.model.config.bn_eps)?;
        if let Some(s) = stats {
            self.stats.push((layer.bn, s));
        }
        let y = tape.relu(y)?;
        if layer.pool > 1 {
            tape.max_pool(y, layer.pool, if temporal { PoolDims::Temporal } else { PoolDims::Spatial })
        } else {
            Ok(y)
        }
    }

    /// `(t, c, h, w)` frames to `(t, f_s)` frame features; frames are independent
    /// except through training-mode batch statistics.
    pub fn encode_frames(&mut self, tape: &mut Tape<T>, frames: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let shape = tape.shape(frames).to_vec();
        let expect = [cfg.input_channels, cfg.input_height, cfg.input_width];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::dim(format!("frames must be (t, {}, {}, {}), got {shape:?}", expect[0], expect[1], expect[2])));
        }
        let mut x = frames;
        for layer in self.model.s_layers.clone().iter() {
            x = self.conv_bn_relu(tape, x, layer, false)?;
        }
        tape.global_avg_pool(x)
    }

    /// `(t, f_s)` to `(k, f_g)` with `k = (t - l) / stride + 1`.
    pub fn encode_gloss_level1(&mut self, tape: &mut Tape<T>, s: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let t = tape.shape(s)[0];
        let k = cfg.steps_for(t).ok_or(Error::SequenceTooShort { got: t, min: cfg.window })?;
        let mut x = tape.transpose(s)?;
        for layer in self.model.g1_layers.clone().iter() {
            x = self.conv_bn_relu(tape, x, layer, true)?;
        }
        let g = tape.transpose(x)?;
        debug_assert_eq!(tape.shape(g)[0], k);
        Ok(g)
    }

    /// `(k, f_g)` to `(k, f_g2)`; same-padded, so `k` is preserved.
    pub fn encode_gloss_level2(&mut self, tape: &mut Tape<T>, g: Var) -> Result<Var> {
        let x = tape.transpose(g)?;
        let layer = self.model.g2;
        let x = self.conv_bn_relu(tape, x, &layer, true)?;
        tape.transpose(x)
    }

    /// CTC head: `(k, f_g2)` to `(k, u)` log-probabilities.
    pub fn decode_head(&mut self, tape: &mut Tape<T>, g2: Var) -> Result<Var> {
        let i = self.model.d_fc;
        let logits = tape.linear(g2, self.vars[i], self.vars[i + 1])?;
        tape.log_softmax(logits)
    }

    /// GFE head on first-level features: `(k, f_g)` to `(k, u)` log-probabilities.
    pub fn gfe_head(&mut self, tape: &mut Tape<T>, g: Var) -> Result<Var> {
        let i = self.model.f_fc;
        let logits = tape.linear(g, self.vars[i], self.vars[i + 1])?;
        tape.log_softmax(logits)
    }

    pub fn forward_full(&mut self, tape: &mut Tape<T>, frames: Var) -> Result<Forward> {
        let s = self.encode_frames(tape, frames)?;
        let g = self.encode_gloss_level1(tape, s)?;
        let g2 = self.encode_gloss_level2(tape, g)?;
        let log_probs = self.decode_head(tape, g2)?;
        Ok(Forward { log_probs, g, steps: tape.shape(g)[0] })
    }
}

/// Per-step class distribution produced by the CTC head.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap<T> {
    pub steps: usize,
    pub classes: usize,
    pub log_probs: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> PredictionMap<T> {
    pub fn from_log_probs(t: &Tensor<T>) -> Self {
        let (steps, classes) = (t.shape()[0], t.shape()[1]);
        PredictionMap {
            steps,
            classes,
            log_probs: t.data().to_vec(),
            probs: t.data().iter().map(|x| x.exp()).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn log_probs_f64(&self) -> Vec<f64> {
        self.log_probs.iter().map(|x| x.as_f64()).collect()
    }

    /// Greedy path and its collapsed label sequence.
    pub fn greedy(&self) -> (Vec<usize>, Vec<usize>) {
        crate::ctc::greedy_decode(&self.log_probs, self.classes, self.classes - 1)
    }

    /// Append the rows of `other`.
    pub fn extend(&mut self, other: &PredictionMap<T>) {
        assert_eq!(self.classes, other.classes);
        self.steps += other.steps;
        self.log_probs.extend_from_slice(&other.log_probs);
        self.probs.extend_from_slice(&other.probs);
    }

    pub fn empty(classes: usize) -> Self {
        PredictionMap { steps: 0, classes, log_probs: Vec::new(), probs: Vec::new() }
    }
}
