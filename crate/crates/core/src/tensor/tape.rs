use super::conv::{self, ConvGeom};
use super::norm::{self, BnLayout, BnStats};
use super::{Real, Tensor};
use crate::ctc;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which trailing axes a max-pool reduces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolDims {
    /// Last two axes (`h`, `w`).
    Spatial,
    /// Last axis only (`t`).
    Temporal,
}

enum Op<T> {
    /// Leaf, or a value computed without any gradient-requiring input.
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        n: usize,
        cols: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    /// Scalar loss whose gradient w.r.t. `x` was computed in the forward pass.
    Precomputed {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Dynamically recorded computation graph for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`backward`](Tape::backward) walks it in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2D cross-correlation. `x` is `(c, h, w)` or `(n, c, h, w)`; `w` is
    /// `(c_out, c_in, kh, kw)`; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = match xs[..] {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be rank 3 or 4, got {xs:?}"))),
        };
        let [co, ci, kh, kw] = ws[..] else {
            return Err(Error::dim(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if ci != c {
            return Err(Error::dim(format!("conv2d input has {c} channels, weight expects {ci}")));
        }
        if self.shape(b) != [co] {
            return Err(Error::dim(format!("conv2d bias shape {:?}, expected [{co}]", self.shape(b))));
        }
        let geom = ConvGeom::new(c, h, wd, co, (kh, kw), (stride, stride), (pad, pad))?;
        let mut out_shape = vec![co, geom.oh, geom.ow];
        if xs.len() == 4 {
            out_shape.insert(0, n);
        }
        self.conv_common(x, w, b, geom, n, out_shape, "conv2d")
    }

    /// 1D cross-correlation over the last axis. `x` is `(c, t)` or `(n, c, t)`;
    /// `w` is `(c_out, c_in, k)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, t) = match xs[..] {
            [c, t] => (1, c, t),
            [n, c, t] => (n, c, t),
            _ => return Err(Error::dim(format!("conv1d input must be rank 2 or 3, got {xs:?}"))),
        };
        let [co, ci, k] = ws[..] else {
            return Err(Error::dim(format!("conv1d weight must be rank 3, got {ws:?}")));
        };
        if ci != c {
            return Err(Error::dim(format!("conv1d input has {c} channels, weight expects {ci}")));
        }
        if self.shape(b) != [co] {
            return Err(Error::dim(format!("conv1d bias shape {:?}, expected [{co}]", self.shape(b))));
        }
        if k > t + 2 * pad {
            return Err(Error::dim(format!("conv1d kernel {k} longer than padded input {}", t + 2 * pad)));
        }
        let geom = ConvGeom::new(c, 1, t, co, (1, k), (1, stride), (0, pad))?;
        let mut out_shape = vec![co, geom.ow];
        if xs.len() == 3 {
            out_shape.insert(0, n);
        }
        self.conv_common(x, w, b, geom, n, out_shape, "conv1d")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_common(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        n: usize,
        out_shape: Vec<usize>,
        name: &'static str,
    ) -> Result<Var> {
        let (out, cols) = conv::forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let keep = self.any_grad(&[x, w, b]);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            value,
            &[x, w, b],
            Op::Conv {
                x,
                w,
                b,
                geom,
                n,
                cols: if keep { cols } else { Vec::new() },
            },
            name,
        )
    }

    /// Non-overlapping max-pool (stride = window); trailing remainders are
    /// dropped. Ties resolve to the first maximum in scan order.
    pub fn max_pool(&mut self, x: Var, window: usize, dims: PoolDims) -> Result<Var> {
        if window < 1 {
            return Err(Error::Config("pool window must be >= 1".into()));
        }
        let xs = self.shape(x).to_vec();
        let (wh, ww) = match dims {
            PoolDims::Spatial => (window, window),
            PoolDims::Temporal => (1, window),
        };
        let (h, w) = match (dims, xs.len()) {
            (PoolDims::Spatial, r) if r >= 2 => (xs[r - 2], xs[r - 1]),
            (PoolDims::Temporal, r) if r >= 1 => (1, xs[r - 1]),
            _ => return Err(Error::dim(format!("cannot pool shape {xs:?}"))),
        };
        let (oh, ow) = (h / wh, w / ww);
        if oh == 0 || ow == 0 {
            return Err(Error::dim(format!("pool window {window} larger than extent in {xs:?}")));
        }
        let planes: usize = xs.iter().product::<usize>() / (h * w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * wh * w + ox * ww;
                    for dy in 0..wh {
                        for dx in 0..ww {
                            let idx = base + (oy * wh + dy) * w + ox * ww + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = xs.clone();
        let r = shape.len();
        match dims {
            PoolDims::Spatial => {
                shape[r - 2] = oh;
                shape[r - 1] = ow;
            }
            PoolDims::Temporal => shape[r - 1] = ow,
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, &[x], Op::MaxPool { x, argmax }, "max_pool")
    }

    /// Mean over the last two axes: `(c, h, w) -> (c)`, `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::dim(format!("global_avg_pool needs rank >= 3, got {xs:?}")));
        }
        let plane = xs[xs.len() - 2] * xs[xs.len() - 1];
        let inv = T::one() / T::of(plane as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&xs[..xs.len() - 2], out)?;
        self.push(value, &[x], Op::GlobalAvgPool { x, plane }, "global_avg_pool")
    }

    /// Batch normalization with per-channel statistics along `channel_axis`.
    /// With `running = Some((mean, var))` the given statistics are used
    /// (inference); otherwise the input's own statistics are used and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if channel_axis >= xs.len() {
            return Err(Error::dim(format!("channel axis {channel_axis} out of range for {xs:?}")));
        }
        let channels = xs[channel_axis];
        let layout = BnLayout {
            outer: xs[..channel_axis].iter().product(),
            channels,
            inner: xs[channel_axis + 1..].iter().product(),
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim(format!("batch_norm affine params must have shape [{channels}]")));
        }
        if let Some((m, v)) = running {
            if m.len() != channels || v.len() != channels {
                return Err(Error::dim("running statistics length mismatch"));
            }
        }
        let f = norm::forward(
            layout,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            T::of(eps),
        );
        let value = Tensor::new(xs, f.y)?;
        let var = self.push(
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat: f.xhat,
                inv_std: f.inv_std,
                batch_stats: running.is_none(),
            },
            "batch_norm",
        )?;
        Ok((var, f.stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| a.max(T::zero())).collect())?;
        self.push(out, &[x], Op::Relu { x }, "relu")
    }

    /// `x (n, in) -> x w^T + b`, `w (out, in)`, `b (out)`. A rank-1 `x` is one row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, fin, squeeze) = match xs[..] {
            [f] => (1, f, true),
            [n, f] => (n, f, false),
            _ => return Err(Error::dim(format!("linear input must be rank 1 or 2, got {xs:?}"))),
        };
        let [fout, wi] = ws[..] else {
            return Err(Error::dim(format!("linear weight must be rank 2, got {ws:?}")));
        };
        if wi != fin || self.shape(b) != [fout] {
            return Err(Error::dim(format!(
                "linear: input width {fin}, weight {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let shape = if squeeze { vec![fout] } else { vec![n, fout] };
        let value = Tensor::new(shape, out)?;
        self.push(value, &[x, w, b], Op::Linear { x, w, b }, "linear")
    }

    fn rows(&self, x: Var) -> (usize, usize) {
        let s = self.shape(x);
        let cols = *s.last().unwrap();
        (s.iter().product::<usize>() / cols, cols)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows(x);
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_row(row);
        }
        let value = Tensor::new(v.shape(), out)?;
        self.push(value, &[x], Op::Softmax { x }, "softmax")
    }

    /// Row-wise log-softmax over the last axis (max-subtracted).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows(x);
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            log_softmax_row(row);
        }
        let value = Tensor::new(v.shape(), out)?;
        self.push(value, &[x], Op::LogSoftmax { x }, "log_softmax")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [r, c] = xs[..] else {
            return Err(Error::dim(format!("transpose needs rank 2, got {xs:?}")));
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        self.push(value, &[x], Op::Transpose { x }, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, &[x], Op::Reshape { x }, "reshape")
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!("{name}: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(value, &[a, b], Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(value, &[a, b], Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|&a| a * s).collect())?;
        self.push(value, &[x], Op::Scale { x, s }, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), &[x], Op::Sum { x }, "sum")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_squares();
        self.push(Tensor::scalar(s), &[x], Op::SumSquares { x }, "sum_squares")
    }

    /// CTC negative log-likelihood of `labels` under per-step log-probabilities
    /// `log_probs (k, u)`; `blank` is the blank class index.
    pub fn ctc_loss(&mut self, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var> {
        let xs = self.shape(log_probs).to_vec();
        let [k, u] = xs[..] else {
            return Err(Error::dim(format!("ctc_loss expects (k, u), got {xs:?}")));
        };
        let lp: Vec<f64> = self.value(log_probs).data().iter().map(|x| x.as_f64()).collect();
        let out = ctc::loss_and_grad(&lp, k, u, labels, blank)?;
        let grad = out.grad.into_iter().map(T::of).collect();
        self.push(
            Tensor::scalar(T::of(out.loss)),
            &[log_probs],
            Op::Precomputed { x: log_probs, grad },
            "ctc_loss",
        )
    }

    /// Weighted negative log-likelihood averaged over rows:
    /// `(1/k) * sum_j -weights[j] * max(log_probs[j, targets[j]], ln floor)`.
    pub fn weighted_nll(&mut self, log_probs: Var, targets: &[usize], weights: &[T], floor: f64) -> Result<Var> {
        let xs = self.shape(log_probs).to_vec();
        let [k, u] = xs[..] else {
            return Err(Error::dim(format!("weighted_nll expects (k, u), got {xs:?}")));
        };
        if targets.len() != k || weights.len() != k {
            return Err(Error::dim(format!(
                "weighted_nll: {k} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= u) {
            return Err(Error::dim(format!("target class {bad} out of range for {u} classes")));
        }
        let lp = self.value(log_probs).data();
        let log_floor = T::of(floor.ln());
        let inv_k = T::one() / T::of(k as f64);
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); k * u];
        for j in 0..k {
            let v = lp[j * u + targets[j]];
            if v > log_floor {
                loss += -weights[j] * v;
                grad[j * u + targets[j]] = -weights[j] * inv_k;
            } else {
                loss += -weights[j] * log_floor;
            }
        }
        self.push(
            Tensor::scalar(loss * inv_k),
            &[log_probs],
            Op::Precomputed { x: log_probs, grad },
            "weighted_nll",
        )
    }

    /// Populate gradients of `loss` on every gradient-requiring leaf.
    /// Gradients accumulate across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, n, cols } => {
                let grads = conv::backward(geom, *n, g, cols, self.value(*w).data(), rg(x));
                if let Some(dx) = grads.dx {
                    acc(*x, dx);
                }
                acc(*w, grads.dw);
                acc(*b, grads.db);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool { x, plane } => {
                let inv = T::one() / T::of(*plane as f64);
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, *plane)).collect();
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dg, db) =
                    norm::backward(*layout, g, xhat, inv_std, self.value(*gamma).data(), *batch_stats);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&a, &gv)| if a > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, fin) = if xs.len() == 1 { (1, xs[0]) } else { (xs[0], xs[1]) };
                let fout = self.shape(*b)[0];
                if rg(x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, g, false, self.value(*w).data(), false, T::zero(), &mut dx);
                    acc(*x, dx);
                }
                if rg(w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, g, true, self.value(*x).data(), false, T::zero(), &mut dw);
                    acc(*w, dw);
                }
                let mut db = vec![T::zero(); fout];
                for row in g.chunks(fout) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                acc(*b, db);
            }
            Op::Softmax { x } => {
                let cols = *out.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (gv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax { x } => {
                let cols = *out.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.chunks(cols)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - y.exp() * gs;
                    }
                }
                acc(*x, dx);
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = vb.iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                let db = va.iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale { x, s } => acc(*x, g.iter().map(|&gv| gv * *s).collect()),
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::SumSquares { x } => {
                let two = T::of(2.0);
                acc(*x, self.value(*x).data().iter().map(|&v| two * v * g[0]).collect());
            }
            Op::Precomputed { x, grad } => acc(*x, grad.iter().map(|&d| d * g[0]).collect()),
        }
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

pub(crate) fn log_softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + s.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}
