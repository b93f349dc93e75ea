#![allow(dead_code)]

use glossnet::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Reduce `out` to a scalar with a fixed random projection so every output
/// element carries a distinct weight.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0xabcdef);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random(&mut r, &shape));
    let m = tape.mul(out, w).unwrap();
    tape.sum(m).unwrap()
}

/// Norm-wise relative error `||a - n|| / max(||a||, ||n||)` between analytic
/// and central-difference gradients, worst over all inputs.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    worst
}

/// Direct nested-loop cross-correlation; `x (n, c, h, w)`, `w (co, c, kh, kw)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * sh + ky) as isize - ph as isize;
                                let ix = (xo * sw + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// All `u^k` paths, in lexicographic order.
pub fn all_paths(k: usize, u: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..u.pow(k as u32)).map(move |mut n| {
        let mut p = vec![0; k];
        for slot in p.iter_mut().rev() {
            *slot = n % u;
            n /= u;
        }
        p
    })
}

/// Exhaustive CTC: total probability of valid paths and the best valid path
/// (first in enumeration order among equals).
pub fn ctc_brute(lp: &[f64], k: usize, u: usize, labels: &[usize]) -> (f64, Option<(Vec<usize>, f64)>) {
    let blank = u - 1;
    let mut total = 0.0;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in all_paths(k, u) {
        if glossnet::ctc::collapse(&p, blank) != labels {
            continue;
        }
        let s = glossnet::ctc::path_log_prob(lp, u, &p);
        total += s.exp();
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((p, s));
        }
    }
    (total, best)
}

/// Random `(k, u)` log-probability map (log-softmax of uniform logits).
pub fn random_log_probs(rng: &mut ChaCha8Rng, k: usize, u: usize, spread: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(k * u);
    for _ in 0..k {
        let logits: Vec<f64> = (0..u).map(|_| rng.random_range(-spread..spread)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        out.extend(logits.iter().map(|l| l - z));
    }
    out
}

/// Minimum edit cost by enumerating every alignment path (match/substitute,
/// insert, delete) without memoization.
pub fn edit_brute(r: &[usize], h: &[usize]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rr)), Some((b, hh))) => {
            let diag = edit_brute(rr, hh) + usize::from(a != b);
            let del = edit_brute(rr, h) + 1;
            let ins = edit_brute(r, hh) + 1;
            diag.min(del).min(ins)
        }
    }
}

pub fn random_seq(rng: &mut ChaCha8Rng, max_len: usize, v: usize) -> Vec<usize> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

/// Small model with the production temporal geometry, for 64-bit checks.
pub fn micro_config(vocab: usize) -> glossnet::model::ModelConfig {
    glossnet::model::ModelConfig {
        preset: "micro".into(),
        input_height: 4,
        input_width: 4,
        resize: 4,
        s_channels: vec![3, 4],
        f_s: 4,
        f_g: 3,
        f_g2: 5,
        ..glossnet::model::ModelConfig::tiny(vocab)
    }
}

/// Worst relative error between analytic and central-difference gradients of
/// the joint objective (CTC + weighted GFE + L2) over every parameter of a
/// micro model in training mode.
pub fn joint_objective_gradcheck(seed: u64, lambda1: f64, lambda2: f64) -> f64 {
    use glossnet::gfe;
    use glossnet::model::{Mode, Model};

    let cfg = micro_config(3);
    let mut r = rng(seed);
    let mut model = Model::<f64>::new(cfg, seed).unwrap();
    // Move BN and biases off their initial values so every path is exercised.
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    let frames = random(&mut r, &[28, 3, 4, 4]);
    let labels = [0usize, 2, 1];
    let proposal = [0usize, 3, 2, 1];
    let blank = model.config.blank();
    let reg: Vec<usize> =
        model.params.names().iter().enumerate().filter(|(_, n)| n.ends_with(".w")).map(|(i, _)| i).collect();

    let loss_of = |m: &Model<f64>, grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = glossnet::tensor::Tape::new();
        let mut pass = m.begin(&mut tape, Mode::Train, grads);
        let x = tape.constant(frames.clone());
        let fwd = pass.forward_full(&mut tape, x).unwrap();
        let l_ctc = tape.ctc_loss(fwd.log_probs, &labels, blank).unwrap();
        let glp = pass.gfe_head(&mut tape, fwd.g).unwrap();
        let br = gfe::balance_ratio(&proposal, blank);
        let l_gfe = gfe::gfe_loss(&mut tape, glp, &proposal, br).unwrap();
        let vars = pass.param_vars().to_vec();
        let rv: Vec<_> = reg.iter().map(|&i| vars[i]).collect();
        let (total, _) = gfe::total_loss(&mut tape, l_ctc, Some(l_gfe), &rv, lambda1, lambda2).unwrap();
        let value = tape.value(total).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(total).unwrap();
        let g = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        (value, g)
    };

    let (_, analytic) = loss_of(&model, true);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for p in 0..model.params.len() {
        let n = model.params.tensors()[p].numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = model.params.tensors()[p].data()[j];
            model.params.tensors_mut()[p].data_mut()[j] = orig + h;
            let up = loss_of(&model, false).0;
            model.params.tensors_mut()[p].data_mut()[j] = orig - h;
            let down = loss_of(&model, false).0;
            model.params.tensors_mut()[p].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic[p].iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic[p].iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        // Conv biases ahead of BN have an exactly-zero gradient; compare those absolutely.
        worst = worst.max(diff / scale.max(1e-3));
    }
    worst
}

/// Check `encode_gloss_level1` output counts for every `t` in `range`.
pub fn geometry_holds(range: std::ops::RangeInclusive<usize>) -> Result<(), String> {
    use glossnet::model::{Mode, Model, ModelConfig};
    let model = Model::<f32>::new(ModelConfig::tiny(4), 0).unwrap();
    for t in range {
        let mut tape = glossnet::tensor::Tape::new();
        let mut pass = model.begin(&mut tape, Mode::Infer, false);
        let s = tape.constant(Tensor::<f32>::full([t, 64], 0.5));
        let g = pass.encode_gloss_level1(&mut tape, s).map_err(|e| e.to_string())?;
        let expect = (t - 16) / 4 + 1;
        if tape.shape(g) != [expect, 64] {
            return Err(format!("t={t}: got {:?}, expected ({expect}, 64)", tape.shape(g)));
        }
    }
    Ok(())
}

/// Receptive-field probe: perturbing frame features outside
/// `[i*4, i*4 + 16)` leaves `g_i` bit-identical, perturbing inside changes it.
pub fn locality_probe(seed: u64, pairs: usize) -> Result<(), String> {
    use glossnet::model::{Mode, Model, ModelConfig};
    let mut model = Model::<f64>::new(ModelConfig::tiny(4), seed).unwrap();
    let mut r = rng(seed);
    // Randomize BN shifts so ReLUs are not all active or all dead.
    for (name, t) in model.params.names().to_vec().iter().zip(model.params.tensors_mut()) {
        if name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }
    let g1 = |s: &Tensor<f64>| -> Tensor<f64> {
        let mut tape = glossnet::tensor::Tape::new();
        let mut pass = model.begin(&mut tape, Mode::Infer, false);
        let v = tape.constant(s.clone());
        let g = pass.encode_gloss_level1(&mut tape, v).unwrap();
        tape.value(g).clone()
    };
    for _ in 0..pairs {
        let t = r.random_range(16..=200);
        let k = (t - 16) / 4 + 1;
        let i = r.random_range(0..k);
        let s = random(&mut r, &[t, 64]);
        let base = g1(&s);
        let (lo, hi) = (i * 4, i * 4 + 16);
        let mut outside = s.clone();
        for row in (0..t).filter(|&x| x < lo || x >= hi) {
            outside.data_mut()[row * 64..(row + 1) * 64].iter_mut().for_each(|v| *v += 3.0);
        }
        if g1(&outside).row(i) != base.row(i) {
            return Err(format!("t={t} i={i}: g_i depends on frames outside [{lo}, {hi})"));
        }
        let mut inside = s.clone();
        for row in lo..hi {
            inside.data_mut()[row * 64..(row + 1) * 64].iter_mut().for_each(|v| *v = -*v * 2.0 + 1.0);
        }
        if g1(&inside).row(i) == base.row(i) {
            return Err(format!("t={t} i={i}: g_i insensitive to its own window"));
        }
    }
    Ok(())
}
