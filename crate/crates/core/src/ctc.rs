//! CTC collapse, loss, greedy decoding and forced alignment.
//!
//! All dynamic programs run on the blank-interleaved extended label sequence
//! `(blank, y1, blank, y2, ..., yU, blank)` in log space.

use crate::{Error, Result};

/// Log-space stand-in for `-inf`; survives additions without overflowing.
pub const LOG_ZERO: f64 = -1e30;

/// CTC many-to-one map: merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Number of adjacent equal pairs in `labels`.
pub fn repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Fewest steps that can emit `labels`.
pub fn min_steps(labels: &[usize]) -> usize {
    labels.len() + repeats(labels)
}

pub fn check_feasible(steps: usize, labels: &[usize]) -> Result<()> {
    if steps < min_steps(labels) {
        return Err(Error::InfeasibleTarget {
            steps,
            labels: labels.len(),
            repeats: repeats(labels),
        });
    }
    Ok(())
}

fn lse(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo <= LOG_ZERO {
        hi.max(LOG_ZERO)
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

struct Extended {
    labels: Vec<usize>,
}

impl Extended {
    fn new(labels: &[usize], blank: usize) -> Self {
        let mut ext = Vec::with_capacity(2 * labels.len() + 1);
        ext.push(blank);
        for &l in labels {
            ext.push(l);
            ext.push(blank);
        }
        Extended { labels: ext }
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    /// Whether position `s` may be entered directly from `s - 2`.
    fn can_skip(&self, s: usize, blank: usize) -> bool {
        s >= 2 && self.labels[s] != blank && self.labels[s] != self.labels[s - 2]
    }
}

fn validate(lp: &[f64], k: usize, u: usize, labels: &[usize], blank: usize) -> Result<()> {
    if k == 0 || u == 0 || lp.len() != k * u {
        return Err(Error::dim(format!("log-prob map of length {} is not ({k}, {u})", lp.len())));
    }
    if blank >= u {
        return Err(Error::dim(format!("blank index {blank} out of range for {u} classes")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= u || l == blank) {
        return Err(Error::dim(format!("label {bad} is blank or out of range")));
    }
    check_feasible(k, labels)
}

/// Loss and its gradient w.r.t. the per-step log-probabilities.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub loss: f64,
    /// `(k, u)` row-major, `d loss / d log_probs`.
    pub grad: Vec<f64>,
}

/// `-log sum_{pi in B^-1(y)} prod_j p(pi_j | j)` by the forward-backward recursion.
///
/// `lp` is the `(k, u)` row-major map of log-probabilities. Rows need not be
/// normalized; the gradient treats every entry as an independent variable.
pub fn loss_and_grad(lp: &[f64], k: usize, u: usize, labels: &[usize], blank: usize) -> Result<CtcOutput> {
    validate(lp, k, u, labels, blank)?;
    let ext = Extended::new(labels, blank);
    let s_len = ext.len();
    let at = |t: usize, s: usize| lp[t * u + ext.labels[s]];

    let mut alpha = vec![LOG_ZERO; k * s_len];
    alpha[0] = at(0, 0);
    if s_len > 1 {
        alpha[1] = at(0, 1);
    }
    for t in 1..k {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse(a, prev[s - 1]);
            }
            if ext.can_skip(s, blank) {
                a = lse(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a <= LOG_ZERO { LOG_ZERO } else { a + at(t, s) };
        }
    }
    let last = &alpha[(k - 1) * s_len..];
    let log_p = if s_len > 1 {
        lse(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };

    // beta[t][s]: log-prob of completing from (t, s), excluding step t's emission.
    let mut beta = vec![LOG_ZERO; k * s_len];
    beta[(k - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(k - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..k - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + at(t + 1, s2);
            let mut b = next(s);
            if s + 1 < s_len {
                b = lse(b, next(s + 1));
            }
            if s + 2 < s_len && ext.can_skip(s + 2, blank) {
                b = lse(b, next(s + 2));
            }
            beta[t * s_len + s] = b.max(LOG_ZERO);
        }
    }

    let mut grad = vec![0.0; k * u];
    for t in 0..k {
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if g > LOG_ZERO / 2.0 {
                grad[t * u + ext.labels[s]] -= g.exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Per-step argmax (lowest index wins ties) followed by [`collapse`].
pub fn greedy_decode<T: PartialOrd + Copy>(rows: &[T], u: usize, blank: usize) -> (Vec<usize>, Vec<usize>) {
    let path: Vec<usize> = rows.chunks(u).map(argmax).collect();
    let labels = collapse(&path, blank);
    (path, labels)
}

pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Highest-probability path that collapses to `labels` (Viterbi on the
/// extended trellis). On ties the predecessor furthest along the extended
/// sequence is taken, so labels are emitted as early as possible.
pub fn forced_align(lp: &[f64], k: usize, u: usize, labels: &[usize], blank: usize) -> Result<Vec<usize>> {
    validate(lp, k, u, labels, blank)?;
    let ext = Extended::new(labels, blank);
    let s_len = ext.len();
    let at = |t: usize, s: usize| lp[t * u + ext.labels[s]];

    let mut score = vec![LOG_ZERO; k * s_len];
    let mut back = vec![0usize; k * s_len];
    score[0] = at(0, 0);
    if s_len > 1 {
        score[1] = at(0, 1);
    }
    for t in 1..k {
        for s in 0..s_len {
            let prev = |s2: usize| score[(t - 1) * s_len + s2];
            let mut best = s;
            let mut best_score = prev(s);
            let mut consider = |cand: usize| {
                let v = prev(cand);
                if v > best_score {
                    best = cand;
                    best_score = v;
                }
            };
            // Staying wins ties, then the single advance, then the skip.
            if s >= 1 {
                consider(s - 1);
            }
            if ext.can_skip(s, blank) {
                consider(s - 2);
            }
            if best_score > LOG_ZERO {
                score[t * s_len + s] = best_score + at(t, s);
                back[t * s_len + s] = best;
            }
        }
    }
    let last = (k - 1) * s_len;
    let mut s = if s_len > 1 && score[last + s_len - 2] > score[last + s_len - 1] {
        s_len - 2
    } else {
        s_len - 1
    };
    let mut path = vec![0; k];
    for t in (0..k).rev() {
        path[t] = ext.labels[s];
        if t > 0 {
            s = back[t * s_len + s];
        }
    }
    debug_assert_eq!(collapse(&path, blank), labels);
    Ok(path)
}

/// Sum of `lp[j, path[j]]` in step order.
pub fn path_log_prob(lp: &[f64], u: usize, path: &[usize]) -> f64 {
    let mut total = lp[path[0]];
    for (j, &c) in path.iter().enumerate().skip(1) {
        total += lp[j * u + c];
    }
    total
}
