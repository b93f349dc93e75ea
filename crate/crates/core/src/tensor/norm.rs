//! Per-channel batch normalization over an `(outer, channels, inner)` view.

use super::Real;

/// Statistics of one training-mode batch, used to update running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (biased when the batch has a single element per channel).
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BnLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn for_channel<T: Real>(&self, data: &[T], c: usize, mut f: impl FnMut(usize, T)) {
        for o in 0..self.outer {
            let base = (o * self.channels + c) * self.inner;
            for i in 0..self.inner {
                f(base + i, data[base + i]);
            }
        }
    }
}

pub(crate) struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BnStats<T>>,
}

/// `running` is `Some((mean, var))` for inference mode, `None` to normalize
/// with the statistics of `x` itself.
pub(crate) fn forward<T: Real>(
    layout: BnLayout,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
    eps: T,
) -> BnForward<T> {
    let m = T::of(layout.count() as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); layout.channels];
    let mut batch_mean = vec![T::zero(); layout.channels];
    let mut batch_var = vec![T::zero(); layout.channels];
    for c in 0..layout.channels {
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => {
                let mut s = T::zero();
                layout.for_channel(x, c, |_, v| s += v);
                let mean = s / m;
                let mut ss = T::zero();
                layout.for_channel(x, c, |_, v| ss += (v - mean) * (v - mean));
                let var = ss / m;
                batch_mean[c] = mean;
                batch_var[c] = if layout.count() > 1 {
                    ss / (m - T::one())
                } else {
                    var
                };
                (mean, var)
            }
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[c] = is;
        layout.for_channel(x, c, |idx, v| {
            let h = (v - mean) * is;
            xhat[idx] = h;
            y[idx] = gamma[c] * h + beta[c];
        });
    }
    BnForward {
        y,
        xhat,
        inv_std,
        stats: running.is_none().then_some(BnStats {
            mean: batch_mean,
            var: batch_var,
        }),
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn backward<T: Real>(
    layout: BnLayout,
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::of(layout.count() as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); layout.channels];
    let mut dbeta = vec![T::zero(); layout.channels];
    for c in 0..layout.channels {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        layout.for_channel(dy, c, |idx, d| {
            sg += d * xhat[idx];
            sb += d;
        });
        dgamma[c] = sg;
        dbeta[c] = sb;
        let scale = gamma[c] * inv_std[c];
        if batch_stats {
            layout.for_channel(dy, c, |idx, d| {
                dx[idx] = scale / m * (m * d - sb - xhat[idx] * sg);
            });
        } else {
            layout.for_channel(dy, c, |idx, d| dx[idx] = scale * d);
        }
    }
    (dx, dgamma, dbeta)
}
