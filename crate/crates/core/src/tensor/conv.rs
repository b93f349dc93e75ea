//! Convolution kernels: im2col lowering to GEMM.
//!
//! Each output element is a dot product over `(c_in, ky, kx)` in a fixed
//! order that does not depend on the batch size or the output position, so a
//! frame convolved alone produces the same bits as inside a batch.

use super::Real;
use crate::parallel;
use crate::{Error, Result};

/// Frames per partial sum when reducing weight gradients over a batch.
const WGRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Result<Self> {
        if sh == 0 || sw == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / sh + 1,
            ow: (w + 2 * pw - kw) / sw + 1,
        })
    }

    /// Rows of the lowered matrix.
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_frame(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_frame(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c_in {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.out_plane();
        dx.fill(T::zero());
        for ci in 0..self.c_in {
            let xc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                xc[iy as usize * self.w + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over `n` frames. Returns the output and the lowered
/// input (kept for the backward pass).
pub(crate) fn forward<T: Real>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> (Vec<T>, Vec<T>) {
    let kdim = g.k();
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); n * kdim * plane];
    parallel::for_each_chunk_mut(&mut cols, kdim * plane, |f, c| {
        g.im2col(&x[f * g.in_frame()..(f + 1) * g.in_frame()], c)
    });
    let mut out = vec![T::zero(); n * g.out_frame()];
    parallel::for_each_chunk_mut(&mut out, g.out_frame(), |f, o| {
        for (co, row) in o.chunks_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        T::gemm(
            g.c_out,
            kdim,
            plane,
            weight,
            false,
            &cols[f * kdim * plane..(f + 1) * kdim * plane],
            false,
            T::one(),
            o,
        );
    });
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    dy: &[T],
    cols: &[T],
    weight: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let kdim = g.k();
    let plane = g.out_plane();
    let of = g.out_frame();

    let mut db = vec![T::zero(); g.c_out];
    for f in 0..n {
        for (co, d) in db.iter_mut().enumerate() {
            let row = &dy[f * of + co * plane..f * of + (co + 1) * plane];
            *d += row.iter().copied().sum::<T>();
        }
    }

    let chunks = n.div_ceil(WGRAD_CHUNK);
    let partials = parallel::map_range(chunks, |ci| {
        let mut dw = vec![T::zero(); g.c_out * kdim];
        for f in ci * WGRAD_CHUNK..((ci + 1) * WGRAD_CHUNK).min(n) {
            T::gemm(
                g.c_out,
                plane,
                kdim,
                &dy[f * of..(f + 1) * of],
                false,
                &cols[f * kdim * plane..(f + 1) * kdim * plane],
                true,
                T::one(),
                &mut dw,
            );
        }
        dw
    });
    let mut dw = vec![T::zero(); g.c_out * kdim];
    for p in &partials {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a += b;
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * g.in_frame()];
        parallel::for_each_chunk_mut(&mut dx, g.in_frame(), |f, dxf| {
            let mut dcols = vec![T::zero(); kdim * plane];
            T::gemm(
                kdim,
                g.c_out,
                plane,
                weight,
                true,
                &dy[f * of..(f + 1) * of],
                false,
                T::zero(),
                &mut dcols,
            );
            g.col2im(&dcols, dxf);
        });
        dx
    });

    ConvGrads { dx, dw, db }
}
