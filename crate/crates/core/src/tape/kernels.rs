//! Slice-level kernels behind the convolution, resampling and pooling ops.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `[ci, h, w]` plane stack into `[ci*kh*kw, ho*wo]` patches.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_out = g.col_cols();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: folds patch gradients back into `dx`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n_out = g.col_cols();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        frac: Vec::with_capacity(n_out),
    };
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(src - lo as f64);
    }
    taps
}

pub(crate) fn resize_plane<T: Real>(src: &[T], w_in: usize, ty: &Taps, tx: &Taps, dst: &mut [T]) {
    let w_out = tx.lo.len();
    for (oy, row) in dst.chunks_mut(w_out).enumerate() {
        let fy = T::of(ty.frac[oy]);
        let r0 = &src[ty.lo[oy] * w_in..(ty.lo[oy] + 1) * w_in];
        let r1 = &src[ty.hi[oy] * w_in..(ty.hi[oy] + 1) * w_in];
        for (ox, o) in row.iter_mut().enumerate() {
            let fx = T::of(tx.frac[ox]);
            let (l, h) = (tx.lo[ox], tx.hi[ox]);
            let top = r0[l] + (r0[h] - r0[l]) * fx;
            let bot = r1[l] + (r1[h] - r1[l]) * fx;
            *o = top + (bot - top) * fy;
        }
    }
}

pub(crate) fn resize_plane_adjoint<T: Real>(
    grad_out: &[T],
    w_in: usize,
    ty: &Taps,
    tx: &Taps,
    grad_in: &mut [T],
) {
    let w_out = tx.lo.len();
    for (oy, row) in grad_out.chunks(w_out).enumerate() {
        let fy = T::of(ty.frac[oy]);
        let (y0, y1) = (ty.lo[oy] * w_in, ty.hi[oy] * w_in);
        for (ox, &g) in row.iter().enumerate() {
            let fx = T::of(tx.frac[ox]);
            let (l, h) = (tx.lo[ox], tx.hi[ox]);
            let g_top = g * (T::one() - fy);
            let g_bot = g * fy;
            grad_in[y0 + l] = grad_in[y0 + l] + g_top * (T::one() - fx);
            grad_in[y0 + h] = grad_in[y0 + h] + g_top * fx;
            grad_in[y1 + l] = grad_in[y1 + l] + g_bot * (T::one() - fx);
            grad_in[y1 + h] = grad_in[y1 + h] + g_bot * fx;
        }
    }
}
