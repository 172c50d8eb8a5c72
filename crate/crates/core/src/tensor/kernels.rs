//! Raw loop nests behind the tape operations. Everything here works on
//! plain slices for a single batch element.

use super::Real;

/// Geometry of a 2-D "same" convolution with a square odd kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl Conv2dGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    fn offsets(&self, ky: usize, kx: usize) -> (isize, isize) {
        let pad = (self.dilation * (self.k - 1) / 2) as isize;
        (
            (ky * self.dilation) as isize - pad,
            (kx * self.dilation) as isize - pad,
        )
    }

    /// Output columns `[x0, x1)` whose shifted source column is in range.
    fn valid_cols(&self, dx: isize) -> (usize, usize) {
        let w = self.w as isize;
        let x0 = (-dx).clamp(0, w);
        let x1 = (w - dx).clamp(0, w);
        (x0 as usize, x1.max(x0) as usize)
    }
}

pub(crate) fn im2col_2d<T: Real>(x: &[T], g: Conv2dGeom, col: &mut [T]) {
    let hw = g.hw();
    for ci in 0..g.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * hw;
                let (dy, dx) = g.offsets(ky, kx);
                let (x0, x1) = g.valid_cols(dx);
                for y in 0..g.h {
                    let dst = &mut col[row + y * g.w..row + (y + 1) * g.w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize || x0 == x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    let src = sy as usize * g.w;
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&plane[src + s0..src + s0 + (x1 - x0)]);
                }
            }
        }
    }
}

pub(crate) fn col2im_2d<T: Real>(col: &[T], g: Conv2dGeom, dx_out: &mut [T]) {
    let hw = g.hw();
    for ci in 0..g.c_in {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * hw;
                let (dy, dx) = g.offsets(ky, kx);
                let (x0, x1) = g.valid_cols(dx);
                if x0 == x1 {
                    continue;
                }
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + y * g.w + x0..row + y * g.w + x1];
                    let s0 = sy as usize * g.w + (x0 as isize + dx) as usize;
                    for (d, s) in plane[s0..s0 + (x1 - x0)].iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Geometry of a strided, dilated, zero-padded 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub c_in: usize,
    pub len: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub frames: usize,
}

impl Conv1dGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k
    }

    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        let pos = (t * self.stride + j * self.dilation) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }
}

pub(crate) fn im2col_1d<T: Real>(x: &[T], g: Conv1dGeom, col: &mut [T]) {
    for ci in 0..g.c_in {
        let signal = &x[ci * g.len..(ci + 1) * g.len];
        for j in 0..g.k {
            let row = &mut col[(ci * g.k + j) * g.frames..(ci * g.k + j + 1) * g.frames];
            for (t, dst) in row.iter_mut().enumerate() {
                *dst = g.source(t, j).map_or(T::zero(), |p| signal[p]);
            }
        }
    }
}

pub(crate) fn col2im_1d<T: Real>(col: &[T], g: Conv1dGeom, dx: &mut [T]) {
    for ci in 0..g.c_in {
        let signal = &mut dx[ci * g.len..(ci + 1) * g.len];
        for j in 0..g.k {
            let row = &col[(ci * g.k + j) * g.frames..(ci * g.k + j + 1) * g.frames];
            for (t, s) in row.iter().enumerate() {
                if let Some(p) = g.source(t, j) {
                    signal[p] += *s;
                }
            }
        }
    }
}

/// 2x2 max pooling over one `h x w` plane. Returns flat argmax indices
/// into the plane; ties keep the first element in row-major window order.
pub(crate) fn maxpool_plane<T: Real>(x: &[T], h: usize, w: usize, out: &mut [T], arg: &mut [u32]) {
    let (ho, wo) = (h / 2, w / 2);
    for oy in 0..ho {
        for ox in 0..wo {
            let base = 2 * oy * w + 2 * ox;
            let mut best = base;
            for cand in [base + 1, base + w, base + w + 1] {
                if x[cand] > x[best] {
                    best = cand;
                }
            }
            out[oy * wo + ox] = x[best];
            arg[oy * wo + ox] = best as u32;
        }
    }
}
