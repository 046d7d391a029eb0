//! im2col convolution kernels with "same" zero padding.

use rayon::prelude::*;

use super::{matmul, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride)
    }

    /// Rows of the column matrix.
    pub fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let (ow, pad) = (g.out_w(), g.pad());
    let lo = pad.saturating_sub(kx).div_ceil(g.stride).min(ow);
    let hi = (g.w + pad).saturating_sub(kx).div_ceil(g.stride).min(ow).max(lo);
    (lo, hi)
}

/// Column-matrix elements per tile, sized to stay cache resident.
const TILE_ELEMS: usize = 1 << 16;

/// Output rows `oy0..oy1` of the column matrix, `kdim × (rows · out_w)`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], oy0: usize, oy1: usize, cols: &mut [T]) {
    let (ow, pad) = (g.out_w(), g.pad() as isize);
    let p = (oy1 - oy0) * ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for (line, oy) in dst.chunks_mut(ow).zip(oy0..oy1) {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - pad as usize;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, &v) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for the same row range; accumulates into `dx`.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], oy0: usize, oy1: usize, dx: &mut [T]) {
    let (ow, pad) = (g.out_w(), g.pad() as isize);
    let p = (oy1 - oy0) * ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for (line, oy) in src.chunks(ow).zip(oy0..oy1) {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kx - pad as usize;
                    if g.stride == 1 {
                        dst[start..start + hi - lo]
                            .iter_mut()
                            .zip(&line[lo..hi])
                            .for_each(|(d, &v)| *d += v);
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(&line[lo..hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output-row ranges whose column matrices fit in one tile.
fn row_tiles(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let oh = g.out_h();
    let rows = (TILE_ELEMS / (g.kdim() * g.out_w())).max(1);
    (0..oh).step_by(rows).map(move |y0| (y0, (y0 + rows).min(oh)))
}

/// Row-major matrix view with an explicit row and column stride.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn dense(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c (+)= a · b` on strided views.
fn gemm<T: Scalar>(a: &[T], av: View, b: &[T], bv: View, c: &mut [T], cv: View, accumulate: bool) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    assert!(av.span() <= a.len() && bv.span() <= b.len() && cv.span() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: every view was checked to lie inside its slice, and `c` is a
    // unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            T::one(),
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_sz = g.cin * g.h * g.w;
    let p = g.out_pixels();
    let out_sz = g.cout * p;
    let (ow, kd) = (g.out_w(), g.kdim());
    let mut out = vec![T::zero(); g.n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(s, y)| {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        if let Some(b) = bias {
            for (co, row) in y.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        if g.is_pointwise() {
            matmul(g.cout, g.cin, p, weight, false, xs, false, y, bias.is_some());
            return;
        }
        let mut cols = vec![T::zero(); TILE_ELEMS.max(kd * ow)];
        for (y0, y1) in row_tiles(g) {
            let tp = (y1 - y0) * ow;
            im2col(g, xs, y0, y1, &mut cols);
            let cv = View {
                rows: g.cout,
                cols: tp,
                rs: p,
                cs: 1,
            };
            gemm(weight, View::dense(g.cout, kd), &cols, View::dense(kd, tp), &mut y[y0 * ow..], cv, bias.is_some());
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// Gradients for one convolution. Per-sample weight gradients are summed in
/// sample order, so results do not depend on the thread count.
pub(crate) fn backward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], dy: &[T], need_dx: bool) -> ConvGrads<T> {
    let in_sz = g.cin * g.h * g.w;
    let p = g.out_pixels();
    let out_sz = g.cout * p;
    let (ow, kd) = (g.out_w(), g.kdim());

    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * in_sz..(s + 1) * in_sz];
            let dys = &dy[s * out_sz..(s + 1) * out_sz];
            let db: Vec<T> = dys.chunks(p).map(super::lane_sum).collect();
            let mut dw = vec![T::zero(); g.cout * kd];
            if g.is_pointwise() {
                matmul(g.cout, p, g.cin, dys, false, xs, true, &mut dw, false);
                let dx = need_dx.then(|| {
                    let mut dx = vec![T::zero(); in_sz];
                    matmul(g.cin, g.cout, p, weight, true, dys, false, &mut dx, false);
                    dx
                });
                return (dw, db, dx);
            }
            let mut dx = need_dx.then(|| vec![T::zero(); in_sz]);
            let mut cols = vec![T::zero(); TILE_ELEMS.max(kd * ow)];
            for (y0, y1) in row_tiles(g) {
                let tp = (y1 - y0) * ow;
                let dyv = View {
                    rows: g.cout,
                    cols: tp,
                    rs: p,
                    cs: 1,
                };
                let dys_tile = &dys[y0 * ow..];
                im2col(g, xs, y0, y1, &mut cols);
                gemm(dys_tile, dyv, &cols, View::dense(kd, tp).t(), &mut dw, View::dense(g.cout, kd), true);
                if let Some(dx) = dx.as_mut() {
                    gemm(weight, View::dense(g.cout, kd).t(), dys_tile, dyv, &mut cols, View::dense(kd, tp), false);
                    col2im(g, &cols, y0, y1, dx);
                }
            }
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); g.cout * kd];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * in_sz));
    for (sdw, sdb, sdx) in per_sample {
        dw.iter_mut().zip(&sdw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&sdb).for_each(|(a, &b)| *a += b);
        if let (Some(all), Some(part)) = (dx.as_mut(), sdx) {
            all.extend_from_slice(&part);
        }
    }
    ConvGrads { dx, dw, db }
}
