//! Raw NCHW kernels used by the tape. No autodiff bookkeeping lives here.

use crate::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x: (usize, usize, usize, usize),
        o: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let (n, c, h, w) = x;
        assert!(stride >= 1, "conv stride must be ≥ 1");
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "conv kernel {k} larger than padded input {h}x{w}"
        );
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfold `x` into `col[c·k·k, n·oh·ow]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let row_base = row * cols;
                for b in 0..g.n {
                    let plane = &x[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let out = &mut col[row_base + b * ohw..][..ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let dst = &mut out[oy * g.ow..][..g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
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
}

/// Fold `col` back into `dx`, accumulating overlapping contributions.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.col_cols();
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let row_base = row * cols;
                for b in 0..g.n {
                    let plane = &mut dx[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &col[row_base + b * ohw..][..ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        let s = &src[oy * g.ow..][..g.ow];
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[n,o,oh,ow]` via one batched im2col + GEMM.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let mut col = vec![T::zero(); rows * cols];
    im2col(x, g, &mut col);
    let mut y = vec![T::zero(); g.o * cols];
    T::gemm(
        g.o,
        rows,
        cols,
        weight,
        false,
        &col,
        false,
        T::zero(),
        &mut y,
    );
    drop(col);
    let ohw = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    for oc in 0..g.o {
        let bv = bias.map_or(T::zero(), |b| b[oc]);
        for b in 0..g.n {
            let src = &y[oc * cols + b * ohw..][..ohw];
            let dst = &mut out[(b * g.o + oc) * ohw..][..ohw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let ohw = g.oh * g.ow;
    // dy'[o, n·ohw]
    let mut dy = vec![T::zero(); g.o * cols];
    for oc in 0..g.o {
        for b in 0..g.n {
            let src = &dout[(b * g.o + oc) * ohw..][..ohw];
            dy[oc * cols + b * ohw..][..ohw].copy_from_slice(src);
        }
    }
    let db = want_db.then(|| {
        (0..g.o)
            .map(|oc| dy[oc * cols..(oc + 1) * cols].iter().copied().sum())
            .collect()
    });
    let dw = want_dw.then(|| {
        let mut col = vec![T::zero(); rows * cols];
        im2col(x, g, &mut col);
        let mut dw = vec![T::zero(); g.o * rows];
        T::gemm(g.o, cols, rows, &dy, false, &col, true, T::zero(), &mut dw);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcol = vec![T::zero(); rows * cols];
        T::gemm(
            rows,
            g.o,
            cols,
            weight,
            true,
            &dy,
            false,
            T::zero(),
            &mut dcol,
        );
        let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
        col2im(&dcol, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Per-(sample, group) statistics over `c/groups · h · w` elements.
pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dims;
    let cpg = c / groups;
    let hw = h * w;
    let len = cpg * hw;
    let cnt = T::from_usize(len).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let off = (b * c + gi * cpg) * hw;
            let seg = &x[off..off + len];
            let mean = seg.iter().copied().sum::<T>() / cnt;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let rstd = T::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let (ga, be) = (gamma[ch], beta[ch]);
                let s = off + cc * hw;
                for i in s..s + hw {
                    out[i] = (x[i] - mean) * rstd * ga + be;
                }
            }
        }
    }
    (out, means, rstds)
}

pub(crate) fn group_norm_backward<T: Real>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    groups: usize,
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dims;
    let cpg = c / groups;
    let hw = h * w;
    let cnt = T::from_usize(cpg * hw).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for gi in 0..groups {
            let mean = means[b * groups + gi];
            let rstd = rstds[b * groups + gi];
            let off = (b * c + gi * cpg) * hw;
            // sums of dxhat and dxhat·xhat over the group
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let s = off + cc * hw;
                for i in s..s + hw {
                    let xhat = (x[i] - mean) * rstd;
                    dgamma[ch] = dgamma[ch] + dout[i] * xhat;
                    dbeta[ch] = dbeta[ch] + dout[i];
                    let dxh = dout[i] * gamma[ch];
                    s1 = s1 + dxh;
                    s2 = s2 + dxh * xhat;
                }
            }
            let m1 = s1 / cnt;
            let m2 = s2 / cnt;
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let s = off + cc * hw;
                for i in s..s + hw {
                    let xhat = (x[i] - mean) * rstd;
                    let dxh = dout[i] * gamma[ch];
                    dx[i] = rstd * (dxh - m1 - xhat * m2);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn upsample2<T: Real>(x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(
    dout: &[T],
    dims: (usize, usize, usize, usize),
) -> Vec<T> {
    let (n, c, h, w) = dims;
    let ow = 2 * w;
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dout[p * 4 * h * w..][..4 * h * w];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..2 * h {
            for xx in 0..ow {
                let i = (y / 2) * w + xx / 2;
                dst[i] = dst[i] + src[y * ow + xx];
            }
        }
    }
    dx
}

/// 2×2 average pooling; `h` and `w` must be even.
pub(crate) fn avg_pool2<T: Real>(x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (n, c, h, w) = dims;
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "avg_pool2 needs even dims, got {h}x{w}"
    );
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = (a + b + cc + d) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(
    dout: &[T],
    dims: (usize, usize, usize, usize),
) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dout[p * oh * ow..][..oh * ow];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    dx
}
