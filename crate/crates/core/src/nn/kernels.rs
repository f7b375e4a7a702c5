//! Raw loops behind the spatial graph ops. Layout is NCHW throughout.

use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if padded < k || stride == 0 {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }

    fn cols_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.positions();
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.positions();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x [B,C,H,W]` with `w [O,C,k,k]`.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, l) = (g.cols_rows(), g.positions());
    let in_per = g.in_ch * g.h * g.w;
    let out_per = g.out_ch * l;
    let mut out = vec![T::zero(); g.batch * out_per];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * l]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            g.out_ch,
            rows,
            l,
            w,
            false,
            src,
            false,
            &mut out[b * out_per..(b + 1) * out_per],
            T::zero(),
        );
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, l) = (g.cols_rows(), g.positions());
    let in_per = g.in_ch * g.h * g.w;
    let out_per = g.out_ch * l;
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_per]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_ch * rows]);
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * l }];
    let mut dcols = vec![T::zero(); if pointwise || !need_dx { 0 } else { rows * l }];
    for b in 0..g.batch {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let gb = &gout[b * out_per..(b + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            T::gemm(g.out_ch, l, rows, gb, false, src, true, dw, T::one());
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            if pointwise {
                T::gemm(rows, g.out_ch, l, w, true, gb, false, dxb, T::zero());
            } else {
                T::gemm(rows, g.out_ch, l, w, true, gb, false, &mut dcols, T::zero());
                col2im(&dcols, g, dxb);
            }
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Max pooling without padding. Returns values and flat argmax indices.
pub fn max_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let n = g.planes * g.ho * g.wo;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = base + oy * g.stride * g.w + ox * g.stride;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let idx = base + (oy * g.stride + ki) * g.w + ox * g.stride + kj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn upsample2x_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h2 + y) * w2 + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[(p * h + y / 2) * w + xx / 2] += g[(p * h2 + y) * w2 + xx];
            }
        }
    }
    dx
}
