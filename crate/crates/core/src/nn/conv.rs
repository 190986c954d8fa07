//! 2-D convolution via im2col + GEMM, with the matching backward pass.

use super::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        Self { cin, cout, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.kernel) / self.stride + 1, (w + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.col_rows()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &Conv2dGeom, x: &[T], h: usize, w: usize, cols: &mut [T]) {
    let (oh, ow) = g.out_hw(h, w);
    let ohw = oh * ow;
    let k = g.kernel;
    for c in 0..g.cin {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx).min(ow);
                        let hi = (w + g.pad).saturating_sub(kx).min(ow).max(lo);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = lo + kx - g.pad;
                            line[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Conv2dGeom, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = g.out_hw(h, w);
    let ohw = oh * ow;
    let k = g.kernel;
    for c in 0..g.cin {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `cout x cin x k x k`.
pub fn conv2d_forward<T: Real>(g: &Conv2dGeom, x: &Tensor4<T>, weight: &[T], bias: Option<&[T]>) -> Tensor4<T> {
    assert_eq!(x.c, g.cin, "conv input channels");
    assert_eq!(weight.len(), g.weight_len(), "conv weight length");
    let (oh, ow) = g.out_hw(x.h, x.w);
    let ohw = oh * ow;
    let mut out = Tensor4::zeros(x.n, g.cout, oh, ow);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * ohw] };
    for i in 0..x.n {
        let cols_ref: &[T] = if g.is_pointwise() {
            x.item(i)
        } else {
            im2col(g, x.item(i), x.h, x.w, &mut cols);
            &cols
        };
        let o = out.item_mut(i);
        T::gemm(g.cout, g.col_rows(), ohw, T::one(), weight, false, cols_ref, false, T::zero(), o);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut o[co * ohw..(co + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Backward convolution. Accumulates into `dweight` / `dbias`; returns the
/// input gradient when `need_dx`.
pub fn conv2d_backward<T: Real>(
    g: &Conv2dGeom,
    x: &Tensor4<T>,
    weight: &[T],
    dout: &Tensor4<T>,
    dweight: &mut [T],
    mut dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor4<T>> {
    let (oh, ow) = g.out_hw(x.h, x.w);
    assert_eq!([dout.n, dout.c, dout.h, dout.w], [x.n, g.cout, oh, ow], "conv dout shape");
    let ohw = oh * ow;
    let rows = g.col_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ohw] };
    let mut dcols = vec![T::zero(); if need_dx { rows * ohw } else { 0 }];
    let mut dx = need_dx.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
    for i in 0..x.n {
        let d = dout.item(i);
        if let Some(db) = dbias.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += d[co * ohw..(co + 1) * ohw].iter().copied().sum::<T>();
            }
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            x.item(i)
        } else {
            im2col(g, x.item(i), x.h, x.w, &mut cols);
            &cols
        };
        T::gemm(g.cout, ohw, rows, T::one(), d, false, cols_ref, true, T::one(), dweight);
        if let Some(dx) = dx.as_mut() {
            if g.is_pointwise() {
                T::gemm(rows, g.cout, ohw, T::one(), weight, true, d, false, T::zero(), dx.item_mut(i));
            } else {
                T::gemm(rows, g.cout, ohw, T::one(), weight, true, d, false, T::zero(), &mut dcols);
                col2im(g, &dcols, x.h, x.w, dx.item_mut(i));
            }
        }
    }
    dx
}
