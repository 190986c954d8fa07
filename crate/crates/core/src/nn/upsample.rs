//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use super::{Real, Tensor4};

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Resamples one `h x w` plane to `oh x ow`.
pub fn resize_plane<T: Real>(src: &[T], h: usize, w: usize, oh: usize, ow: usize, dst: &mut [T]) {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    for (oy, a) in ty.iter().enumerate() {
        let fy = T::lit(a.frac);
        let r0 = &src[a.lo * w..(a.lo + 1) * w];
        let r1 = &src[a.hi * w..(a.hi + 1) * w];
        let out = &mut dst[oy * ow..(oy + 1) * ow];
        for (ox, b) in tx.iter().enumerate() {
            let fx = T::lit(b.frac);
            let top = r0[b.lo] + (r0[b.hi] - r0[b.lo]) * fx;
            let bot = r1[b.lo] + (r1[b.hi] - r1[b.lo]) * fx;
            out[ox] = top + (bot - top) * fy;
        }
    }
}

/// Adjoint of [`resize_plane`]: scatters `dst` gradients back to the source grid.
pub fn resize_plane_backward<T: Real>(dout: &[T], h: usize, w: usize, oh: usize, ow: usize, dsrc: &mut [T]) {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    for (oy, a) in ty.iter().enumerate() {
        let fy = T::lit(a.frac);
        let gy = [T::one() - fy, fy];
        for (ox, b) in tx.iter().enumerate() {
            let fx = T::lit(b.frac);
            let g = dout[oy * ow + ox];
            let gx = [T::one() - fx, fx];
            for (row, wy) in [a.lo, a.hi].into_iter().zip(gy) {
                for (col, wx) in [b.lo, b.hi].into_iter().zip(gx) {
                    dsrc[row * w + col] += g * wy * wx;
                }
            }
        }
    }
}

pub fn upsample<T: Real>(x: &Tensor4<T>, oh: usize, ow: usize) -> Tensor4<T> {
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    let (p, op) = (x.plane(), oh * ow);
    for k in 0..x.n * x.c {
        resize_plane(&x.data[k * p..(k + 1) * p], x.h, x.w, oh, ow, &mut out.data[k * op..(k + 1) * op]);
    }
    out
}

pub fn upsample_backward<T: Real>(dout: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(dout.n, dout.c, h, w);
    let (p, op) = (h * w, dout.plane());
    for k in 0..dout.n * dout.c {
        resize_plane_backward(&dout.data[k * op..(k + 1) * op], h, w, dout.h, dout.w, &mut dx.data[k * p..(k + 1) * p]);
    }
    dx
}
