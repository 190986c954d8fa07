//! Token-wise operations shared by the transformer encoder and the attention decoder.

use super::Real;

/// `y = x W^T + b` with `x: rows x inp`, `W: out x inp`.
pub fn linear<T: Real>(x: &[T], rows: usize, inp: usize, w: &[T], b: Option<&[T]>, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    T::gemm(rows, inp, out, T::one(), x, false, w, true, T::zero(), &mut y);
    if let Some(b) = b {
        for row in y.chunks_exact_mut(out) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    y
}

/// Backward of [`linear`]; accumulates `dw` / `db`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Vec<T>> {
    T::gemm(out, rows, inp, T::one(), dy, true, x, false, T::one(), dw);
    if let Some(db) = db {
        for row in dy.chunks_exact(out) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * inp];
        T::gemm(rows, out, inp, T::one(), dy, false, w, false, T::zero(), &mut dx);
        dx
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let v = x.as_f64();
    T::lit(0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let v = x.as_f64();
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    T::lit(0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
}

/// `x * sigmoid(1.702 x)`, the activation used by the CLIP transformer MLPs.
pub fn quick_gelu(x: f32) -> f32 {
    x / (1.0 + (-1.702 * x).exp())
}

pub fn softmax_rows<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Saved per-head tensors for [`attention_backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
}

fn split_heads<T: Real>(qkv: &[T], tokens: usize, dim: usize, heads: usize, which: usize) -> Vec<T> {
    let dh = dim / heads;
    let mut out = vec![T::zero(); tokens * dim];
    for h in 0..heads {
        for t in 0..tokens {
            let src = &qkv[t * 3 * dim + which * dim + h * dh..][..dh];
            out[(h * tokens + t) * dh..][..dh].copy_from_slice(src);
        }
    }
    out
}

/// Multi-head scaled dot-product self-attention over packed `tokens x 3*dim`
/// projections (q, k, v concatenated). Returns the `tokens x dim` context.
pub fn attention<T: Real>(qkv: &[T], tokens: usize, dim: usize, heads: usize, keep_cache: bool) -> (Vec<T>, Option<AttentionCache<T>>) {
    let dh = dim / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let q = split_heads(qkv, tokens, dim, heads, 0);
    let k = split_heads(qkv, tokens, dim, heads, 1);
    let v = split_heads(qkv, tokens, dim, heads, 2);
    let mut probs = vec![T::zero(); heads * tokens * tokens];
    let mut ctx = vec![T::zero(); tokens * dim];
    let mut head_out = vec![T::zero(); tokens * dh];
    for h in 0..heads {
        let qh = &q[h * tokens * dh..(h + 1) * tokens * dh];
        let kh = &k[h * tokens * dh..(h + 1) * tokens * dh];
        let vh = &v[h * tokens * dh..(h + 1) * tokens * dh];
        let p = &mut probs[h * tokens * tokens..(h + 1) * tokens * tokens];
        T::gemm(tokens, dh, tokens, scale, qh, false, kh, true, T::zero(), p);
        softmax_rows(p, tokens);
        T::gemm(tokens, tokens, dh, T::one(), p, false, vh, false, T::zero(), &mut head_out);
        for t in 0..tokens {
            ctx[t * dim + h * dh..][..dh].copy_from_slice(&head_out[t * dh..(t + 1) * dh]);
        }
    }
    let cache = keep_cache.then_some(AttentionCache { q, k, v, probs });
    (ctx, cache)
}

/// Gradient of [`attention`] w.r.t. the packed qkv input.
pub fn attention_backward<T: Real>(dctx: &[T], cache: &AttentionCache<T>, tokens: usize, dim: usize, heads: usize) -> Vec<T> {
    let dh = dim / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut dqkv = vec![T::zero(); tokens * 3 * dim];
    let mut dout = vec![T::zero(); tokens * dh];
    let mut dp = vec![T::zero(); tokens * tokens];
    let mut dq = vec![T::zero(); tokens * dh];
    let mut dk = vec![T::zero(); tokens * dh];
    let mut dv = vec![T::zero(); tokens * dh];
    for h in 0..heads {
        let qh = &cache.q[h * tokens * dh..(h + 1) * tokens * dh];
        let kh = &cache.k[h * tokens * dh..(h + 1) * tokens * dh];
        let vh = &cache.v[h * tokens * dh..(h + 1) * tokens * dh];
        let p = &cache.probs[h * tokens * tokens..(h + 1) * tokens * tokens];
        for t in 0..tokens {
            dout[t * dh..(t + 1) * dh].copy_from_slice(&dctx[t * dim + h * dh..][..dh]);
        }
        // dV = P^T dO ; dP = dO V^T
        T::gemm(tokens, tokens, dh, T::one(), p, true, &dout, false, T::zero(), &mut dv);
        T::gemm(tokens, dh, tokens, T::one(), &dout, false, vh, true, T::zero(), &mut dp);
        // softmax backward, then fold in the 1/sqrt(dh) scale
        for (prow, drow) in p.chunks_exact(tokens).zip(dp.chunks_exact_mut(tokens)) {
            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in drow.iter_mut().zip(prow) {
                *d = pv * (*d - dot) * scale;
            }
        }
        T::gemm(tokens, tokens, dh, T::one(), &dp, false, kh, false, T::zero(), &mut dq);
        T::gemm(tokens, tokens, dh, T::one(), &dp, true, qh, false, T::zero(), &mut dk);
        for t in 0..tokens {
            let base = t * 3 * dim + h * dh;
            dqkv[base..base + dh].copy_from_slice(&dq[t * dh..(t + 1) * dh]);
            dqkv[base + dim..base + dim + dh].copy_from_slice(&dk[t * dh..(t + 1) * dh]);
            dqkv[base + 2 * dim..base + 2 * dim + dh].copy_from_slice(&dv[t * dh..(t + 1) * dh]);
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for x in [-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let (tokens, dim, heads) = (5, 8, 2);
        let qkv: Vec<f64> = (0..tokens * 3 * dim).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..tokens * dim).map(|i| (i as f64 * 0.13).cos()).collect();
        let loss = |qkv: &[f64]| {
            let (ctx, _) = attention(qkv, tokens, dim, heads, false);
            ctx.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = attention(&qkv, tokens, dim, heads, true);
        let grad = attention_backward(&w, &cache.unwrap(), tokens, dim, heads);
        for j in (0..qkv.len()).step_by(7) {
            let mut p = qkv.clone();
            p[j] += 1e-6;
            let mut m = qkv.clone();
            m[j] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - grad[j]).abs() < 1e-7, "index {j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1000.0];
        softmax_rows(&mut x, 3);
        assert!((x[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((x[5] - 1.0).abs() < 1e-12);
    }
}
