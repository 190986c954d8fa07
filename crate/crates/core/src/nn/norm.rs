use super::{Real, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Saved state for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode batch norm over `(N, H, W)` per channel. Updates the running
/// statistics in place (unbiased variance, momentum 0.1).
pub fn batch_norm_train<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
) -> (Tensor4<T>, BatchNormCache<T>) {
    let (n, c, plane) = (x.n, x.c, x.plane());
    let count = (n * plane) as f64;
    let mut y = Tensor4::zeros(n, c, x.h, x.w);
    let mut xhat = Tensor4::zeros(n, c, x.h, x.w);
    let mut inv_std = vec![T::zero(); c];
    let momentum = T::lit(BN_MOMENTUM);
    for ch in 0..c {
        let mut sum = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            sum += x.data[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            sq += x.data[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / count;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = T::lit(istd);
        let (m, s) = (T::lit(mean), T::lit(istd));
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                let h = (x.data[j] - m) * s;
                xhat.data[j] = h;
                y.data[j] = gamma[ch] * h + beta[ch];
            }
        }
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * m;
        running_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * T::lit(unbiased);
    }
    (y, BatchNormCache { xhat, inv_std })
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_eval<T: Real>(x: &Tensor4<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> Tensor4<T> {
    let mut y = x.clone();
    batch_norm_eval_in_place(&mut y, gamma, beta, mean, var);
    y
}

pub fn batch_norm_eval_in_place<T: Real>(x: &mut Tensor4<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T]) {
    let (c, plane) = (x.c, x.plane());
    let eps = T::lit(BN_EPS);
    for i in 0..x.n {
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch] + eps).sqrt();
            let shift = beta[ch] - mean[ch] * scale;
            let off = (i * c + ch) * plane;
            for v in &mut x.data[off..off + plane] {
                *v = *v * scale + shift;
            }
        }
    }
}

/// Backward of [`batch_norm_train`]. `dy` is the gradient w.r.t. the normalized,
/// scaled output. Accumulates into `dgamma` / `dbeta`.
pub fn batch_norm_backward<T: Real>(
    dy: &Tensor4<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor4<T> {
    let (n, c, plane) = (dy.n, dy.c, dy.plane());
    let count = (n * plane) as f64;
    let mut dx = Tensor4::zeros(n, c, dy.h, dy.w);
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                let d = dy.data[j].as_f64();
                sum_dy += d;
                sum_dy_xhat += d * cache.xhat.data[j].as_f64();
            }
        }
        dbeta[ch] += T::lit(sum_dy);
        dgamma[ch] += T::lit(sum_dy_xhat);
        let g = gamma[ch].as_f64();
        let scale = g * cache.inv_std[ch].as_f64() / count;
        let (mean_dy, mean_dyx) = (sum_dy, sum_dy_xhat);
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                let d = dy.data[j].as_f64();
                let xh = cache.xhat.data[j].as_f64();
                dx.data[j] = T::lit(scale * (count * d - mean_dy - xh * mean_dyx));
            }
        }
    }
    dx
}

/// Row-wise layer norm over `rows x dim`. Returns output plus `(xhat, inv_std)`.
pub fn layer_norm<T: Real>(x: &[T], dim: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / dim as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / dim as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = T::lit(istd);
        let (m, s) = (T::lit(mean), T::lit(istd));
        for j in 0..dim {
            let h = (row[j] - m) * s;
            xhat[r * dim + j] = h;
            y[r * dim + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv)
}

/// Backward of [`layer_norm`]; accumulates parameter gradients.
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    dim: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / dim;
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..rows {
        let mut s1 = 0.0f64;
        let mut s2 = 0.0f64;
        for j in 0..dim {
            let k = r * dim + j;
            dgamma[j] += dy[k] * xhat[k];
            dbeta[j] += dy[k];
            let g = (dy[k] * gamma[j]).as_f64();
            s1 += g;
            s2 += g * xhat[k].as_f64();
        }
        let istd = inv_std[r].as_f64();
        let d = dim as f64;
        for j in 0..dim {
            let k = r * dim + j;
            let g = (dy[k] * gamma[j]).as_f64();
            dx[k] = T::lit(istd / d * (d * g - s1 - xhat[k].as_f64() * s2));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_standardized_per_channel() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 1.3).sin() * 5.0 + 2.0).collect();
        let x = Tensor4::from_vec(2, 3, 4, 4, data);
        let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
        let (y, _) = batch_norm_train(&x, &[1.0; 3], &[0.0; 3], &mut rm, &mut rv);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|i| y.data[(i * 3 + ch) * 16..(i * 3 + ch + 1) * 16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(rm.iter().all(|m| m.abs() > 0.0));
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| (i as f64 * 0.77).cos() * 3.0).collect();
        let x = Tensor4::from_vec(2, 2, 3, 3, data);
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.2];
        let w: Vec<f64> = (0..x.data.len()).map(|i| (i as f64 * 0.41).sin()).collect();
        let loss = |x: &Tensor4<f64>| {
            let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
            let (y, _) = batch_norm_train(x, &gamma, &beta, &mut rm, &mut rv);
            y.data.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let (_, cache) = batch_norm_train(&x, &gamma, &beta, &mut rm, &mut rv);
        let dy = Tensor4::from_vec(2, 2, 3, 3, w.clone());
        let (mut dg, mut db) = (vec![0.0; 2], vec![0.0; 2]);
        let dx = batch_norm_backward(&dy, &cache, &gamma, &mut dg, &mut db);
        for j in [0, 5, 11, 17, 30] {
            let mut xp = x.clone();
            xp.data[j] += 1e-6;
            let mut xm = x.clone();
            xm.data[j] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx.data[j]).abs() < 1e-6, "{fd} vs {}", dx.data[j]);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let dim = 5;
        let x: Vec<f64> = (0..3 * dim).map(|i| (i as f64 * 0.9).sin() * 2.0).collect();
        let gamma: Vec<f64> = (0..dim).map(|i| 1.0 + i as f64 * 0.1).collect();
        let beta = vec![0.05; dim];
        let w: Vec<f64> = (0..x.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let loss = |x: &[f64]| {
            let (y, _, _) = layer_norm(x, dim, &gamma, &beta);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, xhat, inv) = layer_norm(&x, dim, &gamma, &beta);
        let (mut dg, mut db) = (vec![0.0; dim], vec![0.0; dim]);
        let dx = layer_norm_backward(&w, &xhat, &inv, dim, &gamma, &mut dg, &mut db);
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += 1e-6;
            let mut xm = x.clone();
            xm[j] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx[j]).abs() < 1e-6);
        }
    }
}
