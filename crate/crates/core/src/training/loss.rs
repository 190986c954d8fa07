use crate::error::{dim_mismatch, Result};
use crate::nn::{Real, Tensor4};

/// `-[y log s(z) + (1 - y) log(1 - s(z))]` without overflow for large |z|.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean pixel-wise BCE over the batch and its gradient w.r.t. the logits.
/// `targets` holds one value in {0, 1} per logit, in the same order.
pub fn pixel_bce_loss<T: Real>(logits: &Tensor4<T>, targets: &[T]) -> Result<(f64, Tensor4<T>)> {
    if logits.data.len() != targets.len() {
        return Err(dim_mismatch(format!("{} logits against {} mask pixels", logits.data.len(), targets.len())));
    }
    let n = targets.len() as f64;
    let mut grad = Tensor4::zeros(logits.n, logits.c, logits.h, logits.w);
    let mut total = 0.0;
    for ((g, &z), &y) in grad.data.iter_mut().zip(&logits.data).zip(targets) {
        let (z, y) = (z.as_f64(), y.as_f64());
        total += bce_with_logits(z, y);
        *g = T::lit((sigmoid64(z) - y) / n);
    }
    Ok((total / n, grad))
}
