//! Convolutional decoder: four blocks of `M` (5x5 conv, batch norm, ReLU)
//! sub-blocks, each block followed by x2 bilinear upsampling, then a 5x5 conv
//! to one logit channel.
//!
//! The first sub-block of every block halves the channel count; the rest keep
//! it. Starting from `D` the last block therefore emits `D / 16` channels.

use super::{ParamDef, ParamInit};
use crate::nn::conv::{conv2d_backward, conv2d_forward, Conv2dGeom};
use crate::nn::norm::{batch_norm_backward, batch_norm_eval_in_place, batch_norm_train, BatchNormCache};
use crate::nn::upsample::{upsample, upsample_backward};
use crate::nn::{ParamStore, Real, Tensor4};

pub const BLOCKS: usize = 4;
pub const KERNEL: usize = 5;

/// `(in, out)` channels of every conv layer, final projection included.
pub fn channel_schedule(dim: usize, m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(BLOCKS * m + 1);
    let mut c = dim;
    for _ in 0..BLOCKS {
        out.push((c, c / 2));
        c /= 2;
        for _ in 1..m {
            out.push((c, c));
        }
    }
    out.push((c, 1));
    out
}

pub fn plan(dim: usize, m: usize) -> (Vec<ParamDef>, Vec<ParamDef>) {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let schedule = channel_schedule(dim, m);
    let (last, body) = schedule.split_last().expect("nonempty schedule");
    for (i, &(cin, cout)) in body.iter().enumerate() {
        let (b, s) = (i / m, i % m);
        let p = format!("block{b}.sub{s}");
        let fan_in = cin * KERNEL * KERNEL;
        params.push(ParamDef::new(
            format!("{p}.conv.weight"),
            vec![cout, cin, KERNEL, KERNEL],
            ParamInit::Normal((2.0 / fan_in as f64).sqrt()),
        ));
        params.push(ParamDef::new(format!("{p}.bn.weight"), vec![cout], ParamInit::Const(1.0)));
        params.push(ParamDef::new(format!("{p}.bn.bias"), vec![cout], ParamInit::Const(0.0)));
        buffers.push(ParamDef::new(format!("{p}.bn.running_mean"), vec![cout], ParamInit::Const(0.0)));
        buffers.push(ParamDef::new(format!("{p}.bn.running_var"), vec![cout], ParamInit::Const(1.0)));
    }
    let fan_in = last.0 * KERNEL * KERNEL;
    params.push(ParamDef::new("head.weight", vec![1, last.0, KERNEL, KERNEL], ParamInit::FinalNormal((1.0 / fan_in as f64).sqrt())));
    params.push(ParamDef::new("head.bias", vec![1], ParamInit::Const(0.0)));
    (params, buffers)
}

struct SubBlock {
    geom: Conv2dGeom,
    weight: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

pub(super) struct ConvNet {
    blocks: Vec<Vec<SubBlock>>,
    head: Conv2dGeom,
    head_w: usize,
    head_b: usize,
}

struct SubTape<T> {
    input: Tensor4<T>,
    bn: BatchNormCache<T>,
}

pub(super) struct ConvTape<T> {
    subs: Vec<SubTape<T>>,
    block_out_hw: Vec<(usize, usize)>,
    head_input: Tensor4<T>,
}

impl ConvNet {
    pub(super) fn new<T: Real>(dim: usize, m: usize, params: &ParamStore<T>, buffers: &ParamStore<T>) -> Self {
        let id = |s: &ParamStore<T>, n: String| s.find(&n).unwrap_or_else(|| panic!("missing {n}"));
        let schedule = channel_schedule(dim, m);
        let mut blocks = Vec::new();
        for b in 0..BLOCKS {
            let mut subs = Vec::new();
            for s in 0..m {
                let (cin, cout) = schedule[b * m + s];
                let p = format!("block{b}.sub{s}");
                subs.push(SubBlock {
                    geom: Conv2dGeom::same(cin, cout, KERNEL),
                    weight: id(params, format!("{p}.conv.weight")),
                    gamma: id(params, format!("{p}.bn.weight")),
                    beta: id(params, format!("{p}.bn.bias")),
                    mean: id(buffers, format!("{p}.bn.running_mean")),
                    var: id(buffers, format!("{p}.bn.running_var")),
                });
            }
            blocks.push(subs);
        }
        let last = schedule.last().expect("schedule").0;
        Self {
            blocks,
            head: Conv2dGeom::same(last, 1, KERNEL),
            head_w: id(params, "head.weight".into()),
            head_b: id(params, "head.bias".into()),
        }
    }

    /// Output of the first sub-block (conv, norm, ReLU) at input resolution.
    #[cfg(test)]
    pub(super) fn first_activation<T: Real>(&self, p: &ParamStore<T>, b: &ParamStore<T>, x: &Tensor4<T>) -> Tensor4<T> {
        let sb = &self.blocks[0][0];
        let mut y = conv2d_forward(&sb.geom, x, p.value(sb.weight), None);
        batch_norm_eval_in_place(&mut y, p.value(sb.gamma), p.value(sb.beta), b.value(sb.mean), b.value(sb.var));
        y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        y
    }

    pub(super) fn forward_eval<T: Real>(&self, p: &ParamStore<T>, b: &ParamStore<T>, x: &Tensor4<T>) -> Tensor4<T> {
        let mut h = x.clone();
        for block in &self.blocks {
            for sb in block {
                h = conv2d_forward(&sb.geom, &h, p.value(sb.weight), None);
                batch_norm_eval_in_place(&mut h, p.value(sb.gamma), p.value(sb.beta), b.value(sb.mean), b.value(sb.var));
                h.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            h = upsample(&h, h.h * 2, h.w * 2);
        }
        conv2d_forward(&self.head, &h, p.value(self.head_w), Some(p.value(self.head_b)))
    }

    pub(super) fn forward_train<T: Real>(&self, p: &ParamStore<T>, b: &mut ParamStore<T>, x: &Tensor4<T>) -> (Tensor4<T>, ConvTape<T>) {
        let mut subs = Vec::new();
        let mut block_out_hw = Vec::new();
        let mut h = x.clone();
        for block in &self.blocks {
            for sb in block {
                let z = conv2d_forward(&sb.geom, &h, p.value(sb.weight), None);
                let (mean, var) = b.pair_mut(sb.mean, sb.var);
                let (mut y, cache) = batch_norm_train(&z, p.value(sb.gamma), p.value(sb.beta), &mut mean.value, &mut var.value);
                y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
                subs.push(SubTape { input: h, bn: cache });
                h = y;
            }
            block_out_hw.push((h.h, h.w));
            h = upsample(&h, h.h * 2, h.w * 2);
        }
        let out = conv2d_forward(&self.head, &h, p.value(self.head_w), Some(p.value(self.head_b)));
        (out, ConvTape { subs, block_out_hw, head_input: h })
    }

    pub(super) fn backward<T: Real>(&self, p: &mut ParamStore<T>, tape: ConvTape<T>, dout: &Tensor4<T>) {
        let mut d = {
            let (w, b) = p.pair_mut(self.head_w, self.head_b);
            conv2d_backward(&self.head, &tape.head_input, &w.value, dout, &mut w.grad, Some(&mut b.grad), true).expect("dx requested")
        };
        let mut subs = tape.subs;
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let (bh, bw) = tape.block_out_hw[bi];
            d = upsample_backward(&d, bh, bw);
            for sb in block.iter().rev() {
                let st = subs.pop().expect("tape entry per sub-block");
                let (gamma, beta) = p.pair_mut(sb.gamma, sb.beta);
                // ReLU mask from the recomputed pre-activation
                let plane = d.plane();
                for (ci, chunk) in d.data.chunks_exact_mut(plane).enumerate() {
                    let (g, b) = (gamma.value[ci % d.c], beta.value[ci % d.c]);
                    let xh = &st.bn.xhat.data[ci * plane..(ci + 1) * plane];
                    for (v, &x) in chunk.iter_mut().zip(xh) {
                        if g * x + b <= T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                let dz = batch_norm_backward(&d, &st.bn, &gamma.value, &mut gamma.grad, &mut beta.grad);
                let w = p.param_mut(sb.weight);
                let need_dx = !subs.is_empty();
                if let Some(dx) = conv2d_backward(&sb.geom, &st.input, &w.value, &dz, &mut w.grad, None, need_dx) {
                    d = dx;
                }
            }
        }
    }
}
