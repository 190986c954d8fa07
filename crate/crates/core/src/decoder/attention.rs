//! Transformer decoder: optional input projection, learned positional
//! embedding, pre-norm blocks (multi-head attention, GELU MLP), final layer
//! norm and a per-token logit, bilinearly upsampled x16.

use serde::{Deserialize, Serialize};

use super::{ParamDef, ParamInit, UPSCALE};
use crate::nn::norm::{layer_norm, layer_norm_backward};
use crate::nn::ops::{attention, attention_backward, gelu, gelu_grad, linear, linear_backward, AttentionCache};
use crate::nn::upsample::{upsample, upsample_backward};
use crate::nn::{ParamStore, Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionShape {
    pub hidden: usize,
    pub heads: usize,
    pub mlp: usize,
    pub blocks: usize,
}

impl Default for AttentionShape {
    fn default() -> Self {
        Self { hidden: 1024, heads: 16, mlp: 4096, blocks: 2 }
    }
}

pub fn plan(dim: usize, tokens: usize, s: &AttentionShape) -> Vec<ParamDef> {
    let h = s.hidden;
    let std = ParamInit::Normal(0.02);
    let mut p = Vec::new();
    if dim != h {
        p.push(ParamDef::new("in_proj.weight", vec![h, dim], ParamInit::Normal((1.0 / dim as f64).sqrt())));
        p.push(ParamDef::new("in_proj.bias", vec![h], ParamInit::Const(0.0)));
    }
    p.push(ParamDef::new("pos_embed", vec![tokens, h], std));
    for b in 0..s.blocks {
        let n = |x: &str| format!("blocks.{b}.{x}");
        p.extend([
            ParamDef::new(n("ln1.weight"), vec![h], ParamInit::Const(1.0)),
            ParamDef::new(n("ln1.bias"), vec![h], ParamInit::Const(0.0)),
            ParamDef::new(n("attn.qkv.weight"), vec![3 * h, h], std),
            ParamDef::new(n("attn.qkv.bias"), vec![3 * h], ParamInit::Const(0.0)),
            ParamDef::new(n("attn.out.weight"), vec![h, h], std),
            ParamDef::new(n("attn.out.bias"), vec![h], ParamInit::Const(0.0)),
            ParamDef::new(n("ln2.weight"), vec![h], ParamInit::Const(1.0)),
            ParamDef::new(n("ln2.bias"), vec![h], ParamInit::Const(0.0)),
            ParamDef::new(n("mlp.fc1.weight"), vec![s.mlp, h], std),
            ParamDef::new(n("mlp.fc1.bias"), vec![s.mlp], ParamInit::Const(0.0)),
            ParamDef::new(n("mlp.fc2.weight"), vec![h, s.mlp], std),
            ParamDef::new(n("mlp.fc2.bias"), vec![h], ParamInit::Const(0.0)),
        ]);
    }
    p.push(ParamDef::new("ln_final.weight", vec![h], ParamInit::Const(1.0)));
    p.push(ParamDef::new("ln_final.bias", vec![h], ParamInit::Const(0.0)));
    p.push(ParamDef::new("head.weight", vec![1, h], ParamInit::FinalNormal(0.02)));
    p.push(ParamDef::new("head.bias", vec![1], ParamInit::Const(0.0)));
    p
}

struct Block {
    ln1: (usize, usize),
    qkv: (usize, usize),
    out: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

pub(super) struct AttentionNet {
    shape: AttentionShape,
    dim: usize,
    in_proj: Option<(usize, usize)>,
    pos: usize,
    blocks: Vec<Block>,
    ln_final: (usize, usize),
    head: (usize, usize),
}

struct BlockTape<T> {
    a1: Vec<T>,
    xh1: Vec<T>,
    inv1: Vec<T>,
    caches: Vec<AttentionCache<T>>,
    ctx: Vec<T>,
    a2: Vec<T>,
    xh2: Vec<T>,
    inv2: Vec<T>,
    f: Vec<T>,
    g: Vec<T>,
}

pub(super) struct AttentionTape<T> {
    n: usize,
    grid: (usize, usize),
    x0: Vec<T>,
    blocks: Vec<BlockTape<T>>,
    af: Vec<T>,
    xhf: Vec<T>,
    invf: Vec<T>,
}

/// NCHW feature map to `(n * h * w) x c` token rows.
fn to_tokens<T: Real>(x: &Tensor4<T>) -> Vec<T> {
    let (c, t) = (x.c, x.plane());
    let mut out = vec![T::zero(); x.n * t * c];
    for i in 0..x.n {
        for ch in 0..c {
            let src = &x.data[(i * c + ch) * t..][..t];
            for (j, &v) in src.iter().enumerate() {
                out[(i * t + j) * c + ch] = v;
            }
        }
    }
    out
}

fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    acc.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
}

impl AttentionNet {
    pub(super) fn new<T: Real>(dim: usize, shape: AttentionShape, params: &ParamStore<T>) -> Self {
        let id = |n: String| params.find(&n).unwrap_or_else(|| panic!("missing {n}"));
        let wb = |n: &str| (id(format!("{n}.weight")), id(format!("{n}.bias")));
        Self {
            shape,
            dim,
            in_proj: (dim != shape.hidden).then(|| wb("in_proj")),
            pos: id("pos_embed".into()),
            blocks: (0..shape.blocks)
                .map(|b| Block {
                    ln1: wb(&format!("blocks.{b}.ln1")),
                    qkv: wb(&format!("blocks.{b}.attn.qkv")),
                    out: wb(&format!("blocks.{b}.attn.out")),
                    ln2: wb(&format!("blocks.{b}.ln2")),
                    fc1: wb(&format!("blocks.{b}.mlp.fc1")),
                    fc2: wb(&format!("blocks.{b}.mlp.fc2")),
                })
                .collect(),
            ln_final: wb("ln_final"),
            head: wb("head"),
        }
    }

    pub(super) fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>, train: bool) -> (Tensor4<T>, AttentionTape<T>) {
        let AttentionShape { hidden: hd, heads, mlp, .. } = self.shape;
        let (n, t) = (x.n, x.plane());
        let rows = n * t;
        let x0 = to_tokens(x);
        let mut h = match self.in_proj {
            Some((w, b)) => linear(&x0, rows, self.dim, p.value(w), Some(p.value(b)), hd),
            None => x0.clone(),
        };
        let pos = p.value(self.pos);
        for img in h.chunks_exact_mut(t * hd) {
            add_into(img, pos);
        }
        let mut tapes = Vec::new();
        for blk in &self.blocks {
            let (a1, xh1, inv1) = layer_norm(&h, hd, p.value(blk.ln1.0), p.value(blk.ln1.1));
            let qkv = linear(&a1, rows, hd, p.value(blk.qkv.0), Some(p.value(blk.qkv.1)), 3 * hd);
            let mut ctx = Vec::with_capacity(rows * hd);
            let mut caches = Vec::new();
            for img in qkv.chunks_exact(t * 3 * hd) {
                let (c, cache) = attention(img, t, hd, heads, train);
                ctx.extend_from_slice(&c);
                caches.extend(cache);
            }
            add_into(&mut h, &linear(&ctx, rows, hd, p.value(blk.out.0), Some(p.value(blk.out.1)), hd));
            let (a2, xh2, inv2) = layer_norm(&h, hd, p.value(blk.ln2.0), p.value(blk.ln2.1));
            let f = linear(&a2, rows, hd, p.value(blk.fc1.0), Some(p.value(blk.fc1.1)), mlp);
            let g: Vec<T> = f.iter().map(|&v| gelu(v)).collect();
            add_into(&mut h, &linear(&g, rows, mlp, p.value(blk.fc2.0), Some(p.value(blk.fc2.1)), hd));
            if train {
                tapes.push(BlockTape { a1, xh1, inv1, caches, ctx, a2, xh2, inv2, f, g });
            }
        }
        let (af, xhf, invf) = layer_norm(&h, hd, p.value(self.ln_final.0), p.value(self.ln_final.1));
        let logits = linear(&af, rows, hd, p.value(self.head.0), Some(p.value(self.head.1)), 1);
        let map = Tensor4::from_vec(n, 1, x.h, x.w, logits);
        let out = upsample(&map, x.h * UPSCALE, x.w * UPSCALE);
        let keep = |v: Vec<T>| if train { v } else { Vec::new() };
        let tape = AttentionTape {
            n,
            grid: (x.h, x.w),
            x0: if train && self.in_proj.is_some() { x0 } else { Vec::new() },
            blocks: tapes,
            af: keep(af),
            xhf: keep(xhf),
            invf: keep(invf),
        };
        (out, tape)
    }

    pub(super) fn backward<T: Real>(&self, p: &mut ParamStore<T>, tape: AttentionTape<T>, dout: &Tensor4<T>) {
        let AttentionShape { hidden: hd, heads, mlp, .. } = self.shape;
        let (gh, gw) = tape.grid;
        let t = gh * gw;
        let rows = tape.n * t;
        let dmap = upsample_backward(dout, gh, gw);
        let lin = |p: &mut ParamStore<T>, (w, b): (usize, usize), x: &[T], dy: &[T], inp: usize, out: usize, dx: bool| {
            let (w, b) = p.pair_mut(w, b);
            linear_backward(x, dy, rows, inp, out, &w.value, &mut w.grad, Some(&mut b.grad), dx)
        };
        let ln = |p: &mut ParamStore<T>, (g, b): (usize, usize), dy: &[T], xh: &[T], inv: &[T]| {
            let (g, b) = p.pair_mut(g, b);
            layer_norm_backward(dy, xh, inv, hd, &g.value, &mut g.grad, &mut b.grad)
        };
        let daf = lin(p, self.head, &tape.af, &dmap.data, hd, 1, true).expect("dx");
        let mut dh = ln(p, self.ln_final, &daf, &tape.xhf, &tape.invf);
        for (blk, bt) in self.blocks.iter().zip(tape.blocks).rev() {
            let mut dg = lin(p, blk.fc2, &bt.g, &dh, mlp, hd, true).expect("dx");
            dg.iter_mut().zip(&bt.f).for_each(|(d, &f)| *d *= gelu_grad(f));
            let da2 = lin(p, blk.fc1, &bt.a2, &dg, hd, mlp, true).expect("dx");
            add_into(&mut dh, &ln(p, blk.ln2, &da2, &bt.xh2, &bt.inv2));
            let dctx = lin(p, blk.out, &bt.ctx, &dh, hd, hd, true).expect("dx");
            let mut dqkv = Vec::with_capacity(rows * 3 * hd);
            for (dc, cache) in dctx.chunks_exact(t * hd).zip(&bt.caches) {
                dqkv.extend(attention_backward(dc, cache, t, hd, heads));
            }
            let da1 = lin(p, blk.qkv, &bt.a1, &dqkv, hd, 3 * hd, true).expect("dx");
            add_into(&mut dh, &ln(p, blk.ln1, &da1, &bt.xh1, &bt.inv1));
        }
        let dpos = p.grad_mut(self.pos);
        for img in dh.chunks_exact(t * hd) {
            add_into(dpos, img);
        }
        if let Some(wb) = self.in_proj {
            lin(p, wb, &tape.x0, &dh, self.dim, hd, false);
        }
    }
}
