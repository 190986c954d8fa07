//! CLIP vision transformer (pre-norm residual blocks, QuickGELU MLPs).
//!
//! Tensor names follow the OpenAI CLIP state dict with the `visual.` prefix
//! removed, so published checkpoints converted to safetensors load directly.

use super::features::FeatureGrid;
use super::preprocess::ImageTensor;
use super::weights::{Checksum, Init, Layout, WeightMap};
use crate::error::{invalid, Result};
use crate::nn::norm::layer_norm;
use crate::nn::ops::{attention, linear, quick_gelu};
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
    pub output_dim: usize,
}

impl VitConfig {
    /// ViT-L/14 at 224 px: 16x16 patch grid, 24 blocks of width 1024.
    pub const fn l14() -> Self {
        Self { image_size: 224, patch: 14, width: 1024, layers: 24, heads: 16, mlp: 4096, output_dim: 768 }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    /// Tensor names, shapes and the seeded init used by CLIP's own initializer.
    pub fn layout(&self) -> Layout {
        let w = self.width;
        let scale = (w as f32).powf(-0.5);
        let attn_std = scale;
        let proj_std = scale * ((2 * self.layers) as f32).powf(-0.5);
        let fc_std = ((2 * w) as f32).powf(-0.5);
        let fan_in = 3 * self.patch * self.patch;
        let mut l: Layout = vec![
            ("conv1.weight".into(), vec![w, 3, self.patch, self.patch], Init::Normal((fan_in as f32).powf(-0.5))),
            ("class_embedding".into(), vec![w], Init::Normal(scale)),
            ("positional_embedding".into(), vec![self.tokens(), w], Init::Normal(scale)),
            ("ln_pre.weight".into(), vec![w], Init::Const(1.0)),
            ("ln_pre.bias".into(), vec![w], Init::Const(0.0)),
        ];
        for i in 0..self.layers {
            let p = format!("transformer.resblocks.{i}");
            l.extend([
                (format!("{p}.ln_1.weight"), vec![w], Init::Const(1.0)),
                (format!("{p}.ln_1.bias"), vec![w], Init::Const(0.0)),
                (format!("{p}.attn.in_proj_weight"), vec![3 * w, w], Init::Normal(attn_std)),
                (format!("{p}.attn.in_proj_bias"), vec![3 * w], Init::Const(0.0)),
                (format!("{p}.attn.out_proj.weight"), vec![w, w], Init::Normal(proj_std)),
                (format!("{p}.attn.out_proj.bias"), vec![w], Init::Const(0.0)),
                (format!("{p}.ln_2.weight"), vec![w], Init::Const(1.0)),
                (format!("{p}.ln_2.bias"), vec![w], Init::Const(0.0)),
                (format!("{p}.mlp.c_fc.weight"), vec![self.mlp, w], Init::Normal(fc_std)),
                (format!("{p}.mlp.c_fc.bias"), vec![self.mlp], Init::Const(0.0)),
                (format!("{p}.mlp.c_proj.weight"), vec![w, self.mlp], Init::Normal(proj_std)),
                (format!("{p}.mlp.c_proj.bias"), vec![w], Init::Const(0.0)),
            ]);
        }
        l.extend([
            ("ln_post.weight".into(), vec![w], Init::Const(1.0)),
            ("ln_post.bias".into(), vec![w], Init::Const(0.0)),
            ("proj".into(), vec![w, self.output_dim], Init::Normal(scale)),
        ]);
        l
    }
}

struct Block {
    ln1: (Vec<f32>, Vec<f32>),
    in_proj: (Vec<f32>, Vec<f32>),
    out_proj: (Vec<f32>, Vec<f32>),
    ln2: (Vec<f32>, Vec<f32>),
    fc: (Vec<f32>, Vec<f32>),
    proj: (Vec<f32>, Vec<f32>),
}

pub struct VisionTransformer {
    cfg: VitConfig,
    conv1: Vec<f32>,
    class_embedding: Vec<f32>,
    positional: Vec<f32>,
    ln_pre: (Vec<f32>, Vec<f32>),
    blocks: Vec<Block>,
    ln_post: (Vec<f32>, Vec<f32>),
    proj: Vec<f32>,
}

impl VisionTransformer {
    pub fn from_weights(cfg: VitConfig, mut m: WeightMap) -> Result<Self> {
        let w = cfg.width;
        let pair = |m: &mut WeightMap, name: &str, shape: &[usize]| -> Result<(Vec<f32>, Vec<f32>)> {
            let bias_shape = [shape[0]];
            Ok((m.take(&format!("{name}.weight"), shape)?, m.take(&format!("{name}.bias"), &bias_shape)?))
        };
        let conv1 = m.take("conv1.weight", &[w, 3, cfg.patch, cfg.patch])?;
        let class_embedding = m.take("class_embedding", &[w])?;
        let positional = m.take("positional_embedding", &[cfg.tokens(), w])?;
        let ln_pre = pair(&mut m, "ln_pre", &[w])?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("transformer.resblocks.{i}");
            blocks.push(Block {
                ln1: pair(&mut m, &format!("{p}.ln_1"), &[w])?,
                in_proj: (m.take(&format!("{p}.attn.in_proj_weight"), &[3 * w, w])?, m.take(&format!("{p}.attn.in_proj_bias"), &[3 * w])?),
                out_proj: pair(&mut m, &format!("{p}.attn.out_proj"), &[w, w])?,
                ln2: pair(&mut m, &format!("{p}.ln_2"), &[w])?,
                fc: pair(&mut m, &format!("{p}.mlp.c_fc"), &[cfg.mlp, w])?,
                proj: pair(&mut m, &format!("{p}.mlp.c_proj"), &[w, cfg.mlp])?,
            });
        }
        let ln_post = pair(&mut m, "ln_post", &[w])?;
        let proj = m.take("proj", &[w, cfg.output_dim])?;
        Ok(Self { cfg, conv1, class_embedding, positional, ln_pre, blocks, ln_post, proj })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn checksum(&self, sum: &mut Checksum) {
        sum.update("conv1", &self.conv1);
        sum.update("class_embedding", &self.class_embedding);
        sum.update("positional_embedding", &self.positional);
        sum.update("ln_pre.w", &self.ln_pre.0);
        sum.update("ln_pre.b", &self.ln_pre.1);
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, t) in [
                ("ln1w", &b.ln1.0),
                ("ln1b", &b.ln1.1),
                ("inw", &b.in_proj.0),
                ("inb", &b.in_proj.1),
                ("outw", &b.out_proj.0),
                ("outb", &b.out_proj.1),
                ("ln2w", &b.ln2.0),
                ("ln2b", &b.ln2.1),
                ("fcw", &b.fc.0),
                ("fcb", &b.fc.1),
                ("projw", &b.proj.0),
                ("projb", &b.proj.1),
            ] {
                sum.update(&format!("{i}.{tag}"), t);
            }
        }
        sum.update("ln_post.w", &self.ln_post.0);
        sum.update("ln_post.b", &self.ln_post.1);
        sum.update("proj", &self.proj);
    }

    fn embed(&self, input: &ImageTensor) -> Vec<f32> {
        let cfg = &self.cfg;
        let (g, p, w) = (cfg.grid(), cfg.patch, cfg.width);
        let size = cfg.image_size;
        let plane = size * size;
        let k = 3 * p * p;
        // patches in (channel, row, col) order, matching the conv weight layout
        let mut patches = vec![0.0f32; g * g * k];
        for gy in 0..g {
            for gx in 0..g {
                let row = &mut patches[(gy * g + gx) * k..][..k];
                for c in 0..3 {
                    for py in 0..p {
                        let src = c * plane + (gy * p + py) * size + gx * p;
                        row[(c * p + py) * p..][..p].copy_from_slice(&input.data[src..src + p]);
                    }
                }
            }
        }
        let emb = linear(&patches, g * g, k, &self.conv1, None, w);
        let mut x = Vec::with_capacity(cfg.tokens() * w);
        x.extend_from_slice(&self.class_embedding);
        x.extend_from_slice(&emb);
        for (v, pos) in x.iter_mut().zip(&self.positional) {
            *v += pos;
        }
        layer_norm(&x, w, &self.ln_pre.0, &self.ln_pre.1).0
    }

    fn block(&self, b: &Block, x: &mut [f32]) {
        let (t, w) = (self.cfg.tokens(), self.cfg.width);
        let h = layer_norm(x, w, &b.ln1.0, &b.ln1.1).0;
        let qkv = linear(&h, t, w, &b.in_proj.0, Some(&b.in_proj.1), 3 * w);
        let (ctx, _) = attention(&qkv, t, w, self.cfg.heads, false);
        let a = linear(&ctx, t, w, &b.out_proj.0, Some(&b.out_proj.1), w);
        for (v, d) in x.iter_mut().zip(&a) {
            *v += d;
        }
        let h = layer_norm(x, w, &b.ln2.0, &b.ln2.1).0;
        let mut f = linear(&h, t, w, &b.fc.0, Some(&b.fc.1), self.cfg.mlp);
        for v in f.iter_mut() {
            *v = quick_gelu(*v);
        }
        let m = linear(&f, t, self.cfg.mlp, &b.proj.0, Some(&b.proj.1), w);
        for (v, d) in x.iter_mut().zip(&m) {
            *v += d;
        }
    }

    /// Patch-token grids at each requested block (1-based; the CLS token is
    /// dropped) and, if asked, the projected global token after the last block.
    pub fn forward(&self, input: &ImageTensor, layers: &[usize], global: bool) -> Result<(Vec<FeatureGrid>, Option<Vec<f32>>)> {
        if input.size != self.cfg.image_size {
            return Err(invalid(format!("expected {}px input", self.cfg.image_size)));
        }
        let depth = if global { self.cfg.layers } else { layers.iter().copied().max().unwrap_or(0) };
        let (g, w) = (self.cfg.grid(), self.cfg.width);
        let mut x = self.embed(input);
        let mut grids: Vec<Option<FeatureGrid>> = vec![None; layers.len()];
        for (i, b) in self.blocks.iter().take(depth).enumerate() {
            self.block(b, &mut x);
            for (slot, &l) in grids.iter_mut().zip(layers) {
                if l == i + 1 {
                    *slot = Some(FeatureGrid::new(g, g, w, x[w..].to_vec()));
                }
            }
        }
        let global = global.then(|| {
            let cls = layer_norm(&x[..w], w, &self.ln_post.0, &self.ln_post.1).0;
            let mut out = vec![0.0f32; self.cfg.output_dim];
            // proj is stored `width x output_dim`
            f32::gemm(1, w, self.cfg.output_dim, 1.0, &cls, false, &self.proj, false, 0.0, &mut out);
            out
        });
        let grids = grids
            .into_iter()
            .zip(layers)
            .map(|(g, l)| g.ok_or_else(|| invalid(format!("layer {l} not computed"))))
            .collect::<Result<_>>()?;
        Ok((grids, global))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> VitConfig {
        VitConfig { image_size: 224, patch: 56, width: 32, layers: 3, heads: 4, mlp: 64, output_dim: 8 }
    }

    fn input(seed: f32) -> ImageTensor {
        ImageTensor { size: 224, data: (0..3 * 224 * 224).map(|i| ((i as f32) * 0.001 + seed).sin()).collect() }
    }

    #[test]
    fn tiny_transformer_shapes_and_determinism() {
        let cfg = tiny();
        let vit = VisionTransformer::from_weights(cfg, WeightMap::seeded(&cfg.layout(), 5)).unwrap();
        let (grids, global) = vit.forward(&input(0.0), &[1, 3], true).unwrap();
        assert_eq!((grids[0].height, grids[0].width, grids[0].dim), (4, 4, 32));
        assert_eq!(global.as_ref().unwrap().len(), 8);
        let (again, _) = vit.forward(&input(0.0), &[3], false).unwrap();
        assert_eq!(again[0], grids[1]);
        assert_ne!(grids[0], grids[1]);
        assert!(grids.iter().all(FeatureGrid::all_finite));
    }

    #[test]
    fn patch_tokens_follow_row_major_grid_order() {
        // zeroing all blocks' residual contributions leaves embed() output;
        // a bump in one patch must land on the matching grid cell
        let cfg = VitConfig { layers: 1, ..tiny() };
        let mut m = WeightMap::seeded(&cfg.layout(), 1);
        for name in ["transformer.resblocks.0.attn.out_proj.weight", "transformer.resblocks.0.mlp.c_proj.weight"] {
            let shape = if name.contains("out_proj") { vec![32, 32] } else { vec![32, 64] };
            let len = shape.iter().product();
            m.take(name, &shape).unwrap();
            m.insert(name, shape, vec![0.0; len]);
        }
        let vit = VisionTransformer::from_weights(cfg, m).unwrap();
        let base = ImageTensor { size: 224, data: vec![0.0; 3 * 224 * 224] };
        let mut bumped = base.clone();
        // patch at grid row 2, col 1 (56 px patches)
        for c in 0..3 {
            bumped.data[c * 224 * 224 + (2 * 56 + 10) * 224 + 56 + 10] = 5.0;
        }
        let (a, _) = vit.forward(&base, &[1], false).unwrap();
        let (b, _) = vit.forward(&bumped, &[1], false).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let changed = a[0].at(y, x) != b[0].at(y, x);
                assert_eq!(changed, (y, x) == (2, 1), "cell {y},{x}");
            }
        }
    }
}
