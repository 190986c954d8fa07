//! CLIP's modified ResNet-50 trunk: three-conv stem, anti-aliased strided
//! bottlenecks (average pooling instead of strided convolutions). Only the
//! four residual stages are built; the attention-pooling head is not needed
//! for spatial features.

use super::features::FeatureGrid;
use super::preprocess::ImageTensor;
use super::weights::{Checksum, Init, Layout, WeightMap};
use crate::error::{invalid, Result};
use crate::nn::conv::{conv2d_forward, Conv2dGeom};
use crate::nn::norm::batch_norm_eval_in_place;
use crate::nn::Tensor4;

pub const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const WIDTH: usize = 64;
const EXPANSION: usize = 4;

struct ConvBn {
    geom: Conv2dGeom,
    weight: Vec<f32>,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    mean: Vec<f32>,
    var: Vec<f32>,
}

impl ConvBn {
    fn forward(&self, x: &Tensor4<f32>, relu: bool) -> Tensor4<f32> {
        let mut y = conv2d_forward(&self.geom, x, &self.weight, None);
        batch_norm_eval_in_place(&mut y, &self.gamma, &self.beta, &self.mean, &self.var);
        if relu {
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        y
    }

    fn checksum(&self, name: &str, sum: &mut Checksum) {
        sum.update(&format!("{name}.w"), &self.weight);
        sum.update(&format!("{name}.g"), &self.gamma);
        sum.update(&format!("{name}.b"), &self.beta);
        sum.update(&format!("{name}.m"), &self.mean);
        sum.update(&format!("{name}.v"), &self.var);
    }
}

struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    stride: usize,
    downsample: Option<ConvBn>,
}

fn avg_pool(x: &Tensor4<f32>, k: usize) -> Tensor4<f32> {
    if k == 1 {
        return x.clone();
    }
    let (oh, ow) = (x.h / k, x.w / k);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    let norm = 1.0 / (k * k) as f32;
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += src[(oy * k + dy) * x.w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = s * norm;
            }
        }
    }
    out
}

impl Bottleneck {
    fn forward(&self, x: &Tensor4<f32>) -> Tensor4<f32> {
        let h = self.conv1.forward(x, true);
        let h = self.conv2.forward(&h, true);
        let h = avg_pool(&h, self.stride);
        let mut out = self.conv3.forward(&h, false);
        let identity = match &self.downsample {
            Some(ds) => ds.forward(&avg_pool(x, self.stride), false),
            None => x.clone(),
        };
        for (o, i) in out.data.iter_mut().zip(&identity.data) {
            *o = (*o + i).max(0.0);
        }
        out
    }
}

/// Names of one conv and its batch norm, e.g. `layer1.0.conv1` / `layer1.0.bn1`.
struct Names {
    conv: String,
    bn: String,
}

fn stem() -> [(Names, Conv2dGeom); 3] {
    let half = WIDTH / 2;
    let g = |cin, cout, stride| Conv2dGeom { cin, cout, kernel: 3, stride, pad: 1 };
    [
        (Names { conv: "conv1".into(), bn: "bn1".into() }, g(3, half, 2)),
        (Names { conv: "conv2".into(), bn: "bn2".into() }, g(half, half, 1)),
        (Names { conv: "conv3".into(), bn: "bn3".into() }, g(half, WIDTH, 1)),
    ]
}

struct BlockPlan {
    stride: usize,
    convs: [(Names, Conv2dGeom); 3],
    downsample: Option<(Names, Conv2dGeom)>,
}

fn block_plans() -> Vec<Vec<BlockPlan>> {
    let mut inplanes = WIDTH;
    let mut stages = Vec::new();
    for (s, &blocks) in STAGE_BLOCKS.iter().enumerate() {
        let planes = WIDTH << s;
        let mut stage = Vec::new();
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let prefix = format!("layer{}.{b}", s + 1);
            let n = |c: &str, bn: &str| Names { conv: format!("{prefix}.{c}"), bn: format!("{prefix}.{bn}") };
            let downsample = (stride > 1 || inplanes != planes * EXPANSION).then(|| {
                (n("downsample.0", "downsample.1"), Conv2dGeom { cin: inplanes, cout: planes * EXPANSION, kernel: 1, stride: 1, pad: 0 })
            });
            stage.push(BlockPlan {
                stride,
                convs: [
                    (n("conv1", "bn1"), Conv2dGeom { cin: inplanes, cout: planes, kernel: 1, stride: 1, pad: 0 }),
                    (n("conv2", "bn2"), Conv2dGeom::same(planes, planes, 3)),
                    (n("conv3", "bn3"), Conv2dGeom { cin: planes, cout: planes * EXPANSION, kernel: 1, stride: 1, pad: 0 }),
                ],
                downsample,
            });
            inplanes = planes * EXPANSION;
        }
        stages.push(stage);
    }
    stages
}

fn push_conv_bn(l: &mut Layout, names: &Names, geom: Conv2dGeom, gamma: f32) {
    let fan_in = geom.cin * geom.kernel * geom.kernel;
    let c = geom.cout;
    l.extend([
        (format!("{}.weight", names.conv), vec![c, geom.cin, geom.kernel, geom.kernel], Init::Normal((2.0 / fan_in as f32).sqrt())),
        (format!("{}.weight", names.bn), vec![c], Init::Const(gamma)),
        (format!("{}.bias", names.bn), vec![c], Init::Const(0.0)),
        (format!("{}.running_mean", names.bn), vec![c], Init::Const(0.0)),
        (format!("{}.running_var", names.bn), vec![c], Init::Const(1.0)),
    ]);
}

/// Tensor names and shapes of the trunk. Seeded init: He-normal convs, unit
/// batch-norm statistics, residual-branch scale 0.5 on each block's last norm.
pub fn layout() -> Layout {
    let mut l = Layout::new();
    for (names, geom) in stem() {
        push_conv_bn(&mut l, &names, geom, 1.0);
    }
    for stage in block_plans() {
        for b in stage {
            for (i, (names, geom)) in b.convs.iter().enumerate() {
                push_conv_bn(&mut l, names, *geom, if i == 2 { 0.5 } else { 1.0 });
            }
            if let Some((names, geom)) = &b.downsample {
                push_conv_bn(&mut l, names, *geom, 1.0);
            }
        }
    }
    l
}

fn take_conv_bn(m: &mut WeightMap, names: &Names, geom: Conv2dGeom) -> Result<ConvBn> {
    let c = geom.cout;
    Ok(ConvBn {
        weight: m.take(&format!("{}.weight", names.conv), &[c, geom.cin, geom.kernel, geom.kernel])?,
        gamma: m.take(&format!("{}.weight", names.bn), &[c])?,
        beta: m.take(&format!("{}.bias", names.bn), &[c])?,
        mean: m.take(&format!("{}.running_mean", names.bn), &[c])?,
        var: m.take(&format!("{}.running_var", names.bn), &[c])?,
        geom,
    })
}

pub struct ModifiedResNet {
    stem: Vec<ConvBn>,
    stages: Vec<Vec<Bottleneck>>,
}

impl ModifiedResNet {
    pub fn from_weights(mut m: WeightMap) -> Result<Self> {
        let stem = stem().iter().map(|(n, g)| take_conv_bn(&mut m, n, *g)).collect::<Result<_>>()?;
        let mut stages = Vec::new();
        for plans in block_plans() {
            let mut stage = Vec::new();
            for p in plans {
                let [c1, c2, c3] = &p.convs;
                stage.push(Bottleneck {
                    conv1: take_conv_bn(&mut m, &c1.0, c1.1)?,
                    conv2: take_conv_bn(&mut m, &c2.0, c2.1)?,
                    conv3: take_conv_bn(&mut m, &c3.0, c3.1)?,
                    stride: p.stride,
                    downsample: p.downsample.as_ref().map(|(n, g)| take_conv_bn(&mut m, n, *g)).transpose()?,
                });
            }
            stages.push(stage);
        }
        Ok(Self { stem, stages })
    }

    pub fn checksum(&self, sum: &mut Checksum) {
        for (i, c) in self.stem.iter().enumerate() {
            c.checksum(&format!("stem{i}"), sum);
        }
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                let p = format!("{s}.{b}");
                block.conv1.checksum(&format!("{p}.c1"), sum);
                block.conv2.checksum(&format!("{p}.c2"), sum);
                block.conv3.checksum(&format!("{p}.c3"), sum);
                if let Some(ds) = &block.downsample {
                    ds.checksum(&format!("{p}.ds"), sum);
                }
            }
        }
    }

    /// Outputs of the requested residual stages (1..=4).
    pub fn forward(&self, input: &ImageTensor, layers: &[usize]) -> Result<Vec<FeatureGrid>> {
        let depth = layers.iter().copied().max().unwrap_or(0);
        if depth > 4 || layers.contains(&0) {
            return Err(invalid("resnet stage must be in 1..=4"));
        }
        let s = input.size;
        let mut x = Tensor4::from_vec(1, 3, s, s, input.data.clone());
        for c in &self.stem {
            x = c.forward(&x, true);
        }
        x = avg_pool(&x, 2);
        let mut grids: Vec<Option<FeatureGrid>> = vec![None; layers.len()];
        for (i, stage) in self.stages.iter().take(depth).enumerate() {
            for block in stage {
                x = block.forward(&x);
            }
            for (slot, &l) in grids.iter_mut().zip(layers) {
                if l == i + 1 {
                    *slot = Some(FeatureGrid::from_chw(x.c, x.h, x.w, &x.data));
                }
            }
        }
        Ok(grids.into_iter().map(|g| g.expect("stage computed")).collect())
    }
}
