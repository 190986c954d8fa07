//! Trainable decoders mapping a frozen feature grid to a per-pixel logit map
//! at 16x the grid resolution.

pub mod attention;
pub mod checkpoint;
pub mod conv;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Result, ValidationError};
use crate::nn::conv::{conv2d_backward, conv2d_forward, Conv2dGeom};
use crate::nn::upsample::{upsample, upsample_backward};
use crate::nn::{ParamStore, Real, Tensor4};

pub use attention::AttentionShape;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, EncoderRecord};

/// Output resolution relative to the input grid.
pub const UPSCALE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderArch {
    /// 1x1 projection to one channel.
    Linear,
    Attention(AttentionShape),
    /// `sub_blocks` conv/norm/ReLU units per upsampling block.
    Conv {
        sub_blocks: usize,
    },
}

impl DecoderArch {
    /// `linear`, `attention` or `conv-N` where N = 4 * sub-blocks.
    pub fn name(&self) -> String {
        match self {
            DecoderArch::Linear => "linear".into(),
            DecoderArch::Attention(_) => "attention".into(),
            DecoderArch::Conv { sub_blocks } => format!("conv-{}", conv::BLOCKS * sub_blocks),
        }
    }
}

impl fmt::Display for DecoderArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for DecoderArch {
    type Err = ValidationError;

    fn from_str(s: &str) -> std::result::Result<Self, ValidationError> {
        let bad = || ValidationError::UnsupportedDecoder(s.to_string());
        match s {
            "linear" => Ok(DecoderArch::Linear),
            "attention" => Ok(DecoderArch::Attention(AttentionShape::default())),
            _ => {
                let n: usize = s.strip_prefix("conv-").and_then(|n| n.parse().ok()).ok_or_else(bad)?;
                if n == 0 || !n.is_multiple_of(conv::BLOCKS) {
                    return Err(bad());
                }
                Ok(DecoderArch::Conv { sub_blocks: n / conv::BLOCKS })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub arch: DecoderArch,
    pub input_dim: usize,
    pub grid: (usize, usize),
}

impl DecoderSpec {
    pub fn new(arch: DecoderArch, input_dim: usize, grid: (usize, usize)) -> Result<Self> {
        let spec = Self { arch, input_dim, grid };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ValidationError::InvalidParameter(m).into());
        if self.input_dim == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return bad(format!("decoder input {}x{}x{} is empty", self.grid.0, self.grid.1, self.input_dim));
        }
        match self.arch {
            DecoderArch::Conv { sub_blocks } if sub_blocks == 0 => bad("conv decoder needs at least one sub-block".into()),
            DecoderArch::Conv { .. } if !self.input_dim.is_multiple_of(UPSCALE) => {
                bad(format!("conv decoder input dim {} is not a multiple of 16", self.input_dim))
            }
            DecoderArch::Attention(s) if s.hidden == 0 || s.heads == 0 || s.hidden % s.heads != 0 => {
                bad(format!("attention hidden {} not divisible by {} heads", s.hidden, s.heads))
            }
            _ => Ok(()),
        }
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.grid.0 * UPSCALE, self.grid.1 * UPSCALE)
    }

    /// Conv `(in, out)` channels per layer; empty for other decoders.
    pub fn channel_schedule(&self) -> Vec<(usize, usize)> {
        match self.arch {
            DecoderArch::Conv { sub_blocks } => conv::channel_schedule(self.input_dim, sub_blocks),
            _ => Vec::new(),
        }
    }

    /// Trainable tensors and non-trainable buffers, in storage order.
    pub fn plan(&self) -> (Vec<ParamDef>, Vec<ParamDef>) {
        match self.arch {
            DecoderArch::Linear => (
                vec![
                    ParamDef::new(
                        "proj.weight",
                        vec![1, self.input_dim, 1, 1],
                        ParamInit::FinalNormal((1.0 / self.input_dim as f64).sqrt()),
                    ),
                    ParamDef::new("proj.bias", vec![1], ParamInit::Const(0.0)),
                ],
                Vec::new(),
            ),
            DecoderArch::Conv { sub_blocks } => conv::plan(self.input_dim, sub_blocks),
            DecoderArch::Attention(s) => (attention::plan(self.input_dim, self.grid.0 * self.grid.1, &s), Vec::new()),
        }
    }
}

/// Number of trainable scalars of a decoder.
pub fn count_parameters(spec: &DecoderSpec) -> usize {
    spec.plan().0.iter().map(ParamDef::numel).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    Normal(f64),
    /// Normal init of the logit-producing layer; zero when requested.
    FinalNormal(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamDef {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: ParamInit) -> Self {
        Self { name: name.into(), shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitOptions {
    pub seed: u64,
    /// Start the final projection at zero so initial predictions are 0.5.
    pub zero_final: bool,
}

enum Net {
    Linear { geom: Conv2dGeom, w: usize, b: usize },
    Conv(conv::ConvNet),
    Attention(attention::AttentionNet),
}

/// Activations saved by [`Decoder::forward_train`] for the backward pass.
pub struct Tape<T>(TapeInner<T>);

enum TapeInner<T> {
    Linear(Tensor4<T>),
    Conv(conv::ConvTape<T>),
    Attention(attention::AttentionTape<T>),
}

pub struct Decoder<T> {
    spec: DecoderSpec,
    params: ParamStore<T>,
    buffers: ParamStore<T>,
    net: Net,
}

fn fill<T: Real>(defs: &[ParamDef], init: &InitOptions, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for d in defs {
        let n = d.numel();
        let values = match d.init {
            ParamInit::Const(v) => vec![T::lit(v); n],
            ParamInit::FinalNormal(_) if init.zero_final => vec![T::zero(); n],
            ParamInit::Normal(std) | ParamInit::FinalNormal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::lit(dist.sample(rng))).collect()
            }
        };
        store.add(d.name.clone(), d.shape.clone(), values);
    }
    store
}

impl<T: Real> Decoder<T> {
    pub fn new(spec: DecoderSpec, init: &InitOptions) -> Result<Self> {
        spec.validate()?;
        let (pdefs, bdefs) = spec.plan();
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let params = fill(&pdefs, init, &mut rng);
        let buffers = fill(&bdefs, init, &mut rng);
        Ok(Self::assemble(spec, params, buffers))
    }

    fn assemble(spec: DecoderSpec, params: ParamStore<T>, buffers: ParamStore<T>) -> Self {
        let net = match spec.arch {
            DecoderArch::Linear => {
                Net::Linear { geom: Conv2dGeom { cin: spec.input_dim, cout: 1, kernel: 1, stride: 1, pad: 0 }, w: 0, b: 1 }
            }
            DecoderArch::Conv { sub_blocks } => Net::Conv(conv::ConvNet::new(spec.input_dim, sub_blocks, &params, &buffers)),
            DecoderArch::Attention(s) => Net::Attention(attention::AttentionNet::new(spec.input_dim, s, &params)),
        };
        Self { spec, params, buffers, net }
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let (h, w) = self.spec.grid;
        if x.c != self.spec.input_dim || x.h != h || x.w != w || x.n == 0 {
            return Err(dim_mismatch(format!("decoder expects N x {} x {h} x {w} features, got {:?}", self.spec.input_dim, x.shape())));
        }
        Ok(())
    }

    /// Inference-mode logits, `N x 1 x 16h x 16w`.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let p = &self.params;
        Ok(match &self.net {
            Net::Linear { geom, w, b } => {
                let z = conv2d_forward(geom, x, p.value(*w), Some(p.value(*b)));
                upsample(&z, x.h * UPSCALE, x.w * UPSCALE)
            }
            Net::Conv(net) => net.forward_eval(p, &self.buffers, x),
            Net::Attention(net) => net.forward(p, x, false).0,
        })
    }

    /// Training-mode logits plus the tape for [`Decoder::backward`]. Batch
    /// norm uses batch statistics and updates its running averages.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tape<T>)> {
        self.check_input(x)?;
        let p = &self.params;
        Ok(match &self.net {
            Net::Linear { geom, w, b } => {
                let z = conv2d_forward(geom, x, p.value(*w), Some(p.value(*b)));
                (upsample(&z, x.h * UPSCALE, x.w * UPSCALE), Tape(TapeInner::Linear(x.clone())))
            }
            Net::Conv(net) => {
                let (y, t) = net.forward_train(p, &mut self.buffers, x);
                (y, Tape(TapeInner::Conv(t)))
            }
            Net::Attention(net) => {
                let (y, t) = net.forward(p, x, true);
                (y, Tape(TapeInner::Attention(t)))
            }
        })
    }

    /// Accumulates parameter gradients for `dlogits` (same shape as the output).
    pub fn backward(&mut self, tape: Tape<T>, dlogits: &Tensor4<T>) {
        let p = &mut self.params;
        match (&self.net, tape.0) {
            (Net::Linear { geom, w, b }, TapeInner::Linear(x)) => {
                let dz = upsample_backward(dlogits, x.h, x.w);
                let (w, b) = p.pair_mut(*w, *b);
                conv2d_backward(geom, &x, &w.value, &dz, &mut w.grad, Some(&mut b.grad), false);
            }
            (Net::Conv(net), TapeInner::Conv(t)) => net.backward(p, t, dlogits),
            (Net::Attention(net), TapeInner::Attention(t)) => net.backward(p, t, dlogits),
            _ => panic!("tape from a different decoder"),
        }
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Decoder<U> {
        let conv = |s: &ParamStore<T>| {
            let mut out = ParamStore::new();
            for p in s.iter() {
                out.add(p.name.clone(), p.shape.clone(), p.value.iter().map(|v| U::lit(v.as_f64())).collect());
            }
            out
        };
        Decoder::assemble(self.spec, conv(&self.params), conv(&self.buffers))
    }

    #[cfg(test)]
    pub(crate) fn first_conv_activation(&self, x: &Tensor4<T>) -> Tensor4<T> {
        match &self.net {
            Net::Conv(net) => net.first_activation(&self.params, &self.buffers, x),
            _ => panic!("not a conv decoder"),
        }
    }
}
