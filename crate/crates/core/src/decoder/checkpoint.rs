//! Decoder checkpoints: safetensors with the decoder description and the
//! frozen-encoder provenance in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::{Decoder, DecoderSpec, InitOptions};
use crate::backbone::weights::f32_bytes;
use crate::error::{Error, Result, ValidationError};

const META_KEY: &str = "locprobe";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderRecord {
    pub family: String,
    pub layer: usize,
    pub weights_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: DecoderSpec,
    pub channel_schedule: Vec<(usize, usize)>,
    pub encoders: Vec<EncoderRecord>,
    #[serde(default)]
    pub config_hash: Option<String>,
    /// Free-form training settings (optimizer, schedule, epochs).
    #[serde(default)]
    pub training: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(spec: DecoderSpec, encoders: Vec<EncoderRecord>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            channel_schedule: spec.channel_schedule(),
            spec,
            encoders,
            config_hash: None,
            training: serde_json::Value::Null,
        }
    }
}

pub fn save_checkpoint(path: &Path, decoder: &Decoder<f32>, meta: &CheckpointMeta) -> Result<()> {
    if meta.spec != *decoder.spec() {
        return Err(Error::Checkpoint("metadata describes a different decoder".into()));
    }
    let mut views = Vec::new();
    for (prefix, store) in [("param", decoder.params()), ("buffer", decoder.buffers())] {
        for p in store.iter() {
            let view = TensorView::new(Dtype::F32, p.shape.clone(), f32_bytes(&p.value)).map_err(|e| Error::Checkpoint(e.to_string()))?;
            views.push((format!("{prefix}/{}", p.name), view));
        }
    }
    let header = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let bytes = safetensors::serialize(views, &Some(header)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    crate::data::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Decoder<f32>, CheckpointMeta)> {
    if !path.is_file() {
        return Err(ValidationError::MissingFile(path.to_path_buf()).into());
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let raw = header.metadata().as_ref().and_then(|m| m.get(META_KEY)).ok_or_else(|| bad("no decoder metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", meta.format_version)));
    }
    meta.spec.validate()?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut dec = Decoder::<f32>::new(meta.spec, &InitOptions::default())?;
    let fill = |prefix: &str, store: &mut crate::nn::ParamStore<f32>| -> Result<()> {
        for p in store.iter_mut() {
            let name = format!("{prefix}/{}", p.name);
            let view = st.tensor(&name).map_err(|_| bad(format!("missing tensor {name}")))?;
            if view.dtype() != Dtype::F32 || view.shape() != p.shape.as_slice() {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", view.shape(), p.shape)));
            }
            for (dst, b) in p.value.iter_mut().zip(view.data().chunks_exact(4)) {
                *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        Ok(())
    };
    fill("param", dec.params_mut())?;
    fill("buffer", dec.buffers_mut())?;
    Ok((dec, meta))
}
