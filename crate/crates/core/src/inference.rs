//! Running trained decoders on manifests and single images.

use std::path::Path;

use crate::backbone::{encode_path, Encoder, FeatureCache};
use crate::data::{DatasetManifest, PredictionMap};
use crate::decoder::{load_checkpoint, CheckpointMeta, Decoder};
use crate::error::{invalid, Result, ValidationError};
use crate::metrics::Predictor;
use crate::training::predict;

const BATCH: usize = 8;

/// Errors unless `meta` was trained on features from `encoder`.
pub fn check_compatible(meta: &CheckpointMeta, encoder: &Encoder) -> Result<()> {
    let have = encoder.provenance();
    if have.len() != meta.encoders.len() {
        return Err(invalid(format!("checkpoint expects {} stacked encoder grids, got {}", meta.encoders.len(), have.len())));
    }
    for (rec, (family, layer, digest)) in meta.encoders.iter().zip(have) {
        if rec.family != family.to_string() || rec.layer != layer {
            return Err(invalid(format!("checkpoint was trained on {} layer {}, not {family} layer {layer}", rec.family, rec.layer)));
        }
        if rec.weights_digest != digest {
            return Err(ValidationError::DigestMismatch { expected: rec.weights_digest.clone(), found: digest }.into());
        }
    }
    Ok(())
}

/// A trained decoder behind a frozen encoder.
pub struct DecoderPredictor<'a> {
    pub encoder: &'a Encoder,
    pub decoder: Decoder<f32>,
    pub meta: CheckpointMeta,
    pub cache: Option<FeatureCache>,
}

impl<'a> DecoderPredictor<'a> {
    pub fn load(encoder: &'a Encoder, checkpoint: &Path, cache: Option<FeatureCache>) -> Result<Self> {
        let (decoder, meta) = load_checkpoint(checkpoint)?;
        check_compatible(&meta, encoder)?;
        Ok(Self { encoder, decoder, meta, cache })
    }

    pub fn predict_path(&self, image: &Path) -> Result<PredictionMap> {
        let grid = encode_path(self.encoder, image, self.cache.as_ref())?;
        Ok(predict(&self.decoder, std::slice::from_ref(&grid), 1)?.remove(0))
    }
}

impl Predictor for DecoderPredictor<'_> {
    fn predict(&self, manifest: &DatasetManifest) -> Result<Vec<PredictionMap>> {
        let grids = crate::training::run::encode_manifest(self.encoder, manifest, self.cache.as_ref())?;
        predict(&self.decoder, &grids, BATCH)
    }
}
