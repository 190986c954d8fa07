//! End-to-end runs: manifests in, checkpoint and history out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fit::{fit, train_linear_probe, Control, EpochRecord, FeatureSet, History, LinearProbe};
use super::TrainConfig;
use crate::backbone::{encode_image, encode_path, Backbone, BackboneFamily, BackboneSpec, Encoder, FeatureCache, FeatureGrid};
use crate::data::{DatasetManifest, Label, LoadOptions};
use crate::dataset::augment;
use crate::dataset::composite::open_rgb;
use crate::decoder::{save_checkpoint, CheckpointMeta, Decoder, DecoderArch, DecoderSpec, EncoderRecord, InitOptions};
use crate::error::{invalid, Error, Result, ValidationError};

/// Encoder outputs for every sample plus targets at `output_size`.
pub fn prepare_features(
    encoder: &Encoder,
    manifest: &DatasetManifest,
    output_size: (usize, usize),
    cfg: &TrainConfig,
    cache: Option<&FeatureCache>,
    mask_options: LoadOptions,
) -> Result<FeatureSet> {
    let mut set = FeatureSet::default();
    for s in &manifest.samples {
        let path = manifest.image_path(s);
        let grid = if cfg.augmentations.is_empty() {
            encode_path(encoder, &path, cache)?
        } else {
            let id = s.image_path.to_string_lossy().into_owned();
            let mut img = open_rgb(&path)?;
            for spec in &cfg.augmentations {
                img = augment(&img, &id, spec)?;
            }
            encode_image(encoder, &image::DynamicImage::ImageRgb8(img))?
        };
        let mask = manifest.load_sample_mask(s, output_size, mask_options)?;
        set.features.push(grid);
        set.targets.push(mask.values.iter().map(|&v| f32::from(v)).collect());
    }
    Ok(set)
}

pub struct TrainRequest<'a> {
    /// One backbone, or two for channel-stacked features.
    pub backbones: Vec<BackboneSpec>,
    pub decoder: DecoderArch,
    pub train: &'a DatasetManifest,
    pub val: Option<&'a DatasetManifest>,
    pub config: TrainConfig,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub config_hash: Option<String>,
    pub mask_options: LoadOptions,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub history: History,
    pub decoder: Decoder<f32>,
    pub checksum_before: String,
    pub checksum_after: String,
}

fn encoder_records(encoder: &Encoder) -> Vec<EncoderRecord> {
    encoder
        .provenance()
        .into_iter()
        .map(|(family, layer, weights_digest)| EncoderRecord { family: family.to_string(), layer, weights_digest })
        .collect()
}

/// Loads the frozen encoder, extracts features, trains the decoder and
/// writes `decoder.safetensors` and `history.csv` into `out_dir`. The
/// encoder checksum is taken before and after; a difference is an error.
pub fn train(req: &TrainRequest<'_>, observer: &mut dyn FnMut(&EpochRecord, &Decoder<f32>) -> Control) -> Result<TrainOutcome> {
    req.config.validate()?;
    if req.train.is_empty() {
        return Err(ValidationError::EmptyManifest(req.train.name.clone()).into());
    }
    if let Some(v) = req.val {
        if v.is_empty() {
            return Err(ValidationError::EmptyManifest(v.name.clone()).into());
        }
    }
    let encoder = Encoder::load(&req.backbones)?;
    let checksum_before = encoder.weight_checksum();
    let (h, w, d) = encoder.output_shape()?;
    let spec = DecoderSpec::new(req.decoder, d, (h, w))?;
    let cache = req.cache_dir.as_ref().map(FeatureCache::new);
    if let Some(dir) = &req.cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let out = spec.output_size();
    let train_set = prepare_features(&encoder, req.train, out, &req.config, cache.as_ref(), req.mask_options)?;
    let val_set = req.val.map(|v| prepare_features(&encoder, v, out, &req.config, cache.as_ref(), req.mask_options)).transpose()?;
    let mut decoder = Decoder::<f32>::new(spec, &InitOptions { seed: req.config.seed, zero_final: req.config.zero_init_final })?;
    let history = fit(&mut decoder, &train_set, val_set.as_ref(), &req.config, observer)?;
    let checksum_after = encoder.weight_checksum();
    if checksum_after != checksum_before {
        return Err(Error::Weights("encoder weights changed during training".into()));
    }
    std::fs::create_dir_all(&req.out_dir).map_err(|e| Error::io(&req.out_dir, e))?;
    let mut meta = CheckpointMeta::new(spec, encoder_records(&encoder));
    meta.config_hash = req.config_hash.clone();
    meta.training = serde_json::json!({
        "config": req.config,
        "optimizer": {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "epochs_run": history.records.len(),
        "stop_reason": history.stop_reason,
        "encoder_checksum": checksum_after,
    });
    let checkpoint = req.out_dir.join("decoder.safetensors");
    save_checkpoint(&checkpoint, &decoder, &meta)?;
    let history_path = req.out_dir.join("history.csv");
    history.write_csv(&history_path)?;
    Ok(TrainOutcome { checkpoint, history_path, history, decoder, checksum_before, checksum_after })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub probe: LinearProbe,
    pub backbone: String,
    pub weights_digest: String,
}

pub struct ProbeOutcome {
    pub path: PathBuf,
    pub probe: LinearProbe,
    pub history: History,
    /// Training-set scores in manifest order, with fake = true labels.
    pub scores: Vec<f32>,
    pub labels: Vec<bool>,
}

/// Global-token vectors of every sample in `manifest`.
pub fn global_tokens(backbone: &Backbone, manifest: &DatasetManifest) -> Result<Vec<Vec<f32>>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            let path = manifest.image_path(s);
            let img = image::open(&path).map_err(|e| Error::image(&path, e))?;
            backbone.global_token(&crate::backbone::preprocess(&img)?)
        })
        .collect()
}

/// Image-level detection probe: logistic regression on the transformer's
/// global token, written to `out_dir/probe.json`.
pub fn train_cls_probe(spec: &BackboneSpec, manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<ProbeOutcome> {
    if spec.family != BackboneFamily::VitL14 {
        return Err(invalid("the detection probe reads the transformer's global token; use vit-l14"));
    }
    if manifest.is_empty() {
        return Err(ValidationError::EmptyManifest(manifest.name.clone()).into());
    }
    let labels: Vec<bool> = manifest.samples.iter().map(|s| s.label == Label::Fake).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(ValidationError::DegenerateLabels.into());
    }
    let backbone = Backbone::load(spec.family, &spec.weights)?;
    let feats = global_tokens(&backbone, manifest)?;
    let (probe, history) = train_linear_probe(&feats, &labels, cfg)?;
    let scores = feats.iter().map(|f| probe.score(f)).collect();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("probe.json");
    let file = ProbeFile { probe: probe.clone(), backbone: spec.family.to_string(), weights_digest: backbone.digest().to_string() };
    crate::data::write_atomic(&path, &serde_json::to_vec_pretty(&file)?)?;
    history.write_csv(&out_dir.join("history.csv"))?;
    Ok(ProbeOutcome { path, probe, history, scores, labels })
}

/// Feature grids for a manifest, for evaluation.
pub fn encode_manifest(encoder: &Encoder, manifest: &DatasetManifest, cache: Option<&FeatureCache>) -> Result<Vec<FeatureGrid>> {
    manifest.samples.iter().map(|s| encode_path(encoder, &manifest.image_path(s), cache)).collect()
}
