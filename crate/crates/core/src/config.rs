//! Run configuration shared by all commands.
//!
//! Values resolve as command-line flag, then config file, then default. The
//! hash of the resolved configuration names the run directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneFamily, BackboneSpec, WeightSource};
use crate::data::LoadOptions;
use crate::decoder::DecoderArch;
use crate::error::{invalid, Error, Result, ValidationError};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneChoice {
    #[serde(rename = "vit-l14")]
    VitL14,
    #[serde(rename = "rn50")]
    Rn50,
    /// Two transformer layers stacked channel-wise.
    #[serde(rename = "concat")]
    Concat,
}

impl fmt::Display for BackboneChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneChoice::VitL14 => "vit-l14",
            BackboneChoice::Rn50 => "rn50",
            BackboneChoice::Concat => "concat",
        })
    }
}

impl FromStr for BackboneChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(BackboneChoice::Concat),
            other => match other.parse::<BackboneFamily>()? {
                BackboneFamily::VitL14 => Ok(BackboneChoice::VitL14),
                BackboneFamily::Resnet50 => Ok(BackboneChoice::Rn50),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneChoice,
    pub layer: usize,
    /// Second transformer layer; only with `concat`.
    pub layer2: Option<usize>,
    /// `seed:N` or a safetensors path with optional `#sha256` suffix.
    pub weights: Option<String>,
    /// Decoder name: `linear`, `attention` or `conv-{4M}`.
    pub decoder: String,
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub threshold: f32,
    /// Threshold ground-truth masks instead of rejecting non-binary values.
    pub binarize_masks: bool,
    pub cache_dir: Option<PathBuf>,
    /// Parent of the run directories; not part of the hash.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneChoice::VitL14,
            layer: 21,
            layer2: None,
            weights: None,
            decoder: "conv-20".into(),
            train: TrainConfig::default(),
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            threshold: 0.5,
            binarize_masks: false,
            cache_dir: None,
            out: PathBuf::from("runs"),
        }
    }
}

/// Command-line values; `None` means "not given".
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub backbone: Option<BackboneChoice>,
    pub layer: Option<usize>,
    pub layer2: Option<usize>,
    pub weights: Option<String>,
    pub decoder: Option<String>,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub initial_lr: Option<f64>,
    pub threshold: Option<f32>,
    pub binarize_masks: Option<bool>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(ValidationError::MissingFile(path.to_path_buf()).into());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, self.to_json().as_bytes())
    }

    /// Flag over file over default.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! take {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = o.$field.clone() { c.$($target).+ = v; })*
            };
        }
        take!(
            backbone => backbone,
            layer => layer,
            decoder => decoder,
            threshold => threshold,
            binarize_masks => binarize_masks,
            out => out,
            seed => train.seed,
            max_epochs => train.max_epochs,
            batch_size => train.batch_size,
            initial_lr => train.initial_lr,
        );
        macro_rules! take_opt {
            ($($field:ident),*) => { $(if o.$field.is_some() { c.$field = o.$field.clone(); })* };
        }
        take_opt!(layer2, weights, train_manifest, val_manifest, test_manifest, cache_dir);
        Ok(c)
    }

    /// First 12 hex digits of the sha256 of the canonical JSON, `out` excluded.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { out: PathBuf::new(), ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        crate::backbone::weights::sha256_hex(&bytes)[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.hash())
    }

    pub fn decoder_arch(&self) -> Result<DecoderArch> {
        self.decoder.parse().map_err(Error::from)
    }

    pub fn weight_source(&self) -> Result<WeightSource> {
        let w = self.weights.as_deref().ok_or_else(|| invalid("no backbone weights given (use --weights PATH or --weights seed:N)"))?;
        w.parse().map_err(|e: String| invalid(e))
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { binarize: self.binarize_masks }
    }

    /// Encoder description: one backbone, or two layers of the transformer.
    pub fn backbone_specs(&self) -> Result<Vec<BackboneSpec>> {
        let weights = self.weight_source()?;
        match (self.backbone, self.layer2) {
            (BackboneChoice::Concat, Some(l2)) => Ok(vec![
                BackboneSpec::new(BackboneFamily::VitL14, self.layer, weights.clone())?,
                BackboneSpec::new(BackboneFamily::VitL14, l2, weights)?,
            ]),
            (BackboneChoice::Concat, None) => Err(invalid("concat needs --layer2")),
            (_, Some(_)) => Err(invalid("--layer2 is only valid with --backbone concat")),
            (BackboneChoice::VitL14, None) => Ok(vec![BackboneSpec::new(BackboneFamily::VitL14, self.layer, weights)?]),
            (BackboneChoice::Rn50, None) => Ok(vec![BackboneSpec::new(BackboneFamily::Resnet50, self.layer, weights)?]),
        }
    }

    /// Checks everything that does not need files on disk.
    pub fn validate(&self) -> Result<()> {
        self.decoder_arch()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(invalid(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        let family = match self.backbone {
            BackboneChoice::Rn50 => BackboneFamily::Resnet50,
            _ => BackboneFamily::VitL14,
        };
        family.check_layer(self.layer)?;
        if let Some(l2) = self.layer2 {
            family.check_layer(l2)?;
        }
        match (self.backbone, self.layer2) {
            (BackboneChoice::Concat, None) => Err(invalid("concat needs --layer2")),
            (BackboneChoice::VitL14 | BackboneChoice::Rn50, Some(_)) => Err(invalid("--layer2 is only valid with --backbone concat")),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(&file, r#"{"layer": 7, "decoder": "conv-4", "train": {"batch_size": 8}}"#).unwrap();
        let o = Overrides { layer: Some(24), seed: Some(3), ..Overrides::default() };
        let c = RunConfig::resolve(Some(&file), &o).unwrap();
        assert_eq!(c.layer, 24);
        assert_eq!(c.decoder, "conv-4");
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.train.max_epochs, 300);
        assert_eq!(c.backbone, BackboneChoice::VitL14);
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let c = RunConfig {
            backbone: BackboneChoice::Concat,
            layer2: Some(7),
            weights: Some("seed:4".into()),
            threshold: 0.25,
            val_manifest: Some("v/manifest.jsonl".into()),
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_parent_only() {
        let a = RunConfig::default();
        let b = RunConfig { out: "elsewhere".into(), ..RunConfig::default() };
        let c = RunConfig { layer: 7, ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn validation() {
        let ok = RunConfig::default();
        ok.validate().unwrap();
        for bad in [
            RunConfig { layer: 25, ..ok.clone() },
            RunConfig { backbone: BackboneChoice::Rn50, layer: 5, ..ok.clone() },
            RunConfig { backbone: BackboneChoice::Concat, ..ok.clone() },
            RunConfig { layer2: Some(7), ..ok.clone() },
            RunConfig { decoder: "conv-5".into(), ..ok.clone() },
            RunConfig { threshold: 1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().unwrap_err().is_validation(), "{bad:?}");
        }
        assert!(serde_json::from_str::<RunConfig>(r#"{"layers": 3}"#).is_err());
    }

    #[test]
    fn concat_reads_two_transformer_layers() {
        let c = RunConfig {
            backbone: BackboneChoice::Concat,
            layer: 21,
            layer2: Some(7),
            weights: Some("seed:1".into()),
            ..RunConfig::default()
        };
        let specs = c.backbone_specs().unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!((specs[0].layer, specs[1].layer), (21, 7));
        assert!(RunConfig::default().backbone_specs().is_err());
    }
}
