//! Frozen image encoders and the feature grids they produce.
//!
//! Encoders are immutable once loaded: every method takes `&self`, and
//! [`Backbone::weight_checksum`] lets callers verify nothing changed across a
//! training run.

pub mod features;
pub mod preprocess;
pub mod resnet;
pub mod vit;
pub mod weights;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use features::{concat_batches, concat_features, FeatureGrid};
pub use preprocess::{preprocess, ImageTensor};
pub use weights::WeightSource;

use crate::error::{Error, Result, ValidationError};
use resnet::ModifiedResNet;
use vit::{VisionTransformer, VitConfig};
use weights::Checksum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    VitL14,
    Resnet50,
}

impl BackboneFamily {
    pub fn max_layer(self) -> usize {
        match self {
            BackboneFamily::VitL14 => 24,
            BackboneFamily::Resnet50 => 4,
        }
    }

    /// `(height, width, dim)` of the grid at `layer` for a 224 px input.
    pub fn grid_shape(self, layer: usize) -> Result<(usize, usize, usize)> {
        self.check_layer(layer)?;
        Ok(match self {
            BackboneFamily::VitL14 => (16, 16, 1024),
            BackboneFamily::Resnet50 => {
                let side = 56 >> (layer - 1);
                (side, side, 256 << (layer - 1))
            }
        })
    }

    pub fn check_layer(self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.max_layer() {
            return Err(ValidationError::LayerOutOfRange { family: self.to_string(), layer, max: self.max_layer() }.into());
        }
        Ok(())
    }
}

impl fmt::Display for BackboneFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneFamily::VitL14 => "vit-l14",
            BackboneFamily::Resnet50 => "rn50",
        })
    }
}

impl FromStr for BackboneFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vit-l14" | "vit_l14" => Ok(BackboneFamily::VitL14),
            "rn50" | "resnet50" => Ok(BackboneFamily::Resnet50),
            other => Err(format!("unknown backbone {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub layer: usize,
    pub weights: WeightSource,
}

impl BackboneSpec {
    pub fn new(family: BackboneFamily, layer: usize, weights: WeightSource) -> Result<Self> {
        family.check_layer(layer)?;
        Ok(Self { family, layer, weights })
    }

    pub fn grid_shape(&self) -> Result<(usize, usize, usize)> {
        self.family.grid_shape(self.layer)
    }
}

enum Net {
    Vit(Box<VisionTransformer>),
    ResNet(Box<ModifiedResNet>),
}

/// A loaded, frozen encoder.
pub struct Backbone {
    family: BackboneFamily,
    net: Net,
    digest: String,
}

impl Backbone {
    pub fn load(family: BackboneFamily, source: &WeightSource) -> Result<Self> {
        let (net, digest) = match family {
            BackboneFamily::VitL14 => {
                let cfg = VitConfig::l14();
                let (map, digest) = weights::resolve(source, &cfg.layout())?;
                (Net::Vit(Box::new(VisionTransformer::from_weights(cfg, map)?)), digest)
            }
            BackboneFamily::Resnet50 => {
                let (map, digest) = weights::resolve(source, &resnet::layout())?;
                (Net::ResNet(Box::new(ModifiedResNet::from_weights(map)?)), digest)
            }
        };
        Ok(Self { family, net, digest })
    }

    pub fn family(&self) -> BackboneFamily {
        self.family
    }

    /// Provenance of the loaded weights: file sha256 or `seed:N`.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// sha256 over every weight tensor currently in memory.
    pub fn weight_checksum(&self) -> String {
        let mut sum = Checksum::default();
        match &self.net {
            Net::Vit(v) => v.checksum(&mut sum),
            Net::ResNet(r) => r.checksum(&mut sum),
        }
        sum.finish()
    }

    /// Grids for several layers of one image in a single pass.
    pub fn extract_layers(&self, input: &ImageTensor, layers: &[usize]) -> Result<Vec<FeatureGrid>> {
        for &l in layers {
            self.family.check_layer(l)?;
        }
        match &self.net {
            Net::Vit(v) => Ok(v.forward(input, layers, false)?.0),
            Net::ResNet(r) => r.forward(input, layers),
        }
    }

    pub fn extract(&self, input: &ImageTensor, layer: usize) -> Result<FeatureGrid> {
        Ok(self.extract_layers(input, &[layer])?.remove(0))
    }

    pub fn extract_batch(&self, inputs: &[ImageTensor], layer: usize) -> Result<Vec<FeatureGrid>> {
        inputs.iter().map(|i| self.extract(i, layer)).collect()
    }

    /// Projected CLS embedding after the final block (transformer only).
    pub fn global_token(&self, input: &ImageTensor) -> Result<Vec<f32>> {
        match &self.net {
            Net::Vit(v) => Ok(v.forward(input, &[], true)?.1.expect("global requested")),
            Net::ResNet(_) => Err(crate::error::invalid("global token requires the vit-l14 backbone")),
        }
    }
}

/// Where the second grid of a stacked encoder comes from.
pub enum SecondSource {
    /// Another layer of the primary backbone, read in the same forward pass.
    SameBackbone(usize),
    Other(Backbone, usize),
}

/// One or two encoders producing the decoder's input grid. With two, the
/// grids are stacked channel-wise at the higher resolution.
pub struct Encoder {
    pub primary: (Backbone, usize),
    pub secondary: Option<SecondSource>,
}

impl Encoder {
    pub fn single(backbone: Backbone, layer: usize) -> Result<Self> {
        backbone.family().check_layer(layer)?;
        Ok(Self { primary: (backbone, layer), secondary: None })
    }

    /// Two layers of one backbone.
    pub fn layers(backbone: Backbone, first: usize, second: usize) -> Result<Self> {
        backbone.family().check_layer(first)?;
        backbone.family().check_layer(second)?;
        Ok(Self { primary: (backbone, first), secondary: Some(SecondSource::SameBackbone(second)) })
    }

    pub fn dual(a: (Backbone, usize), b: (Backbone, usize)) -> Result<Self> {
        a.0.family().check_layer(a.1)?;
        b.0.family().check_layer(b.1)?;
        Ok(Self { primary: a, secondary: Some(SecondSource::Other(b.0, b.1)) })
    }

    /// Loads one spec, or two for channel-stacked features. Two specs over
    /// the same weights share a single backbone.
    pub fn load(specs: &[BackboneSpec]) -> Result<Self> {
        for s in specs {
            s.family.check_layer(s.layer)?;
        }
        match specs {
            [a] => Self::single(Backbone::load(a.family, &a.weights)?, a.layer),
            [a, b] if a.family == b.family && a.weights == b.weights => {
                Self::layers(Backbone::load(a.family, &a.weights)?, a.layer, b.layer)
            }
            [a, b] => Self::dual((Backbone::load(a.family, &a.weights)?, a.layer), (Backbone::load(b.family, &b.weights)?, b.layer)),
            _ => Err(crate::error::invalid("an encoder takes one or two backbones")),
        }
    }

    fn parts(&self) -> Vec<(&Backbone, usize)> {
        let mut v = vec![(&self.primary.0, self.primary.1)];
        match &self.secondary {
            None => {}
            Some(SecondSource::SameBackbone(l)) => v.push((&self.primary.0, *l)),
            Some(SecondSource::Other(b, l)) => v.push((b, *l)),
        }
        v
    }

    /// `(family, layer, weights digest)` per stacked grid.
    pub fn provenance(&self) -> Vec<(BackboneFamily, usize, String)> {
        self.parts().into_iter().map(|(b, l)| (b.family(), l, b.digest().to_string())).collect()
    }

    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let shapes = self.parts().into_iter().map(|(b, l)| b.family().grid_shape(l)).collect::<Result<Vec<_>>>()?;
        let (h, w, d) = shapes[0];
        Ok(match shapes.get(1) {
            None => (h, w, d),
            Some(&(h2, w2, d2)) if h * w >= h2 * w2 => (h, w, d + d2),
            Some(&(h2, w2, d2)) => (h2, w2, d + d2),
        })
    }

    pub fn encode(&self, input: &ImageTensor) -> Result<FeatureGrid> {
        let (backbone, layer) = (&self.primary.0, self.primary.1);
        match &self.secondary {
            None => backbone.extract(input, layer),
            Some(SecondSource::SameBackbone(l)) => {
                let grids = backbone.extract_layers(input, &[layer, *l])?;
                Ok(concat_features(&grids[0], &grids[1]))
            }
            Some(SecondSource::Other(b, l)) => Ok(concat_features(&backbone.extract(input, layer)?, &b.extract(input, *l)?)),
        }
    }

    pub fn digests(&self) -> Vec<String> {
        self.parts().into_iter().map(|(b, _)| b.digest().to_string()).collect()
    }

    pub fn weight_checksum(&self) -> String {
        let mut sums = vec![self.primary.0.weight_checksum()];
        if let Some(SecondSource::Other(b, _)) = &self.secondary {
            sums.push(b.weight_checksum());
        }
        sums.join("+")
    }

    /// Stable identifier of (weights, layers), used as a cache namespace.
    pub fn cache_key(&self) -> String {
        let parts: Vec<String> = self.parts().into_iter().map(|(b, l)| format!("{}:{}:{}", b.family(), l, b.digest())).collect();
        weights::sha256_hex(parts.join("|").as_bytes())
    }
}

/// On-disk cache of encoder outputs keyed by image content and encoder identity.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path_for(&self, image_bytes: &[u8], encoder_key: &str) -> PathBuf {
        let mut key = encoder_key.as_bytes().to_vec();
        key.extend_from_slice(image_bytes);
        self.dir.join(format!("{}.fgrid", &weights::sha256_hex(&key)[..32]))
    }

    /// Cached grid for the image at `path`, computing and storing it on a miss.
    pub fn get_or_compute(&self, encoder: &Encoder, path: &Path) -> Result<FeatureGrid> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = self.path_for(&bytes, &encoder.cache_key());
        if file.is_file() {
            return FeatureGrid::load(&file);
        }
        let grid = encode_bytes(encoder, &bytes, path)?;
        grid.save(&file)?;
        Ok(grid)
    }
}

fn encode_bytes(encoder: &Encoder, bytes: &[u8], path: &Path) -> Result<FeatureGrid> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::image(path, e))?;
    encoder.encode(&preprocess(&img)?)
}

/// Preprocesses and encodes an already decoded image.
pub fn encode_image(encoder: &Encoder, img: &image::DynamicImage) -> Result<FeatureGrid> {
    encoder.encode(&preprocess(img)?)
}

/// Decodes, preprocesses and encodes the image at `path`, through `cache` when given.
pub fn encode_path(encoder: &Encoder, path: &Path, cache: Option<&FeatureCache>) -> Result<FeatureGrid> {
    match cache {
        Some(c) => c.get_or_compute(encoder, path),
        None => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            encode_bytes(encoder, &bytes, path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_table_for_every_family_and_layer() {
        for l in 1..=24 {
            assert_eq!(BackboneFamily::VitL14.grid_shape(l).unwrap(), (16, 16, 1024));
        }
        let want = [(56, 256), (28, 512), (14, 1024), (7, 2048)];
        for (l, (side, dim)) in (1..=4).zip(want) {
            assert_eq!(BackboneFamily::Resnet50.grid_shape(l).unwrap(), (side, side, dim));
        }
        assert!(BackboneFamily::VitL14.grid_shape(25).is_err());
        assert!(BackboneFamily::Resnet50.grid_shape(0).is_err());
        assert!(BackboneFamily::Resnet50.grid_shape(5).is_err());
    }

    #[test]
    fn resnet_features_match_shape_table_and_are_deterministic() {
        let bb = Backbone::load(BackboneFamily::Resnet50, &WeightSource::Seeded(0)).unwrap();
        let img = image::RgbImage::from_fn(224, 224, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 40]));
        let input = preprocess::preprocess_rgb(&img);
        let grids = bb.extract_layers(&input, &[1, 2, 3, 4]).unwrap();
        for (l, g) in (1..=4).zip(&grids) {
            let (h, w, d) = BackboneFamily::Resnet50.grid_shape(l).unwrap();
            assert_eq!((g.height, g.width, g.dim), (h, w, d));
            assert!(g.all_finite());
        }
        assert_eq!(bb.extract(&input, 3).unwrap(), grids[2]);
        let before = bb.weight_checksum();
        let _ = bb.extract(&input, 2).unwrap();
        assert_eq!(before, bb.weight_checksum());
        assert!(matches!(bb.extract(&input, 5), Err(Error::Validation(ValidationError::LayerOutOfRange { .. }))));
    }

    #[test]
    fn cached_features_equal_fresh_ones() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("x.png");
        image::RgbImage::from_fn(64, 64, |x, y| image::Rgb([(x * 4) as u8, (y * 4) as u8, 9])).save(&img_path).unwrap();
        let bb = Backbone::load(BackboneFamily::Resnet50, &WeightSource::Seeded(1)).unwrap();
        let enc = Encoder::single(bb, 2).unwrap();
        let cache = FeatureCache::new(dir.path().join("cache"));
        let fresh = encode_path(&enc, &img_path, None).unwrap();
        let first = encode_path(&enc, &img_path, Some(&cache)).unwrap();
        let second = encode_path(&enc, &img_path, Some(&cache)).unwrap();
        assert_eq!(fresh, first);
        assert_eq!(fresh, second);
    }
}
