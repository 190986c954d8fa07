//! Low-level augmentations: Gaussian blur, color jitter, JPEG round trip.
//! Parameters are drawn per image from a seed mixed with the image identity.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::composite::open_rgb;
use super::par_map;
use crate::data::{save_png, DatasetManifest, Sample};
use crate::error::{invalid, Error, Result};

pub const MAX_SIGMA: f64 = 10.0;
pub const MAX_FACTOR: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    /// Sigma drawn uniformly from `[lo, hi]`.
    GaussianBlur { sigma: [f64; 2] },
    /// Each factor drawn uniformly from its range; 1.0 is identity.
    ColorJitter { brightness: [f64; 2], contrast: [f64; 2], saturation: [f64; 2] },
    /// Quality drawn uniformly from the inclusive range.
    Jpeg { quality: [u8; 2] },
}

impl AugmentKind {
    pub fn default_blur() -> Self {
        AugmentKind::GaussianBlur { sigma: [0.5, 3.0] }
    }

    pub fn default_jitter() -> Self {
        AugmentKind::ColorJitter { brightness: [0.8, 1.2], contrast: [0.8, 1.2], saturation: [0.8, 1.2] }
    }

    pub fn default_jpeg() -> Self {
        AugmentKind::Jpeg { quality: [30, 95] }
    }

    /// `blur`, `jitter` or `jpeg` with the default ranges.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "blur" | "gaussian_blur" => Ok(Self::default_blur()),
            "jitter" | "color_jitter" => Ok(Self::default_jitter()),
            "jpeg" => Ok(Self::default_jpeg()),
            other => Err(invalid(format!("unknown augmentation {other:?} (blur, jitter, jpeg)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    #[serde(flatten)]
    pub kind: AugmentKind,
    pub seed: u64,
}

fn check_range(name: &str, r: [f64; 2], max: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1] && r[1] <= max) {
        return Err(invalid(format!("{name} range {r:?} must satisfy 0 <= lo <= hi <= {max}")));
    }
    Ok(())
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AugmentKind::GaussianBlur { sigma } => check_range("blur sigma", sigma, MAX_SIGMA),
            AugmentKind::ColorJitter { brightness, contrast, saturation } => {
                check_range("brightness", brightness, MAX_FACTOR)?;
                check_range("contrast", contrast, MAX_FACTOR)?;
                check_range("saturation", saturation, MAX_FACTOR)
            }
            AugmentKind::Jpeg { quality: [lo, hi] } => {
                if lo == 0 || lo > hi || hi > 100 {
                    return Err(invalid(format!("jpeg quality range [{lo}, {hi}] must lie in 1..=100")));
                }
                Ok(())
            }
        }
    }
}

/// Per-image generator: sha256 of the image identity and the seed.
fn image_rng(image_id: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Applies `spec` to `image`; `image_id` (typically its relative path) makes
/// the draw differ between images but repeat across runs.
pub fn augment(image: &RgbImage, image_id: &str, spec: &AugmentSpec) -> Result<RgbImage> {
    spec.validate()?;
    let mut rng = image_rng(image_id, spec.seed);
    Ok(match spec.kind {
        AugmentKind::GaussianBlur { sigma } => gaussian_blur(image, draw(&mut rng, sigma)),
        AugmentKind::ColorJitter { brightness, contrast, saturation } => {
            let b = draw(&mut rng, brightness);
            let c = draw(&mut rng, contrast);
            let s = draw(&mut rng, saturation);
            color_jitter(image, b, c, s)
        }
        AugmentKind::Jpeg { quality: [lo, hi] } => jpeg_round_trip(image, rng.random_range(lo..=hi))?,
    })
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, edges clamped.
pub fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (image.width() as i64, image.height() as i64);
    let src: Vec<f64> = image.as_raw().iter().map(|&v| f64::from(v)).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let d = k as i64 - radius;
                    let (sx, sy) = if horizontal { ((x + d).clamp(0, w - 1), y) } else { (x, (y + d).clamp(0, h - 1)) };
                    let base = ((sy * w + sx) * 3) as usize;
                    for c in 0..3 {
                        acc[c] += kv * src[base + c];
                    }
                }
                let base = ((y * w + x) * 3) as usize;
                out[base..base + 3].copy_from_slice(&acc);
            }
        }
        out
    };
    let blurred = pass(&pass(&src, true), false);
    let raw = blurred.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(image.width(), image.height(), raw).expect("same size")
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Brightness, contrast, then saturation, each as a blend with a reference
/// (black, mean gray level, per-pixel gray). Factor 1.0 leaves pixels unchanged.
pub fn color_jitter(image: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let mut px: Vec<[f64; 3]> = image.pixels().map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]).collect();
    let clamp = |v: f64| v.clamp(0.0, 255.0);
    if brightness != 1.0 {
        px.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = clamp(*v * brightness)));
    }
    if contrast != 1.0 {
        let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len().max(1) as f64;
        px.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = clamp(mean + (*v - mean) * contrast)));
    }
    if saturation != 1.0 {
        for p in &mut px {
            let g = luma(*p);
            p.iter_mut().for_each(|v| *v = clamp(g + (*v - g) * saturation));
        }
    }
    let mut out = image.clone();
    for (dst, p) in out.pixels_mut().zip(&px) {
        *dst = Rgb([p[0].round() as u8, p[1].round() as u8, p[2].round() as u8]);
    }
    out
}

pub fn jpeg_round_trip(image: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality)
        .encode_image(image)
        .map_err(|e| Error::Image { path: PathBuf::from("<jpeg>"), source: e })?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Image { path: PathBuf::from("<jpeg>"), source: e })?;
    Ok(decoded.to_rgb8())
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let mse =
        a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / a.as_raw().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

/// Applies `specs` in order to every image of `manifest`, writing PNGs under
/// `out_dir` (same relative paths) and a manifest pointing at them. Masks are
/// referenced from the source location, since augmentation never moves pixels.
pub fn augment_dataset(manifest: &DatasetManifest, specs: &[AugmentSpec], out_dir: &Path) -> Result<DatasetManifest> {
    for s in specs {
        s.validate()?;
    }
    let samples = par_map(&manifest.samples, |s| -> Result<Sample> {
        let id = s.image_path.to_string_lossy().into_owned();
        let mut img = open_rgb(&manifest.image_path(s))?;
        for spec in specs {
            img = augment(&img, &id, spec)?;
        }
        let rel = s.image_path.with_extension("png");
        let dst = out_dir.join(&rel);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_png(&image::DynamicImage::ImageRgb8(img), &dst)?;
        let mask_path = manifest.mask_path(s).map(|p| std::path::absolute(&p).unwrap_or(p));
        Ok(Sample { image_path: rel, mask_path, ..s.clone() })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let out = DatasetManifest::new(format!("{}-aug", manifest.name), out_dir, samples);
    out.save(&out_dir.join("manifest.jsonl"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> RgbImage {
        RgbImage::from_fn(48, 40, |x, y| Rgb([(x * 5 + y) as u8, ((x as f64 * 0.3).sin() * 100.0 + 120.0) as u8, (y * 6) as u8]))
    }

    #[test]
    fn identities() {
        let img = test_image();
        assert_eq!(gaussian_blur(&img, 0.0), img);
        assert_eq!(color_jitter(&img, 1.0, 1.0, 1.0), img);
        let spec = AugmentSpec { kind: AugmentKind::GaussianBlur { sigma: [0.0, 0.0] }, seed: 3 };
        assert_eq!(augment(&img, "a.png", &spec).unwrap(), img);
    }

    #[test]
    fn jpeg_at_full_quality_is_near_lossless() {
        let img = test_image();
        let out = jpeg_round_trip(&img, 100).unwrap();
        assert!(psnr(&img, &out) > 45.0, "{}", psnr(&img, &out));
        assert!(psnr(&img, &jpeg_round_trip(&img, 30).unwrap()) < psnr(&img, &out));
    }

    #[test]
    fn blur_preserves_constants_and_smooths_edges() {
        let flat = RgbImage::from_pixel(9, 9, Rgb([40, 80, 120]));
        assert_eq!(gaussian_blur(&flat, 2.0), flat);
        let step = RgbImage::from_fn(10, 1, |x, _| if x < 5 { Rgb([0; 3]) } else { Rgb([200; 3]) });
        let b = gaussian_blur(&step, 1.0);
        assert!(b.get_pixel(4, 0)[0] > 0 && b.get_pixel(5, 0)[0] < 200);
    }

    #[test]
    fn draws_are_deterministic_per_image_and_seed() {
        let img = test_image();
        let spec = AugmentSpec { kind: AugmentKind::default_jitter(), seed: 11 };
        let a = augment(&img, "x/1.png", &spec).unwrap();
        assert_eq!(a, augment(&img, "x/1.png", &spec).unwrap());
        let differs = ["x/2.png", "x/3.png", "x/4.png"].iter().any(|id| augment(&img, id, &spec).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        for kind in [
            AugmentKind::GaussianBlur { sigma: [2.0, 1.0] },
            AugmentKind::GaussianBlur { sigma: [0.0, 50.0] },
            AugmentKind::Jpeg { quality: [0, 90] },
            AugmentKind::ColorJitter { brightness: [-0.1, 1.0], contrast: [1.0, 1.0], saturation: [1.0, 1.0] },
        ] {
            assert!(AugmentSpec { kind, seed: 0 }.validate().is_err(), "{kind:?}");
        }
        assert!(AugmentKind::from_name("sharpen").is_err());
    }

    #[test]
    fn spec_serializes_with_a_kind_tag() {
        let spec = AugmentSpec { kind: AugmentKind::default_jpeg(), seed: 1 };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"kind":"jpeg","quality":[30,95],"seed":1}"#);
        assert_eq!(serde_json::from_str::<AugmentSpec>(&json).unwrap(), spec);
    }
}
