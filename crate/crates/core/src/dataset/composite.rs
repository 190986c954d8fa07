//! Mask-driven compositing of two same-sized images, and the two derived
//! datasets built with it: generated content on a real background, and real
//! content carrying a generator fingerprint only inside the mask.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::par_map;
use crate::data::{load_mask, save_png, DatasetManifest, Label, LoadOptions, MaskGrid, Sample, Split};
use crate::error::{dim_mismatch, Error, Result, ValidationError};

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeJob {
    /// Pixels where the mask is 1.
    pub inside_source: PathBuf,
    /// Pixels where the mask is 0.
    pub outside_source: PathBuf,
    pub mask: MaskGrid,
    pub output_path: PathBuf,
}

/// Exact per-pixel selection; no blending at mask borders.
pub fn composite_images(inside: &RgbImage, outside: &RgbImage, mask: &MaskGrid) -> Result<RgbImage> {
    let dims = (mask.width as u32, mask.height as u32);
    if inside.dimensions() != dims || outside.dimensions() != dims {
        return Err(dim_mismatch(format!(
            "composite sources {:?} / {:?} against mask {:?}",
            inside.dimensions(),
            outside.dimensions(),
            dims
        )));
    }
    let mut out = outside.clone();
    for (i, (dst, src)) in out.pixels_mut().zip(inside.pixels()).enumerate() {
        if mask.values[i] != 0 {
            *dst = *src;
        }
    }
    Ok(out)
}

pub fn open_rgb(path: &Path) -> Result<RgbImage> {
    if !path.is_file() {
        return Err(ValidationError::MissingFile(path.to_path_buf()).into());
    }
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

pub fn composite(job: &CompositeJob) -> Result<RgbImage> {
    let inside = open_rgb(&job.inside_source)?;
    let outside = open_rgb(&job.outside_source)?;
    let out = composite_images(&inside, &outside, &job.mask)?;
    save_png(&image::DynamicImage::ImageRgb8(out.clone()), &job.output_path)?;
    Ok(out)
}

/// True when every pixel outside the mask equals `background`.
pub fn background_is_exact(image: &RgbImage, background: &RgbImage, mask: &MaskGrid) -> bool {
    image.dimensions() == background.dimensions()
        && image.pixels().zip(background.pixels()).zip(&mask.values).all(|((a, b), &m)| m != 0 || a == b)
}

const IMAGE_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "webp"];

/// Image files of `dir` keyed by file stem.
pub fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(ValidationError::MissingFile(dir.to_path_buf()).into());
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Which variant to build; decides which directory supplies the masked region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LdmVariant {
    /// Generated image inside the mask, real background.
    Clean,
    /// Fingerprinted reconstruction of the real image inside the mask.
    Real,
}

impl LdmVariant {
    pub fn generator_tag(self) -> &'static str {
        match self {
            LdmVariant::Clean => "ldm-clean",
            LdmVariant::Real => "ldm-real",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LdmBuild<'a> {
    pub variant: LdmVariant,
    pub real_dir: &'a Path,
    /// Generator outputs: inpainted images, or empty-mask reconstructions.
    pub generated_dir: &'a Path,
    pub mask_dir: &'a Path,
    pub out_dir: &'a Path,
    pub split: Split,
    pub mask_options: LoadOptions,
}

/// Composites every matched (real, generated, mask) triple into
/// `out_dir/images`, copies masks to `out_dir/masks`, and writes
/// `out_dir/manifest.jsonl`. Triples are matched by file stem; any file
/// without partners in both other directories is an error.
pub fn build_ldm_dataset(b: &LdmBuild<'_>) -> Result<DatasetManifest> {
    let real = images_by_stem(b.real_dir)?;
    let generated = images_by_stem(b.generated_dir)?;
    let masks = images_by_stem(b.mask_dir)?;
    for (set, others, dir) in [
        (&masks, [&real, &generated], b.mask_dir),
        (&real, [&masks, &generated], b.real_dir),
        (&generated, [&masks, &real], b.generated_dir),
    ] {
        for stem in set.keys() {
            if others.iter().any(|o| !o.contains_key(stem)) {
                return Err(ValidationError::Unmatched { file: set[stem].clone(), dir: dir.to_path_buf() }.into());
            }
        }
    }
    let images_dir = b.out_dir.join("images");
    let masks_dir = b.out_dir.join("masks");
    for d in [&images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let stems: Vec<&String> = masks.keys().collect();
    let samples = par_map(&stems, |stem| -> Result<Sample> {
        let mask = load_mask(&masks[*stem], None, b.mask_options)?;
        let job = CompositeJob {
            inside_source: generated[*stem].clone(),
            outside_source: real[*stem].clone(),
            mask: mask.clone(),
            output_path: images_dir.join(format!("{stem}.png")),
        };
        composite(&job)?;
        mask.save(&masks_dir.join(format!("{stem}.png")))?;
        Ok(Sample {
            image_path: PathBuf::from("images").join(format!("{stem}.png")),
            mask_path: Some(PathBuf::from("masks").join(format!("{stem}.png"))),
            label: Label::Fake,
            generator: b.variant.generator_tag().into(),
            split: b.split,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(b.variant.generator_tag(), b.out_dir, samples);
    manifest.save(&b.out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
