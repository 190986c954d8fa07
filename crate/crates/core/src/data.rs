//! Dataset manifests, ground-truth masks and prediction maps.
//!
//! A manifest is a JSON-lines file with one [`Sample`] per line. Paths inside
//! it are relative to the directory holding the manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result, ValidationError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub label: Label,
    pub generator: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Threshold masks at 128 instead of rejecting values outside {0, 255}.
    pub binarize: bool,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, mut samples: Vec<Sample>) -> Self {
        samples.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        Self { name: name.into(), root: root.into(), samples }
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        if relative.is_absolute() {
            relative.to_path_buf()
        } else {
            self.root.join(relative)
        }
    }

    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        self.resolve(&sample.image_path)
    }

    pub fn mask_path(&self, sample: &Sample) -> Option<PathBuf> {
        sample.mask_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn fakes(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.label == Label::Fake)
    }

    pub fn filter_split(&self, split: Split) -> Self {
        Self {
            name: self.name.clone(),
            root: self.root.clone(),
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
        }
    }

    /// Loads the mask for `sample` at `target` size; real samples without a
    /// mask get an all-zero grid.
    pub fn load_sample_mask(&self, sample: &Sample, target: (usize, usize), opts: LoadOptions) -> Result<MaskGrid> {
        match self.mask_path(sample) {
            Some(p) => load_mask(&p, Some(target), opts),
            None if sample.label == Label::Real => Ok(MaskGrid::zeros(target.0, target.1)),
            None => Err(ValidationError::MissingMask(sample.image_path.clone()).into()),
        }
    }

    /// Writes the manifest as JSON lines in sample order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        write_atomic(path, &out)
    }
}

fn check_sample(s: &Sample, line: usize) -> Result<()> {
    if s.generator.trim().is_empty() {
        return Err(ValidationError::EmptyGenerator(s.image_path.clone()).into());
    }
    if s.label == Label::Fake && s.mask_path.is_none() {
        return Err(ValidationError::MissingMask(s.image_path.clone()).into());
    }
    if s.image_path.as_os_str().is_empty() {
        return Err(ValidationError::MalformedRecord { line, message: "empty image_path".into() }.into());
    }
    Ok(())
}

/// Reads and validates a JSON-lines manifest. Samples come back sorted by
/// `image_path`; every referenced file must exist and masks must be binary.
pub fn load_manifest(path: &Path, opts: LoadOptions) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(ValidationError::MissingFile(path.to_path_buf()).into());
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample =
            serde_json::from_str(&line).map_err(|e| ValidationError::MalformedRecord { line: i + 1, message: e.to_string() })?;
        check_sample(&sample, i + 1)?;
        samples.push(sample);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest = DatasetManifest::new(name, root, samples);
    for s in &manifest.samples {
        let img = manifest.image_path(s);
        if !img.is_file() {
            return Err(ValidationError::MissingFile(img).into());
        }
        if let Some(mask_path) = manifest.mask_path(s) {
            if !mask_path.is_file() {
                return Err(ValidationError::MissingFile(mask_path).into());
            }
            let mask = load_mask(&mask_path, None, opts)?;
            if s.label == Label::Real && mask.positives() > 0 {
                return Err(ValidationError::RealMaskNotEmpty(s.image_path.clone()).into());
            }
        }
    }
    Ok(manifest)
}

/// Binary ground-truth grid; 1 marks a manipulated pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl MaskGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, values }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] != 0
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.positives() as f64 / (self.height * self.width) as f64
    }

    /// Nearest-neighbor resize: target index `i` samples source `floor(i * src / dst)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> MaskGrid {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        MaskGrid::from_fn(height, width, |y, x| self.get(y * self.height / height, x * self.width / width))
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_png(&image::DynamicImage::ImageLuma8(self.to_image()), path)
    }
}

/// Loads a mask PNG, enforcing binarity, then resizes with nearest neighbor.
pub fn load_mask(path: &Path, target: Option<(usize, usize)>, opts: LoadOptions) -> Result<MaskGrid> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(ValidationError::ZeroArea(path.to_path_buf()).into());
    }
    let mut values = Vec::with_capacity(w * h);
    for &v in img.as_raw() {
        let bit = match v {
            0 => 0,
            255 => 1,
            other if opts.binarize => u8::from(other >= 128),
            other => return Err(ValidationError::NonBinaryMask { path: path.to_path_buf(), value: other }.into()),
        };
        values.push(bit);
    }
    let grid = MaskGrid { height: h, width: w, values };
    Ok(match target {
        Some((th, tw)) => {
            if th == 0 || tw == 0 {
                return Err(ValidationError::ZeroArea(path.to_path_buf()).into());
            }
            grid.resize_nearest(th, tw)
        }
        None => grid,
    })
}

/// Per-pixel manipulation probability.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl PredictionMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(dim_mismatch(format!("prediction has {} values for {height}x{width}", values.len())));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(crate::error::invalid(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, p: f32) -> Self {
        Self { height, width, values: vec![p.clamp(0.0, 1.0); height * width] }
    }

    pub fn from_logits(height: usize, width: usize, logits: &[f32]) -> Self {
        let values = logits.iter().map(|&z| sigmoid(z)).collect();
        Self { height, width, values }
    }

    pub fn binarize(&self, threshold: f32) -> MaskGrid {
        MaskGrid { height: self.height, width: self.width, values: self.values.iter().map(|&p| u8::from(p > threshold)).collect() }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.values[y as usize * self.width + x as usize];
            Luma([(255.0 * p).round().clamp(0.0, 255.0) as u8])
        })
    }

    /// Stores `round(255 p)` as 8-bit grayscale.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_png(&image::DynamicImage::ImageLuma8(self.to_image()), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
        let values = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Ok(Self { height: img.height() as usize, width: img.width() as usize, values })
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Writes to a sibling temp file then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::image(path, e))?;
    write_atomic(path, buf.get_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_gray(path: &Path, w: u32, h: u32, px: &[u8]) {
        GrayImage::from_raw(w, h, px.to_vec()).unwrap().save(path).unwrap();
    }

    #[test]
    fn nearest_resize_matches_index_oracle() {
        let checker = MaskGrid::from_fn(4, 4, |y, x| (x + y) % 2 == 0);
        let small = checker.resize_nearest(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(small.get(i, j), checker.get(i * 4 / 2, j * 4 / 2));
            }
        }
        // every sampled source cell has even parity, so the result is all ones
        assert_eq!(small.values, vec![1, 1, 1, 1]);
    }

    #[test]
    fn non_binary_mask_is_rejected_unless_binarized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_gray(&p, 3, 1, &[0, 127, 255]);
        let err = load_mask(&p, None, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(ValidationError::NonBinaryMask { value: 127, .. })));
        let m = load_mask(&p, None, LoadOptions { binarize: true }).unwrap();
        assert_eq!(m.values, vec![0, 0, 1]);
    }

    #[test]
    fn mask_identity_and_constant_resize() {
        let dir = tempfile::tempdir().unwrap();
        let m = MaskGrid::from_fn(256, 256, |y, x| y > x);
        let p = dir.path().join("a.png");
        m.save(&p).unwrap();
        assert_eq!(load_mask(&p, Some((256, 256)), LoadOptions::default()).unwrap(), m);
        let ones = MaskGrid::from_fn(512, 512, |_, _| true);
        let q = dir.path().join("b.png");
        ones.save(&q).unwrap();
        let r = load_mask(&q, Some((256, 256)), LoadOptions::default()).unwrap();
        assert_eq!(r.positives(), 256 * 256);
    }

    #[test]
    fn zero_target_is_zero_area_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        MaskGrid::zeros(4, 4).save(&p).unwrap();
        assert!(matches!(load_mask(&p, Some((0, 4)), LoadOptions::default()), Err(Error::Validation(ValidationError::ZeroArea(_)))));
        assert!(load_mask(&dir.path().join("missing.png"), None, LoadOptions::default()).is_err());
    }

    fn manifest_fixture(dir: &Path, lines: &[&str]) -> PathBuf {
        let img = image::RgbImage::new(8, 8);
        img.save(dir.join("b.png")).unwrap();
        img.save(dir.join("a.png")).unwrap();
        MaskGrid::from_fn(8, 8, |y, _| y < 4).save(&dir.join("ma.png")).unwrap();
        MaskGrid::from_fn(8, 8, |_, x| x < 2).save(&dir.join("mb.png")).unwrap();
        let p = dir.join("set.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn manifest_loads_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest_fixture(
            dir.path(),
            &[
                r#"{"image_path":"b.png","mask_path":"mb.png","label":"fake","generator":"ldm","split":"train"}"#,
                r#"{"image_path":"a.png","mask_path":"ma.png","label":"fake","generator":"ldm","split":"train"}"#,
            ],
        );
        let m = load_manifest(&p, LoadOptions::default()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.samples[0].image_path, PathBuf::from("a.png"));
        assert_eq!(m.name, "set");
        assert_eq!(m, load_manifest(&p, LoadOptions::default()).unwrap());
    }

    #[test]
    fn manifest_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let cases: [(&str, fn(&ValidationError) -> bool); 4] = [
            (r#"{"image_path":"a.png","label":"fake","generator":"ldm","split":"train"}"#, |e| {
                matches!(e, ValidationError::MissingMask(_))
            }),
            (r#"{"image_path":"a.png","label":"fake","generator":"ldm","split":"bogus"}"#, |e| {
                matches!(e, ValidationError::MalformedRecord { line: 1, .. })
            }),
            (r#"{"image_path":"zz.png","mask_path":"ma.png","label":"fake","generator":"ldm","split":"test"}"#, |e| {
                matches!(e, ValidationError::MissingFile(_))
            }),
            (r#"{"image_path":"a.png","mask_path":"ma.png","label":"real","generator":"ldm","split":"test"}"#, |e| {
                matches!(e, ValidationError::RealMaskNotEmpty(_))
            }),
        ];
        for (line, check) in cases {
            let p = manifest_fixture(dir.path(), &[line]);
            match load_manifest(&p, LoadOptions::default()) {
                Err(Error::Validation(v)) => assert!(check(&v), "{line}: {v}"),
                other => panic!("{line}: {other:?}"),
            }
        }
        assert!(matches!(
            load_manifest(&dir.path().join("nope.jsonl"), LoadOptions::default()),
            Err(Error::Validation(ValidationError::MissingFile(_)))
        ));
    }

    #[test]
    fn prediction_png_stores_rounded_probability() {
        let dir = tempfile::tempdir().unwrap();
        let p = PredictionMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let path = dir.path().join("p.png");
        p.save(&path).unwrap();
        let raw = image::open(&path).unwrap().to_luma8().into_raw();
        assert_eq!(raw, vec![0, 128, 255]);
        assert!(PredictionMap::new(1, 1, vec![1.5]).is_err());
        assert!(PredictionMap::new(1, 1, vec![f32::NAN]).is_err());
    }
}
