//! Procedural toy data for smoke runs and tests.
//!
//! Backgrounds are smooth color fields. Manipulated regions are rectangles
//! on a 16 px grid filled with a noisy high-frequency texture, so they line
//! up with the 16x16 token grid of a 256 px image.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_png, DatasetManifest, Label, MaskGrid, Sample, Split};
use crate::error::{invalid, Result};

pub const TOY_SIZE: u32 = 256;
const CELL: u32 = 16;

// the phase range is part of the fixture definition; TAU would change the bytes
#[allow(clippy::approx_constant)]
fn background(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
    let base: [f32; 3] = [rng.random_range(60.0..200.0), rng.random_range(60.0..200.0), rng.random_range(60.0..200.0)];
    let (fx, fy, phase) = (rng.random_range(0.5..2.0f32), rng.random_range(0.5..2.0f32), rng.random_range(0.0..6.28f32));
    let amp = rng.random_range(20.0..45.0f32);
    let tau = std::f32::consts::TAU / size as f32;
    RgbImage::from_fn(size, size, |x, y| {
        let wave = (x as f32 * tau * fx + phase).sin() * (y as f32 * tau * fy).cos();
        let px = |c: usize| (base[c] + amp * wave * (1.0 - 0.3 * c as f32)).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Grid-aligned rectangle covering between 5x5 and 9x9 cells.
fn region(rng: &mut ChaCha8Rng, size: u32) -> MaskGrid {
    let cells = size / CELL;
    let (h, w) = (rng.random_range(5..=9), rng.random_range(5..=9));
    let (y0, x0) = (rng.random_range(0..=cells - h), rng.random_range(0..=cells - w));
    MaskGrid::from_fn(size as usize, size as usize, |y, x| {
        let (cy, cx) = (y as u32 / CELL, x as u32 / CELL);
        (y0..y0 + h).contains(&cy) && (x0..x0 + w).contains(&cx)
    })
}

fn paint_texture(img: &mut RgbImage, mask: &MaskGrid, rng: &mut ChaCha8Rng) {
    let tint: [f32; 3] = [rng.random_range(90.0..170.0), rng.random_range(90.0..170.0), rng.random_range(90.0..170.0)];
    for (x, y, p) in img.enumerate_pixels_mut() {
        if !mask.get(y as usize, x as usize) {
            continue;
        }
        let stripe = if (x / 2 + y / 2) % 2 == 0 { 55.0 } else { -55.0 };
        for c in 0..3 {
            let noise = rng.random_range(-35.0..35.0f32);
            p.0[c] = (tint[c] + stripe + noise).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Writes `n` images with masks (`fakes` of them manipulated, the rest real)
/// plus `manifest.jsonl` under `dir`. All samples are in the train split.
pub fn toy_dataset(dir: &Path, n: usize, fakes: usize, seed: u64) -> Result<DatasetManifest> {
    if fakes > n || n == 0 {
        return Err(invalid(format!("toy set of {n} images cannot hold {fakes} fakes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for i in 0..n {
        let mut img = background(&mut rng, TOY_SIZE);
        let fake = i < fakes;
        let mask = if fake {
            let m = region(&mut rng, TOY_SIZE);
            paint_texture(&mut img, &m, &mut rng);
            m
        } else {
            MaskGrid::zeros(TOY_SIZE as usize, TOY_SIZE as usize)
        };
        let name = format!("{i:02}.png");
        save_png(&image::DynamicImage::ImageRgb8(img), &dir.join("images").join(&name))?;
        mask.save(&dir.join("masks").join(&name))?;
        samples.push(Sample {
            image_path: Path::new("images").join(&name),
            mask_path: Some(Path::new("masks").join(&name)),
            label: if fake { Label::Fake } else { Label::Real },
            generator: "toy".into(),
            split: Split::Train,
        });
    }
    let manifest = DatasetManifest::new("toy", dir, samples);
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Source directories for an LDM-style build: `real/`, `generated/` (the
/// real image with every pixel perturbed, as a latent round trip would) and
/// `masks/`, matched by file name.
pub fn ldm_sources(dir: &Path, n: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let real = background(&mut rng, TOY_SIZE);
        let mut generated = real.clone();
        for p in generated.pixels_mut() {
            for c in &mut p.0 {
                *c = c.saturating_add_signed(rng.random_range(-6..=6));
            }
        }
        let mask = region(&mut rng, TOY_SIZE);
        paint_texture(&mut generated, &mask, &mut rng);
        let name = format!("{i:02}.png");
        save_png(&image::DynamicImage::ImageRgb8(real), &dir.join("real").join(&name))?;
        save_png(&image::DynamicImage::ImageRgb8(generated), &dir.join("generated").join(&name))?;
        mask.save(&dir.join("masks").join(&name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    #[test]
    fn toy_set_is_deterministic_and_valid() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        toy_dataset(a.path(), 3, 2, 5).unwrap();
        toy_dataset(b.path(), 3, 2, 5).unwrap();
        for f in ["images/00.png", "masks/01.png", "images/02.png", "manifest.jsonl"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let m = load_manifest(&a.path().join("manifest.jsonl"), Default::default()).unwrap();
        assert_eq!(m.fakes().count(), 2);
        let mask = m.load_sample_mask(&m.samples[0], (256, 256), Default::default()).unwrap();
        let frac = mask.area_fraction();
        assert!((25.0 / 256.0..=81.0 / 256.0).contains(&frac), "{frac}");
    }
}
