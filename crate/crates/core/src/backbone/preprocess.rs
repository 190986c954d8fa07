use image::{imageops::FilterType, DynamicImage, RgbImage};

use crate::error::{Result, ValidationError};

pub const INPUT_SIZE: usize = 224;

/// Per-channel normalization constants published with the CLIP image encoders.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// Normalized `3 x 224 x 224` encoder input (channel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub size: usize,
    pub data: Vec<f32>,
}

/// Resize the short side to 224 (bicubic), center-crop, then normalize each
/// channel with the CLIP mean/std.
pub fn preprocess(img: &DynamicImage) -> Result<ImageTensor> {
    if !img.color().has_color() {
        return Err(ValidationError::NotRgb.into());
    }
    Ok(preprocess_rgb(&img.to_rgb8()))
}

pub fn preprocess_rgb(rgb: &RgbImage) -> ImageTensor {
    let s = INPUT_SIZE as u32;
    let (w, h) = rgb.dimensions();
    let resized = if (w, h) == (s, s) {
        rgb.clone()
    } else {
        let scale = s as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(s);
        let nh = ((h as f64 * scale).round() as u32).max(s);
        let r = image::imageops::resize(rgb, nw, nh, FilterType::CatmullRom);
        image::imageops::crop_imm(&r, (nw - s) / 2, (nh - s) / 2, s, s).to_image()
    };
    let plane = INPUT_SIZE * INPUT_SIZE;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
        }
    }
    ImageTensor { size: INPUT_SIZE, data }
}
