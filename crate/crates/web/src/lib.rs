//! Browser demo. Three operations, each a plain function over byte and float
//! buffers so it can be tested natively, plus thin `wasm_bindgen` wrappers.
//!
//! Images cross the boundary as RGBA bytes in row-major order, which is what
//! `CanvasRenderingContext2D.getImageData` hands out.

use image::{Rgb, RgbImage};
use locprobe::data::{MaskGrid, PredictionMap};
use locprobe::dataset::composite::composite_images;
use locprobe::decoder::{count_parameters, DecoderArch, DecoderSpec};
use locprobe::metrics::iou;
use locprobe::report::overlay;
use locprobe::training::{PlateauScheduler, ScheduleConfig, ScheduleEvent};
use wasm_bindgen::prelude::*;

fn rgb_from_rgba(rgba: &[u8], width: u32, height: u32) -> Result<RgbImage, String> {
    let n = width as usize * height as usize;
    if rgba.len() != 4 * n {
        return Err(format!("expected {} RGBA bytes for {width}x{height}, got {}", 4 * n, rgba.len()));
    }
    Ok(RgbImage::from_fn(width, height, |x, y| {
        let i = 4 * (y as usize * width as usize + x as usize);
        Rgb([rgba[i], rgba[i + 1], rgba[i + 2]])
    }))
}

fn rgba_from_rgb(img: &RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect()
}

/// A pixel counts as masked when its red channel is at least 128.
fn mask_from_rgba(rgba: &[u8], width: u32, height: u32) -> Result<MaskGrid, String> {
    let (w, h) = (width as usize, height as usize);
    if rgba.len() != 4 * w * h {
        return Err(format!("mask has {} bytes, expected {}", rgba.len(), 4 * w * h));
    }
    Ok(MaskGrid::from_fn(h, w, |y, x| rgba[4 * (y * w + x)] >= 128))
}

/// Paste `inside` into `outside` wherever the mask is set.
pub fn composite_rgba(inside: &[u8], outside: &[u8], mask: &[u8], width: u32, height: u32) -> Result<Vec<u8>, String> {
    let a = rgb_from_rgba(inside, width, height)?;
    let b = rgb_from_rgba(outside, width, height)?;
    let m = mask_from_rgba(mask, width, height)?;
    let out = composite_images(&a, &b, &m).map_err(|e| e.to_string())?;
    Ok(rgba_from_rgb(&out))
}

/// IoU (percent) of `prob > threshold` against a 0/1 ground truth.
pub fn threshold_iou(prob: &[f32], truth: &[u8], width: u32, height: u32, threshold: f32) -> Result<f64, String> {
    let (w, h) = (width as usize, height as usize);
    if truth.len() != w * h {
        return Err(format!("ground truth has {} entries, expected {}", truth.len(), w * h));
    }
    let pred = PredictionMap::new(h, w, prob.to_vec()).map_err(|e| e.to_string())?;
    let gt = MaskGrid::from_fn(h, w, |y, x| truth[y * w + x] != 0);
    iou(&pred, &gt, threshold).map(|v| 100.0 * v).map_err(|e| e.to_string())
}

/// IoU at `steps` evenly spaced thresholds in [0, 1).
pub fn iou_curve(prob: &[f32], truth: &[u8], width: u32, height: u32, steps: usize) -> Result<Vec<f64>, String> {
    (0..steps).map(|i| threshold_iou(prob, truth, width, height, i as f32 / steps as f32)).collect()
}

/// Overlay of the binarized prediction on an image, returned as RGBA.
pub fn overlay_rgba(rgba: &[u8], prob: &[f32], width: u32, height: u32, threshold: f32) -> Result<Vec<u8>, String> {
    let img = rgb_from_rgba(rgba, width, height)?;
    let pred = PredictionMap::new(height as usize, width as usize, prob.to_vec()).map_err(|e| e.to_string())?;
    Ok(rgba_from_rgb(&overlay(&img, &pred, threshold)))
}

/// Trainable parameter count of a decoder such as `conv-20` or `linear`.
pub fn decoder_parameters(arch: &str, input_dim: usize, grid: usize) -> Result<usize, String> {
    let arch: DecoderArch = arch.parse().map_err(|e: locprobe::ValidationError| e.to_string())?;
    let spec = DecoderSpec::new(arch, input_dim, (grid, grid)).map_err(|e| e.to_string())?;
    Ok(count_parameters(&spec))
}

/// Learning rate in effect after each monitored loss. The trajectory ends
/// with a negative entry if the schedule asked to stop.
pub fn lr_trajectory(losses: &[f64]) -> Vec<f64> {
    let mut s = PlateauScheduler::new(ScheduleConfig::default());
    let mut out = Vec::with_capacity(losses.len());
    for &l in losses {
        let ev = s.step(l);
        out.push(s.lr());
        if ev == ScheduleEvent::Stop {
            out.push(-1.0);
            break;
        }
    }
    out
}

#[wasm_bindgen]
pub fn composite(inside: &[u8], outside: &[u8], mask: &[u8], width: u32, height: u32) -> Result<Vec<u8>, JsError> {
    composite_rgba(inside, outside, mask, width, height).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = thresholdIou)]
pub fn threshold_iou_js(prob: &[f32], truth: &[u8], width: u32, height: u32, threshold: f32) -> Result<f64, JsError> {
    threshold_iou(prob, truth, width, height, threshold).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = iouCurve)]
pub fn iou_curve_js(prob: &[f32], truth: &[u8], width: u32, height: u32, steps: usize) -> Result<Vec<f64>, JsError> {
    iou_curve(prob, truth, width, height, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = overlay)]
pub fn overlay_js(rgba: &[u8], prob: &[f32], width: u32, height: u32, threshold: f32) -> Result<Vec<u8>, JsError> {
    overlay_rgba(rgba, prob, width, height, threshold).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = decoderParameters)]
pub fn decoder_parameters_js(arch: &str, input_dim: usize, grid: usize) -> Result<f64, JsError> {
    decoder_parameters(arch, input_dim, grid).map(|n| n as f64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lrTrajectory)]
pub fn lr_trajectory_js(losses: &[f64]) -> Vec<f64> {
    lr_trajectory(losses)
}
