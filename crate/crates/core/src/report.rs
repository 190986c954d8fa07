//! Figures: cross-generator heatmaps and prediction overlays.

use std::fmt::Write as _;
use std::path::Path;

use image::{imageops::FilterType, Rgb, RgbImage};

use crate::data::{write_atomic, PredictionMap};
use crate::error::Result;
use crate::metrics::CrossGenMatrix;

const CELL: usize = 72;
const LEFT: usize = 130;
const TOP: usize = 90;
const BAR_HEIGHT: usize = 26;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Light yellow at 0 to dark blue at 100.
fn cell_color(v: f64) -> (u8, u8, u8) {
    let t = (v / 100.0).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(255.0, 8.0), lerp(247.0, 48.0), lerp(188.0, 107.0))
}

/// Renders the matrix as an annotated heatmap (rows: train generator,
/// columns: test generator) with an ID/OOD bar summary underneath. Every
/// cell carries a `<text class="cell">` with its value to one decimal.
pub fn heatmap_svg(m: &CrossGenMatrix, title: &str) -> String {
    let g = m.size();
    let grid = g * CELL;
    let bars_top = TOP + grid + 50;
    let summary = m.aggregate_id_ood().ok();
    let bar_rows = if summary.is_some() { 2 } else { 1 };
    let width = LEFT + grid.max(300) + 40;
    let height = bars_top + bar_rows * (BAR_HEIGHT + 10) + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#, width / 2, escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="50" font-size="12" text-anchor="middle">test generator</text>"#, LEFT + grid / 2);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {y})">train generator</text>"#,
        y = TOP + grid / 2
    );
    for (j, name) in m.generators.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text class="col-label" x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
            LEFT + j * CELL + CELL / 2,
            TOP - 10,
            escape(name)
        );
    }
    for (i, (name, row)) in m.generators.iter().zip(&m.values).enumerate() {
        let y = TOP + i * CELL;
        let _ = writeln!(
            s,
            r#"<text class="row-label" x="{}" y="{}" font-size="12" text-anchor="end">{}</text>"#,
            LEFT - 8,
            y + CELL / 2 + 4,
            escape(name)
        );
        for (j, &v) in row.iter().enumerate() {
            let x = LEFT + j * CELL;
            let (r, gr, b) = cell_color(v);
            let ink = if v > 50.0 { "white" } else { "black" };
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({r},{gr},{b})" stroke="white"/>"#);
            let _ = writeln!(
                s,
                r#"<text class="cell" data-row="{i}" data-col="{j}" x="{}" y="{}" font-size="14" text-anchor="middle" fill="{ink}">{v:.1}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 5
            );
        }
    }
    let id_only = m.values.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / g as f64;
    let bars: Vec<(&str, f64)> = match summary {
        Some(sm) => vec![("ID", sm.id_iou), ("OOD", sm.ood_iou)],
        None => vec![("ID", id_only)],
    };
    let span = grid.max(300) as f64;
    for (k, (label, v)) in bars.iter().enumerate() {
        let y = bars_top + k * (BAR_HEIGHT + 10);
        let len = (span * v / 100.0).round();
        let fill = if k == 0 { "#08306b" } else { "#fd8d3c" };
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{label}</text>"#, LEFT - 8, y + BAR_HEIGHT / 2 + 4);
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{y}" width="{len}" height="{BAR_HEIGHT}" fill="{fill}"/>"#);
        let _ = writeln!(
            s,
            r#"<text class="bar" data-kind="{label}" x="{}" y="{}" font-size="12">{v:.1}</text>"#,
            LEFT as f64 + len + 6.0,
            y + BAR_HEIGHT / 2 + 4
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_heatmap(m: &CrossGenMatrix, title: &str, path: &Path) -> Result<()> {
    write_atomic(path, heatmap_svg(m, title).as_bytes())
}

/// Overlay of a thresholded prediction on the input, at the prediction's
/// resolution. Outside the predicted region the input is shown as dimmed
/// grayscale (all channels below 128); inside it is tinted red (red channel
/// at least 128), and the region's boundary pixels are pure red. Counting
/// pixels with red >= 128 therefore recovers the binarized positive count.
pub fn overlay(input: &RgbImage, pred: &PredictionMap, threshold: f32) -> RgbImage {
    let (w, h) = (pred.width as u32, pred.height as u32);
    let base = if input.dimensions() == (w, h) { input.clone() } else { image::imageops::resize(input, w, h, FilterType::Triangle) };
    let mask = pred.binarize(threshold);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && mask.get(y as usize, x as usize);
    RgbImage::from_fn(w, h, |x, y| {
        let Rgb([r, g, b]) = *base.get_pixel(x, y);
        let (xi, yi) = (x as i64, y as i64);
        if !inside(xi, yi) {
            let luma = (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32).round() as u8;
            let d = luma / 2;
            return Rgb([d, d, d]);
        }
        let edge = [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| !inside(xi + dx, yi + dy));
        if edge {
            Rgb([255, 0, 0])
        } else {
            Rgb([128 + r / 2, g / 2, b / 2])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_figure() {
        let m = CrossGenMatrix::new(vec!["lama".into()], vec![vec![42.25]]).unwrap();
        let svg = heatmap_svg(&m, "one");
        assert_eq!(svg.matches(r#"class="cell""#).count(), 1);
        assert!(svg.contains(">42.2<") || svg.contains(">42.3<"));
        assert_eq!(svg.matches(r#"class="bar""#).count(), 1);
    }

    #[test]
    fn names_are_escaped() {
        let m = CrossGenMatrix::new(vec!["a<b".into(), "c&d".into()], vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let svg = heatmap_svg(&m, "t");
        assert!(svg.contains("a&lt;b") && svg.contains("c&amp;d"));
        assert_eq!(svg.matches(r#"class="bar""#).count(), 2);
    }

    #[test]
    fn overlay_marks_exactly_the_positive_region() {
        let input = RgbImage::from_fn(8, 8, |x, y| Rgb([255, (x * 30) as u8, (y * 30) as u8]));
        let pred = PredictionMap::new(8, 8, (0..64).map(|i| if (i % 8) < 3 && i / 8 > 2 { 0.9 } else { 0.2 }).collect()).unwrap();
        let img = overlay(&input, &pred, 0.5);
        let red = img.pixels().filter(|p| p.0[0] >= 128).count();
        assert_eq!(red, pred.binarize(0.5).positives());
        assert!(img.pixels().filter(|p| p.0 == [255, 0, 0]).count() > 0);
    }
}
