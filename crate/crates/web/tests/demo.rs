use locprobe_web::{composite_rgba, decoder_parameters, iou_curve, lr_trajectory, overlay_rgba, threshold_iou};

fn rgba(w: usize, h: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Vec<u8> {
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .flat_map(|(x, y)| {
            let [r, g, b] = f(x, y);
            [r, g, b, 255]
        })
        .collect()
}

#[test]
fn composite_takes_masked_pixels_from_inside() {
    let a = rgba(6, 4, |_, _| [10, 20, 30]);
    let b = rgba(6, 4, |x, y| [x as u8, y as u8, 7]);
    let m = rgba(6, 4, |x, _| if x < 2 { [255, 0, 0] } else { [0, 0, 0] });
    let out = composite_rgba(&a, &b, &m, 6, 4).unwrap();
    for y in 0..4 {
        for x in 0..6 {
            let i = 4 * (y * 6 + x);
            let want = if x < 2 { &a[i..i + 4] } else { &b[i..i + 4] };
            assert_eq!(&out[i..i + 4], want);
        }
    }
    assert!(composite_rgba(&a, &b, &m[..8], 6, 4).is_err());
}

#[test]
fn iou_follows_the_threshold() {
    // probabilities 0.0, 0.1 .. 0.9 in a 10x1 strip, truth on the top half
    let prob: Vec<f32> = (0..10).map(|i| i as f32 / 10.0).collect();
    let truth: Vec<u8> = (0..10).map(|i| u8::from(i >= 5)).collect();
    assert!((threshold_iou(&prob, &truth, 10, 1, 0.45).unwrap() - 100.0).abs() < 1e-9);
    // > 0.25 selects 0.3..0.9: 5 hits out of 7
    assert!((threshold_iou(&prob, &truth, 10, 1, 0.25).unwrap() - 500.0 / 7.0).abs() < 1e-9);
    let curve = iou_curve(&prob, &truth, 10, 1, 10).unwrap();
    assert_eq!(curve.len(), 10);
    assert!((curve[4] - 100.0).abs() < 1e-9);
    assert!(threshold_iou(&prob, &truth[..3], 10, 1, 0.5).is_err());
}

#[test]
fn overlay_marks_positives_in_red() {
    let img = rgba(8, 8, |_, _| [200, 200, 200]);
    let prob: Vec<f32> = (0..64).map(|i| if i % 8 < 4 { 0.9 } else { 0.1 }).collect();
    let out = overlay_rgba(&img, &prob, 8, 8, 0.5).unwrap();
    let red = out.chunks(4).filter(|p| p[0] >= 128).count();
    assert_eq!(red, 32);
}

#[test]
fn parameter_calculator_matches_closed_forms() {
    assert_eq!(decoder_parameters("linear", 1024, 16).unwrap(), 1025);
    let conv4 = decoder_parameters("conv-4", 1024, 16).unwrap() as f64;
    assert!((conv4 / 17.4e6 - 1.0).abs() < 0.01);
    assert!(decoder_parameters("conv-7", 1024, 16).is_err());
}

#[test]
fn trajectory_reduces_then_stops() {
    let lrs = lr_trajectory(&[1.0; 40]);
    assert_eq!(*lrs.last().unwrap(), -1.0);
    let distinct: Vec<f64> = lrs.iter().copied().filter(|&v| v > 0.0).fold(Vec::new(), |mut v, x| {
        if v.last() != Some(&x) {
            v.push(x);
        }
        v
    });
    assert_eq!(distinct.len(), 4);
    assert!((distinct[3] - 1e-6).abs() < 1e-15);
}
