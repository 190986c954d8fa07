//! Metric functions against brute-force oracles on random small instances.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use locprobe::data::{DatasetManifest, Label, MaskGrid, PredictionMap, Sample, Split};
use locprobe::metrics::{average_precision, dataset_iou, iou, mask_iou, CrossGenMatrix};
use proptest::prelude::*;

fn oracle_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i]).collect();
    let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i]).collect();
    let union = p.union(&g).count();
    if union == 0 {
        1.0
    } else {
        p.intersection(&g).count() as f64 / union as f64
    }
}

/// Area under the step precision-recall curve, computed by walking a ranking
/// built with insertion sort (stable) and summing precision times recall gain.
fn oracle_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut ranked: Vec<usize> = Vec::new();
    for i in 0..scores.len() {
        let pos = ranked.iter().position(|&j| scores[j] < scores[i]).unwrap_or(ranked.len());
        ranked.insert(pos, i);
    }
    let total = labels.iter().filter(|&&l| l).count() as f64;
    let (mut tp, mut prev_recall, mut area) = (0.0, 0.0, 0.0);
    for (k, &i) in ranked.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
        }
        let precision = tp / (k + 1) as f64;
        let recall = tp / total;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

fn grid(h: usize, w: usize, bits: &[bool]) -> MaskGrid {
    MaskGrid::from_fn(h, w, |y, x| bits[y * w + x])
}

fn probs(h: usize, w: usize, p: &[f32]) -> PredictionMap {
    PredictionMap::new(h, w, p.to_vec()).unwrap()
}

prop_compose! {
    fn instance()(h in 1usize..7, w in 1usize..7)
        (p in prop::collection::vec(0.0f32..=1.0, h * w), g in prop::collection::vec(any::<bool>(), h * w), h in Just(h), w in Just(w))
        -> (usize, usize, Vec<f32>, Vec<bool>) { (h, w, p, g) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_matches_set_oracle((h, w, p, g) in instance(), t in 0.05f32..0.95) {
        let pred_bits: Vec<bool> = p.iter().map(|&v| v > t).collect();
        let got = iou(&probs(h, w, &p), &grid(h, w, &g), t).unwrap();
        prop_assert!((got - oracle_iou(&pred_bits, &g)).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_permutation_invariant((h, w, p, g) in instance(), seed in any::<u64>()) {
        let a = probs(h, w, &p).binarize(0.5);
        let b = grid(h, w, &g);
        prop_assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
        // the same pixel permutation applied to both grids
        let n = h * w;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed | 1;
        for i in (1..n).rev() {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            perm.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let pa = MaskGrid::from_fn(1, n, |_, x| a.values[perm[x]] != 0);
        let pb = MaskGrid::from_fn(1, n, |_, x| b.values[perm[x]] != 0);
        prop_assert!((mask_iou(&pa, &pb).unwrap() - mask_iou(&a, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn iou_ignores_rescaling_that_keeps_the_partition((h, w, p, g) in instance(), k in 0.1f32..1.0) {
        // x -> 0.5 + k (x - 0.5) keeps each value on its side of 0.5
        let q: Vec<f32> = p.iter().map(|&x| 0.5 + k * (x - 0.5)).collect();
        let gt = grid(h, w, &g);
        prop_assert_eq!(iou(&probs(h, w, &p), &gt, 0.5).unwrap(), iou(&probs(h, w, &q), &gt, 0.5).unwrap());
    }

    #[test]
    fn ap_matches_curve_oracle(pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        // coarse scores force ties
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let got = average_precision(&scores, &labels).unwrap();
        prop_assert!((got - oracle_ap(&scores, &labels)).abs() < 1e-12, "{} vs {}", got, oracle_ap(&scores, &labels));
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn ap_invariant_under_increasing_transforms(pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)) {
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let base = average_precision(&scores, &labels).unwrap();
        for f in [|x: f64| x.exp(), |x: f64| 3.0 * x - 7.0, |x: f64| x.powi(3), |x: f64| 1.0 / (1.0 + (-x).exp())] {
            let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert!((average_precision(&t, &labels).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_invariant_under_permutation_without_ties(pairs in prop::collection::vec((any::<u32>(), any::<bool>()), 2..30), rot in 0usize..30) {
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        let distinct: HashSet<u32> = pairs.iter().map(|p| p.0).collect();
        prop_assume!(distinct.len() == pairs.len());
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rot % pairs.len());
        shuffled.reverse();
        let ap = |v: &[(u32, bool)]| average_precision(&v.iter().map(|p| p.0 as f64).collect::<Vec<_>>(), &v.iter().map(|p| p.1).collect::<Vec<_>>()).unwrap();
        prop_assert!((ap(&pairs) - ap(&shuffled)).abs() < 1e-12);
    }

    #[test]
    fn id_ood_matches_loops_and_ignores_relabeling(g in 2usize..6, vals in prop::collection::vec(0.0f64..100.0, 36), seed in any::<u64>()) {
        let values: Vec<Vec<f64>> = (0..g).map(|i| vals[i * 6..i * 6 + g].to_vec()).collect();
        let names: Vec<String> = (0..g).map(|i| format!("g{i}")).collect();
        let m = CrossGenMatrix::new(names.clone(), values.clone()).unwrap();
        let s = m.aggregate_id_ood().unwrap();
        let (mut d, mut o, mut no) = (0.0, 0.0, 0);
        for i in 0..g { for j in 0..g { if i == j { d += values[i][j] } else { o += values[i][j]; no += 1 } } }
        prop_assert!((s.id_iou - d / g as f64).abs() < 1e-9);
        prop_assert!((s.ood_iou - o / no as f64).abs() < 1e-9);
        // P M P^T
        let mut perm: Vec<usize> = (0..g).collect();
        perm.rotate_left((seed % g as u64) as usize);
        if seed & 1 == 1 { perm.reverse(); }
        let pv: Vec<Vec<f64>> = (0..g).map(|i| (0..g).map(|j| values[perm[i]][perm[j]]).collect()).collect();
        let pn: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
        let ps = CrossGenMatrix::new(pn, pv).unwrap().aggregate_id_ood().unwrap();
        prop_assert!((ps.id_iou - s.id_iou).abs() < 1e-9 && (ps.ood_iou - s.ood_iou).abs() < 1e-9);
    }

    #[test]
    fn matrix_csv_round_trips(g in 1usize..5, vals in prop::collection::vec(0.0f64..100.0, 16)) {
        let values: Vec<Vec<f64>> = (0..g).map(|i| vals[i * 4..i * 4 + g].to_vec()).collect();
        let m = CrossGenMatrix::new((0..g).map(|i| format!("gen-{i}")).collect(), values).unwrap();
        prop_assert_eq!(CrossGenMatrix::from_csv(&m.to_csv().unwrap()).unwrap(), m);
    }
}

fn manifest_with_masks(dir: &std::path::Path, masks: &[MaskGrid], labels: &[Label]) -> DatasetManifest {
    let mut samples = Vec::new();
    for (i, (m, &label)) in masks.iter().zip(labels).enumerate() {
        let rel = PathBuf::from(format!("m{i}.png"));
        m.save(&dir.join(&rel)).unwrap();
        samples.push(Sample {
            image_path: PathBuf::from(format!("i{i}.png")),
            mask_path: Some(rel),
            label,
            generator: "g".into(),
            split: Split::Test,
        });
    }
    DatasetManifest::new("t", dir, samples)
}

#[test]
fn dataset_iou_matches_mean_of_oracles_on_random_sets() {
    let dir = tempfile::tempdir().unwrap();
    let state = std::cell::Cell::new(0x2545_f491_4f6c_dd1du64);
    let next = || {
        let mut s = state.get();
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        state.set(s);
        s
    };
    for case in 0..120 {
        let sub = dir.path().join(case.to_string());
        std::fs::create_dir_all(&sub).unwrap();
        let n = 1 + (next() % 5) as usize;
        let (h, w) = (1 + (next() % 6) as usize, 1 + (next() % 6) as usize);
        let labels: Vec<Label> = (0..n).map(|i| if i == 0 || next() % 3 != 0 { Label::Fake } else { Label::Real }).collect();
        let masks: Vec<MaskGrid> = labels.iter().map(|l| MaskGrid::from_fn(h, w, |_, _| *l == Label::Fake && next() % 2 == 0)).collect();
        let manifest = manifest_with_masks(&sub, &masks, &labels);
        let mut preds = BTreeMap::new();
        let mut expected = Vec::new();
        for s in &manifest.samples {
            let p: Vec<f32> = (0..h * w).map(|_| (next() % 1000) as f32 / 999.0).collect();
            if s.label == Label::Fake {
                let idx: usize = s.image_path.to_string_lossy()[1..].trim_end_matches(".png").parse().unwrap();
                let gt: Vec<bool> = masks[idx].values.iter().map(|&v| v != 0).collect();
                expected.push(oracle_iou(&p.iter().map(|&v| v > 0.5).collect::<Vec<_>>(), &gt));
            }
            preds.insert(s.image_path.clone(), probs(h, w, &p));
        }
        let got = dataset_iou(&preds, &manifest, 0.5, Default::default()).unwrap();
        let want = 100.0 * expected.iter().sum::<f64>() / expected.len() as f64;
        assert!((got.mean_iou - want).abs() < 1e-9, "case {case}: {} vs {want}", got.mean_iou);
        assert_eq!(got.per_image.len(), expected.len());
    }
}

#[test]
fn all_ones_predictor_gives_mean_mask_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let masks: Vec<MaskGrid> = (0..5).map(|k| MaskGrid::from_fn(8, 8, |y, x| y * 8 + x < 6 + 11 * k)).collect();
    let manifest = manifest_with_masks(dir.path(), &masks, &[Label::Fake; 5]);
    let preds: BTreeMap<_, _> = manifest.samples.iter().map(|s| (s.image_path.clone(), PredictionMap::constant(8, 8, 1.0))).collect();
    let got = dataset_iou(&preds, &manifest, 0.5, Default::default()).unwrap().mean_iou;
    let want = 100.0 * masks.iter().map(|m| m.positives() as f64 / 64.0).sum::<f64>() / 5.0;
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn missing_prediction_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = manifest_with_masks(dir.path(), &[MaskGrid::zeros(2, 2)], &[Label::Fake]);
    let err = dataset_iou(&BTreeMap::new(), &manifest, 0.5, Default::default()).unwrap_err();
    assert!(err.is_validation());
}
