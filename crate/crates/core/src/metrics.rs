//! Localization IoU, cross-generator matrices and image-level average precision.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, DatasetManifest, LoadOptions, MaskGrid, PredictionMap};
use crate::error::{dim_mismatch, invalid, Error, Result, ValidationError};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Intersection over union of two binary grids; 1.0 when both are empty.
pub fn mask_iou(a: &MaskGrid, b: &MaskGrid) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(dim_mismatch(format!("iou of {}x{} against {}x{}", a.height, a.width, b.height, b.width)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of the thresholded prediction (`p > threshold`) against `gt`.
pub fn iou(pred: &PredictionMap, gt: &MaskGrid, threshold: f32) -> Result<f64> {
    mask_iou(&pred.binarize(threshold), gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageIou {
    pub image_path: PathBuf,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIou {
    /// Mean per-image IoU, in percent.
    pub mean_iou: f64,
    pub per_image: Vec<ImageIou>,
}

/// Mean per-image IoU (percent) over the fake samples of `manifest`.
/// Ground truth is resized to each prediction's resolution with nearest
/// neighbor. Predictions are keyed by the sample's `image_path`.
pub fn dataset_iou(
    predictions: &BTreeMap<PathBuf, PredictionMap>,
    manifest: &DatasetManifest,
    threshold: f32,
    opts: LoadOptions,
) -> Result<DatasetIou> {
    let mut per_image = Vec::new();
    for s in manifest.fakes() {
        let pred = predictions.get(&s.image_path).ok_or_else(|| ValidationError::MissingPrediction(s.image_path.clone()))?;
        let gt = manifest.load_sample_mask(s, (pred.height, pred.width), opts)?;
        per_image.push(ImageIou { image_path: s.image_path.clone(), iou: iou(pred, &gt, threshold)? });
    }
    if per_image.is_empty() {
        return Err(ValidationError::EmptyManifest(format!("{} has no fake samples", manifest.name)).into());
    }
    let mean_iou = 100.0 * per_image.iter().map(|r| r.iou).sum::<f64>() / per_image.len() as f64;
    Ok(DatasetIou { mean_iou, per_image })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdOodSummary {
    pub id_iou: f64,
    pub ood_iou: f64,
}

/// Rows are training generators, columns test generators; entries in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossGenMatrix {
    pub generators: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CrossGenMatrix {
    pub fn new(generators: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let g = generators.len();
        if g == 0 || values.len() != g || values.iter().any(|r| r.len() != g) {
            return Err(dim_mismatch(format!("matrix must be {g}x{g} for {g} generators")));
        }
        if let Some(v) = values.iter().flatten().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(invalid(format!("matrix entry {v} outside [0, 100]")));
        }
        Ok(Self { generators, values })
    }

    pub fn size(&self) -> usize {
        self.generators.len()
    }

    /// Diagonal mean and off-diagonal mean.
    pub fn aggregate_id_ood(&self) -> Result<IdOodSummary> {
        let g = self.size();
        if g < 2 || self.values.iter().any(|r| r.len() != g) {
            return Err(invalid("ID/OOD aggregation needs a square matrix with at least 2 generators"));
        }
        let mut diag = 0.0;
        let mut off = 0.0;
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    diag += v;
                } else {
                    off += v;
                }
            }
        }
        Ok(IdOodSummary { id_iou: diag / g as f64, ood_iou: off / (g * (g - 1)) as f64 })
    }

    /// Header row `train\test,<gens>`, then one row per training generator.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["train\\test".to_string()];
        header.extend(self.generators.iter().cloned());
        w.write_record(&header)?;
        for (g, row) in self.generators.iter().zip(&self.values) {
            let mut rec = vec![g.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::from(ValidationError::MalformedCsv(m));
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(|e| bad(e.to_string()))?);
        }
        let header = rows.first().ok_or_else(|| bad("empty matrix file".into()))?;
        let generators: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        if generators.is_empty() || rows.len() != generators.len() + 1 {
            return Err(bad(format!("{} column tags but {} data rows", generators.len(), rows.len().saturating_sub(1))));
        }
        let mut values = Vec::new();
        for (i, row) in rows.iter().skip(1).enumerate() {
            if row.get(0).map(str::trim) != Some(generators[i].as_str()) {
                return Err(bad(format!("row {} tag does not match column {:?}", i + 1, generators[i])));
            }
            if row.len() != generators.len() + 1 {
                return Err(bad(format!("row {} has {} cells", i + 1, row.len())));
            }
            let vals = row
                .iter()
                .skip(1)
                .map(|c| c.trim().parse::<f64>().map_err(|_| bad(format!("row {}: {c:?} is not a number", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            values.push(vals);
        }
        CrossGenMatrix::new(generators, values).map_err(|e| bad(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(ValidationError::MissingFile(path.to_path_buf()).into());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Step-wise average precision: the mean of precision@k over the ranks k of
/// the positives, scores sorted descending with a stable sort (ties keep
/// input order).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(dim_mismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(ValidationError::DegenerateLabels.into());
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Produces one probability map per sample of a manifest, in sample order.
pub trait Predictor: Sync {
    fn predict(&self, manifest: &DatasetManifest) -> Result<Vec<PredictionMap>>;
}

/// Predicts the same probability everywhere; a baseline and test stub.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor {
    pub height: usize,
    pub width: usize,
    pub probability: f32,
}

impl Predictor for ConstantPredictor {
    fn predict(&self, manifest: &DatasetManifest) -> Result<Vec<PredictionMap>> {
        Ok(manifest.samples.iter().map(|_| PredictionMap::constant(self.height, self.width, self.probability)).collect())
    }
}

pub fn keyed_predictions(manifest: &DatasetManifest, maps: Vec<PredictionMap>) -> Result<BTreeMap<PathBuf, PredictionMap>> {
    if maps.len() != manifest.len() {
        return Err(dim_mismatch(format!("{} predictions for {} samples", maps.len(), manifest.len())));
    }
    Ok(manifest.samples.iter().map(|s| s.image_path.clone()).zip(maps).collect())
}

/// Evaluates predictor `i` (trained on generator `i`) on manifest `j` for all
/// pairs. Cells are computed in row-major order.
pub fn build_cross_matrix(
    generators: &[String],
    predictors: &[&dyn Predictor],
    manifests: &[DatasetManifest],
    threshold: f32,
    opts: LoadOptions,
) -> Result<CrossGenMatrix> {
    let g = generators.len();
    if predictors.len() != g || manifests.len() != g {
        return Err(invalid(format!(
            "{g} generators need {g} checkpoints and {g} manifests (got {} and {})",
            predictors.len(),
            manifests.len()
        )));
    }
    let mut values = vec![vec![0.0; g]; g];
    for (i, p) in predictors.iter().enumerate() {
        for (j, m) in manifests.iter().enumerate() {
            let preds = keyed_predictions(m, p.predict(m)?)?;
            values[i][j] = dataset_iou(&preds, m, threshold, opts)?.mean_iou;
        }
    }
    CrossGenMatrix::new(generators.to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basic_cases() {
        let gt = MaskGrid::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let same = PredictionMap::new(4, 4, gt.values.iter().map(|&v| f32::from(v)).collect()).unwrap();
        assert_eq!(iou(&same, &gt, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&PredictionMap::constant(4, 4, 0.0), &gt, 0.5).unwrap(), 0.0);
        assert_eq!(iou(&PredictionMap::constant(4, 4, 0.0), &MaskGrid::zeros(4, 4), 0.5).unwrap(), 1.0);
        assert!(iou(&PredictionMap::constant(3, 4, 0.0), &gt, 0.5).is_err());
    }

    #[test]
    fn six_versus_four_with_three_shared_is_three_sevenths() {
        let pred_cells = [0, 1, 2, 3, 4, 5];
        let gt_cells = [3, 4, 5, 15];
        let pred = PredictionMap::new(4, 4, (0..16).map(|i| if pred_cells.contains(&i) { 0.9 } else { 0.1 }).collect()).unwrap();
        let gt = MaskGrid::from_fn(4, 4, |y, x| gt_cells.contains(&(y * 4 + x)));
        assert!((iou(&pred, &gt, 0.5).unwrap() - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_is_strict() {
        let gt = MaskGrid::from_fn(1, 2, |_, x| x == 0);
        let pred = PredictionMap::new(1, 2, vec![0.5, 0.0]).unwrap();
        assert_eq!(iou(&pred, &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn matrix_aggregates() {
        let m = CrossGenMatrix::new(vec!["a".into(), "b".into()], vec![vec![100.0, 0.0], vec![0.0, 100.0]]).unwrap();
        assert_eq!(m.aggregate_id_ood().unwrap(), IdOodSummary { id_iou: 100.0, ood_iou: 0.0 });
        let one = CrossGenMatrix::new(vec!["a".into()], vec![vec![50.0]]).unwrap();
        assert!(one.aggregate_id_ood().is_err());
        assert!(CrossGenMatrix::new(vec!["a".into()], vec![vec![150.0]]).is_err());
    }

    #[test]
    fn published_style_summary() {
        // diagonal mean 67.9, off-diagonal mean 32.6
        let diag = [70.0, 65.8, 68.1, 67.7];
        let mut values = vec![vec![0.0; 4]; 4];
        let mut k = 0;
        for i in 0..4 {
            for j in 0..4 {
                values[i][j] = if i == j {
                    diag[i]
                } else {
                    k += 1;
                    32.6 + if k % 2 == 0 { 1.5 } else { -1.5 }
                };
            }
        }
        let m = CrossGenMatrix::new(["ldm", "p2", "lama", "pluralistic"].map(String::from).to_vec(), values).unwrap();
        let s = m.aggregate_id_ood().unwrap();
        assert!((s.id_iou - 67.9).abs() < 1e-9 && (s.ood_iou - 32.6).abs() < 1e-9, "{s:?}");
    }

    #[test]
    fn csv_round_trip_and_malformed_input() {
        let m = CrossGenMatrix::new(vec!["x".into(), "y".into()], vec![vec![12.5, 3.0], vec![0.25, 99.0]]).unwrap();
        assert_eq!(CrossGenMatrix::from_csv(&m.to_csv().unwrap()).unwrap(), m);
        for bad in ["", "t,x\nx,abc\n", "t,x,y\nx,1,2\n", "t,x\ny,1\n"] {
            assert!(CrossGenMatrix::from_csv(bad).unwrap_err().is_validation(), "{bad:?}");
        }
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        // positive ranked last of two: precision 1/2 at its rank
        assert_eq!(average_precision(&[0.1, 0.9], &[true, false]).unwrap(), 0.5);
        // ranks of positives 2 and 3 out of 5: (1/2 + 2/3) / 2
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.2, 0.1], &[false, true, true, false, false]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(average_precision(&[0.1, 0.2], &[true, true]).is_err());
    }
}
