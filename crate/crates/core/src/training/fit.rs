//! Epoch loop over precomputed feature grids.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::pixel_bce_loss;
use super::schedule::{PlateauScheduler, ScheduleEvent};
use super::TrainConfig;
use crate::backbone::features::FeatureGrid;
use crate::data::{sigmoid, write_atomic, PredictionMap};
use crate::decoder::Decoder;
use crate::error::{dim_mismatch, Error, Result, ValidationError};
use crate::nn::{ParamStore, Real, Tensor4};

/// Adam with bias correction; moments live alongside the parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let step = T::lit(lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t)));
        let eps_hat = eps * T::lit((1.0 - self.beta2.powi(self.t)).sqrt());
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps_hat);
            }
        }
    }
}

/// Decoder inputs with their full-resolution targets (row-major, 0 or 1).
#[derive(Clone, Debug, Default)]
pub struct FeatureSet {
    pub features: Vec<FeatureGrid>,
    pub targets: Vec<Vec<f32>>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor4<f32>, Vec<f32>)> {
        let grids: Vec<&FeatureGrid> = idx.iter().map(|&i| &self.features[i]).collect();
        let x = crate::backbone::features::to_tensor(&grids)?;
        let y = idx.iter().flat_map(|&i| self.targets[i].iter().copied()).collect();
        Ok((x, y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when training ran without a validation set.
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LearningRateFloor,
    EpochCap,
    Observer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

impl History {
    /// CSV with columns `epoch,train_loss,val_loss,lr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
                r.lr.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into_error() })?;
        write_atomic(path, &bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Mean pixel BCE of the decoder in inference mode.
pub fn evaluate_loss(decoder: &Decoder<f32>, set: &FeatureSet, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = set.batch(chunk)?;
        let z = decoder.forward(&x)?;
        let (loss, _) = pixel_bce_loss(&z, &y)?;
        total += loss * y.len() as f64;
        pixels += y.len();
    }
    Ok(total / pixels.max(1) as f64)
}

/// Probability maps for each grid, in inference mode.
pub fn predict(decoder: &Decoder<f32>, grids: &[FeatureGrid], batch_size: usize) -> Result<Vec<PredictionMap>> {
    let (oh, ow) = decoder.spec().output_size();
    let mut out = Vec::with_capacity(grids.len());
    for chunk in grids.chunks(batch_size.max(1)) {
        let refs: Vec<&FeatureGrid> = chunk.iter().collect();
        let z = decoder.forward(&crate::backbone::features::to_tensor(&refs)?)?;
        for i in 0..z.n {
            out.push(PredictionMap::from_logits(oh, ow, z.item(i)));
        }
    }
    Ok(out)
}

fn check_set(decoder: &Decoder<f32>, set: &FeatureSet, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(ValidationError::EmptyManifest(what.into()).into());
    }
    let (oh, ow) = decoder.spec().output_size();
    if set.targets.len() != set.features.len() || set.targets.iter().any(|t| t.len() != oh * ow) {
        return Err(dim_mismatch(format!("{what} targets must be {oh}x{ow} per sample")));
    }
    Ok(())
}

/// Trains `decoder` in place. The monitored loss is the validation loss when
/// a validation set is given, otherwise the training loss. `observer` runs
/// after every epoch and may end training early.
pub fn fit(
    decoder: &mut Decoder<f32>,
    train: &FeatureSet,
    val: Option<&FeatureSet>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord, &Decoder<f32>) -> Control,
) -> Result<History> {
    cfg.validate()?;
    check_set(decoder, train, "training set")?;
    if let Some(v) = val {
        check_set(decoder, v, "validation set")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scheduler = PlateauScheduler::new(cfg.schedule());
    let mut adam = Adam::new(decoder.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut stop_reason = StopReason::EpochCap;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = scheduler.lr();
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(chunk)?;
            decoder.params_mut().zero_grad();
            let (z, tape) = decoder.forward_train(&x)?;
            let (loss, dz) = pixel_bce_loss(&z, &y)?;
            if !loss.is_finite() || !dz.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            decoder.backward(tape, &dz);
            adam.step(decoder.params_mut(), lr);
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = val.map(|v| evaluate_loss(decoder, v, cfg.batch_size)).transpose()?;
        let record = EpochRecord { epoch, train_loss, val_loss, lr };
        let val = val_loss.map_or("-".to_string(), |v| format!("{v:.5}"));
        log::info!("epoch {epoch:>3}  train {train_loss:.5}  val {val}  lr {lr:e}");
        let event = scheduler.step(val_loss.unwrap_or(train_loss));
        let control = observer(&record, decoder);
        records.push(record);
        if event == ScheduleEvent::Stop {
            stop_reason = StopReason::LearningRateFloor;
            break;
        }
        if control == Control::Stop {
            stop_reason = StopReason::Observer;
            break;
        }
    }
    Ok(History { records, stop_reason })
}

/// Logistic regression on fixed-length vectors, for image-level detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weight: Vec<f32>,
    pub bias: f32,
}

impl LinearProbe {
    pub fn logit(&self, x: &[f32]) -> f32 {
        self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + self.bias
    }

    pub fn score(&self, x: &[f32]) -> f32 {
        sigmoid(self.logit(x))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Trains a [`LinearProbe`] with image-level BCE, mini-batch Adam and the
/// same plateau schedule as the decoders (monitoring training loss).
pub fn train_linear_probe(features: &[Vec<f32>], labels: &[bool], cfg: &TrainConfig) -> Result<(LinearProbe, History)> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(ValidationError::EmptyManifest("probe training set".into()).into());
    }
    if features.len() != labels.len() {
        return Err(dim_mismatch("one label per feature vector"));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(ValidationError::DegenerateLabels.into());
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(dim_mismatch("probe features differ in length"));
    }
    let mut store = ParamStore::<f32>::new();
    let w = store.add("weight", vec![dim], vec![0.0; dim]);
    let b = store.add("bias", vec![1], vec![0.0]);
    let mut adam = Adam::new(&store);
    let mut scheduler = PlateauScheduler::new(cfg.schedule());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut records = Vec::new();
    let mut stop_reason = StopReason::EpochCap;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = scheduler.lr();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            store.zero_grad();
            let n = chunk.len() as f64;
            for &i in chunk {
                let probe = LinearProbe { weight: store.value(w).to_vec(), bias: store.value(b)[0] };
                let z = probe.logit(&features[i]) as f64;
                let y = f64::from(u8::from(labels[i]));
                total += super::loss::bce_with_logits(z, y);
                let g = ((1.0 / (1.0 + (-z).exp()) - y) / n) as f32;
                for (gw, &x) in store.grad_mut(w).iter_mut().zip(&features[i]) {
                    *gw += g * x;
                }
                store.grad_mut(b)[0] += g;
            }
            adam.step(&mut store, lr);
        }
        let train_loss = total / features.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        records.push(EpochRecord { epoch, train_loss, val_loss: None, lr });
        if scheduler.step(train_loss) == ScheduleEvent::Stop {
            stop_reason = StopReason::LearningRateFloor;
            break;
        }
    }
    let probe = LinearProbe { weight: store.value(w).to_vec(), bias: store.value(b)[0] };
    Ok((probe, History { records, stop_reason }))
}
