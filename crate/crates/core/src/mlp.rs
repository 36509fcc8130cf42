//! Three-layer perceptron regressing region saliency from S-3CNN features.
//!
//! `h1 = tanh(W1ᵀx + b1)`, `h2 = tanh(W2ᵀh1 + b2)`, `score = σ(wᵀh2 + b)`.
//! The second hidden activation `h2` is the deep contrast feature (DCF).

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{s3cnn_extract, WindowEncoder};
use crate::container::{self, Reader};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, RasterImage, SaliencyMap};
use crate::segmentation::{Segmentation, SegmentationStack};

pub const HIDDEN: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub final_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    /// `input_dim x h1`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `h1 x h2`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_out: Array1<f64>,
    pub b_out: f64,
    pub seed: u64,
    pub schedule: Option<LrSchedule>,
}

/// Activations of the second hidden layer; each value lies in (-1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct DeepContrastFeature(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub features: Vec<f64>,
    pub label: f64,
    pub weight: f64,
}

impl TrainingSample {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        TrainingSample {
            features,
            label,
            weight: 1.0,
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-a..=a))
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl MlpModel {
    /// Glorot-uniform weights (`a = sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub fn seeded(input_dim: usize, h1: usize, h2: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = glorot(&mut rng, input_dim, h1);
        let w2 = glorot(&mut rng, h1, h2);
        let w_out = glorot(&mut rng, h2, 1).remove_axis(Axis(1));
        MlpModel {
            w1,
            b1: Array1::zeros(h1),
            w2,
            b2: Array1::zeros(h2),
            w_out,
            b_out: 0.0,
            seed,
            schedule: None,
        }
    }

    pub fn zeros(input_dim: usize, h1: usize, h2: usize) -> Self {
        MlpModel {
            w1: Array2::zeros((input_dim, h1)),
            b1: Array1::zeros(h1),
            w2: Array2::zeros((h1, h2)),
            b2: Array1::zeros(h2),
            w_out: Array1::zeros(h2),
            b_out: 0.0,
            seed: 0,
            schedule: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> (usize, usize) {
        (self.w1.ncols(), self.w2.ncols())
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w_out.len() + 1
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::len_mismatch("mlp input", self.input_dim(), len));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(f64, DeepContrastFeature)> {
        self.check_input(x.len())?;
        let x = ArrayView1::from(x);
        let h1 = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w2) + &self.b2).mapv(f64::tanh);
        let score = sigmoid(h2.dot(&self.w_out) + self.b_out);
        Ok((score, DeepContrastFeature(h2.to_vec())))
    }

    /// Row-wise forward pass over an `n x input_dim` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_input(x.ncols())?;
        let cache = self.activations(x);
        Ok((cache.score, cache.h2))
    }

    fn activations(&self, x: ArrayView2<f64>) -> Activations {
        let h1 = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w2) + &self.b2).mapv(f64::tanh);
        let score = (h2.dot(&self.w_out) + self.b_out).mapv(sigmoid);
        Activations { h1, h2, score }
    }

    /// Gradient of `Σ_i c_i (score_i - y_i)²` for the rows of `x`.
    fn gradient(&self, x: ArrayView2<f64>, y: ArrayView1<f64>, c: ArrayView1<f64>) -> Gradient {
        let act = self.activations(x);
        let s = &act.score;
        let d3: Array1<f64> = ndarray::Zip::from(s)
            .and(y)
            .and(c)
            .map_collect(|&s, &y, &c| 2.0 * c * (s - y) * s * (1.0 - s));
        let g_w_out = act.h2.t().dot(&d3);
        let g_b_out = d3.sum();
        let mut d2 = d3.view().insert_axis(Axis(1)).dot(&self.w_out.view().insert_axis(Axis(0)));
        d2.zip_mut_with(&act.h2, |d, &h| *d *= 1.0 - h * h);
        let g_w2 = act.h1.t().dot(&d2);
        let g_b2 = d2.sum_axis(Axis(0));
        let mut d1 = d2.dot(&self.w2.t());
        d1.zip_mut_with(&act.h1, |d, &h| *d *= 1.0 - h * h);
        let g_w1 = x.t().dot(&d1);
        let g_b1 = d1.sum_axis(Axis(0));
        Gradient {
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
            w_out: g_w_out,
            b_out: g_b_out,
        }
    }

    /// Parameters flattened as `W1, b1, W2, b2, w, b` (row-major matrices).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.w_out.iter());
        out.push(self.b_out);
        out
    }

    pub fn from_flat(input_dim: usize, h1: usize, h2: usize, flat: &[f64]) -> Result<Self> {
        let mut m = MlpModel::zeros(input_dim, h1, h2);
        if flat.len() != m.num_params() {
            return Err(Error::len_mismatch("mlp weights", m.num_params(), flat.len()));
        }
        m.set_flat(flat);
        Ok(m)
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w_out.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        self.b_out = it.next().expect("length checked");
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (h1, h2) = self.hidden();
        let header = MlpHeader {
            d: self.input_dim() / 3,
            input_dim: self.input_dim(),
            h1,
            h2,
            seed: self.seed,
            lr_schedule: self.schedule.clone(),
        };
        let mut payload = Vec::new();
        container::push_f64s(&mut payload, &self.flat_params());
        container::encode(MLP_MAGIC, &header, &payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = container::read_file(path)?;
        let (header, payload): (MlpHeader, _) = container::decode(path, MLP_MAGIC, &bytes)?;
        let mut model = MlpModel::zeros(header.input_dim, header.h1, header.h2);
        let mut reader = Reader::new(path, payload);
        let flat = reader.f64s(model.num_params())?;
        reader.finish()?;
        model.set_flat(&flat);
        model.seed = header.seed;
        model.schedule = header.lr_schedule;
        Ok(model)
    }
}

const MLP_MAGIC: &[u8; 4] = b"SMLP";

#[derive(Serialize, Deserialize)]
struct MlpHeader {
    #[serde(rename = "D")]
    d: usize,
    input_dim: usize,
    #[serde(rename = "H1")]
    h1: usize,
    #[serde(rename = "H2")]
    h2: usize,
    seed: u64,
    lr_schedule: Option<LrSchedule>,
}

struct Activations {
    h1: Array2<f64>,
    h2: Array2<f64>,
    score: Array1<f64>,
}

struct Gradient {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w_out: Array1<f64>,
    b_out: f64,
}

impl Gradient {
    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.w_out.iter());
        out.push(self.b_out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: (usize, usize),
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr: 0.2,
            momentum: 0.5,
            epochs: 100,
            batch_size: 64,
            hidden: (HIDDEN, HIDDEN),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Full-dataset loss of the initial weights.
    pub initial_loss: f64,
    /// Full-dataset loss after each epoch (after any rollback).
    pub epoch_losses: Vec<f64>,
    pub final_lr: f64,
    /// Epochs whose update raised the loss and were rolled back.
    pub rejected_epochs: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

struct Dataset {
    x: Array2<f64>,
    y: Array1<f64>,
    c: Array1<f64>,
}

impl Dataset {
    fn new(samples: &[TrainingSample]) -> Result<Self> {
        let dim = samples[0].features.len();
        let mut x = Array2::zeros((samples.len(), dim));
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::len_mismatch("training sample", dim, s.features.len()));
            }
            if s.label != 0.0 && s.label != 1.0 {
                return Err(Error::InvalidArgument(format!("label {} is not binary", s.label)));
            }
            x.row_mut(i).assign(&ArrayView1::from(&s.features[..]));
        }
        let total_weight: f64 = samples.iter().map(|s| s.weight).sum();
        if !(total_weight > 0.0) {
            return Err(Error::InvalidArgument("sample weights must sum to > 0".into()));
        }
        Ok(Dataset {
            x,
            y: samples.iter().map(|s| s.label).collect(),
            c: samples.iter().map(|s| s.weight / total_weight).collect(),
        })
    }

    /// Weighted mean of squared errors.
    fn loss(&self, model: &MlpModel) -> f64 {
        let mut total = 0.0;
        let chunk = 4096;
        for start in (0..self.x.nrows()).step_by(chunk) {
            let end = (start + chunk).min(self.x.nrows());
            let rows = self.x.slice(ndarray::s![start..end, ..]);
            let act = model.activations(rows);
            for (i, s) in act.score.iter().enumerate() {
                let e = s - self.y[start + i];
                total += self.c[start + i] * e * e;
            }
        }
        total
    }
}

/// Minibatch SGD with classical momentum on the weighted mean squared error.
///
/// After every epoch the full-dataset loss is evaluated; an epoch that
/// raises it is rolled back, its velocity discarded, and the learning rate
/// halved. The recorded loss sequence is therefore non-increasing.
pub fn mlp_train(samples: &[TrainingSample], params: &TrainParams) -> Result<(MlpModel, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::Empty("mlp training set".into()));
    }
    if params.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let positives = samples.iter().filter(|s| s.label == 1.0).count();
    if positives == 0 || positives == samples.len() {
        log::warn!("mlp training set has a single class ({} samples)", samples.len());
    }
    let data = Dataset::new(samples)?;
    let dim = data.x.ncols();
    let mut model = MlpModel::seeded(dim, params.hidden.0, params.hidden.1, params.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(params.seed);
    shuffle_rng.set_stream(1);

    let initial_loss = data.loss(&model);
    let mut report = TrainReport {
        initial_loss,
        epoch_losses: Vec::with_capacity(params.epochs),
        final_lr: params.lr,
        rejected_epochs: 0,
    };
    let mut lr = params.lr;
    let mut current_loss = initial_loss;
    let mut velocity = vec![0.0; model.num_params()];
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..params.epochs {
        let snapshot = model.flat_params();
        let snapshot_velocity = velocity.clone();
        order.shuffle(&mut shuffle_rng);
        let mut flat = snapshot.clone();
        for batch in order.chunks(params.batch_size) {
            let xb = data.x.select(Axis(0), batch);
            let yb = data.y.select(Axis(0), batch);
            // Per-batch weighted mean: renormalize the batch's weights.
            let cb_raw = data.c.select(Axis(0), batch);
            let cb = &cb_raw / cb_raw.sum();
            let grad = model.gradient(xb.view(), yb.view(), cb.view()).flat();
            for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = params.momentum * *v - lr * g;
                *p += *v;
            }
            model.set_flat(&flat);
        }
        let loss = data.loss(&model);
        if loss > current_loss || !loss.is_finite() {
            model.set_flat(&snapshot);
            velocity = snapshot_velocity.iter().map(|_| 0.0).collect();
            lr *= 0.5;
            report.rejected_epochs += 1;
            log::debug!("epoch {epoch}: loss rose to {loss:.6}, rolled back; lr -> {lr}");
        } else {
            current_loss = loss;
        }
        log::info!("epoch {epoch}: loss {current_loss:.6} (lr {lr})");
        report.epoch_losses.push(current_loss);
    }
    report.final_lr = lr;
    model.schedule = Some(LrSchedule {
        lr: params.lr,
        momentum: params.momentum,
        epochs: params.epochs,
        batch_size: params.batch_size,
        final_lr: lr,
    });
    Ok((model, report))
}

/// Analytic gradient of `(score - label)²` for one sample, in
/// [`MlpModel::flat_params`] order.
pub fn sample_gradient(model: &MlpModel, sample: &TrainingSample) -> Result<Vec<f64>> {
    model.check_input(sample.features.len())?;
    let x = ArrayView2::from_shape((1, sample.features.len()), &sample.features[..])
        .expect("row vector");
    let y = Array1::from_elem(1, sample.label);
    let c = Array1::from_elem(1, 1.0);
    Ok(model.gradient(x, y.view(), c.view()).flat())
}

/// Largest relative gap between the analytic gradient of `(score - label)²`
/// and central finite differences with step `step`, over every parameter.
/// Entries whose absolute gap is at most `1e-8` count as exact.
pub fn gradient_check(model: &MlpModel, sample: &TrainingSample, step: f64) -> Result<f64> {
    let analytic = sample_gradient(model, sample)?;
    let loss_at = |m: &MlpModel| {
        let (s, _) = m.forward(&sample.features).expect("checked");
        (s - sample.label).powi(2)
    };
    let mut probe = model.clone();
    let mut flat = model.flat_params();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + step;
        probe.set_flat(&flat);
        let up = loss_at(&probe);
        flat[i] = orig - step;
        probe.set_flat(&flat);
        let down = loss_at(&probe);
        flat[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let gap = (analytic[i] - numeric).abs();
        if gap > 1e-8 {
            worst = worst.max(gap / analytic[i].abs().max(numeric.abs()));
        }
    }
    Ok(worst)
}

/// Regions whose ground-truth purity reaches `purity`, labeled 1 (salient)
/// or 0. Purity is compared exactly on integer pixel counts.
pub fn select_samples(seg: &Segmentation, gt: &BinaryMask, purity: f64) -> Result<Vec<(usize, f64)>> {
    if !gt.same_size(seg.width(), seg.height()) {
        return Err(Error::size_mismatch(
            "ground truth vs segmentation",
            (seg.width(), seg.height()),
            (gt.width(), gt.height()),
        ));
    }
    if !(purity > 0.5 && purity <= 1.0) {
        return Err(Error::InvalidArgument(format!("purity {purity} outside (0.5, 1]")));
    }
    const SCALE: u64 = 1_000_000;
    let need = (purity * SCALE as f64).round() as u64;
    let gv = gt.values();
    Ok(seg
        .regions()
        .iter()
        .enumerate()
        .filter_map(|(r, region)| {
            let area = region.area() as u64;
            let salient = region.pixels.iter().filter(|&&p| gv[p as usize]).count() as u64;
            if salient * SCALE >= need * area {
                Some((r, 1.0))
            } else if (area - salient) * SCALE >= need * area {
                Some((r, 0.0))
            } else {
                None
            }
        })
        .collect())
}

/// Paints each region's score onto its pixels.
pub fn region_map(seg: &Segmentation, scores: &[f64]) -> Result<SaliencyMap> {
    if scores.len() != seg.num_regions() {
        return Err(Error::len_mismatch("region scores", seg.num_regions(), scores.len()));
    }
    let values = seg.labels().iter().map(|&l| scores[l as usize]).collect();
    SaliencyMap::from_clamped(seg.width(), seg.height(), values)
}

#[derive(Clone, Debug)]
pub struct LevelScores {
    pub scores: Vec<f64>,
    pub dcf: Vec<DeepContrastFeature>,
    pub map: SaliencyMap,
}

/// Runs the model on every region of every level.
pub fn score_regions<E: WindowEncoder + ?Sized>(
    img: &RasterImage,
    stack: &SegmentationStack,
    encoder: &E,
    model: &MlpModel,
) -> Result<Vec<LevelScores>> {
    stack
        .levels
        .iter()
        .map(|seg| {
            let mut scores = Vec::with_capacity(seg.num_regions());
            let mut dcf = Vec::with_capacity(seg.num_regions());
            for r in 0..seg.num_regions() {
                let x = s3cnn_extract(img, seg, r, encoder)?;
                let (s, d) = model.forward(x.as_slice())?;
                scores.push(s);
                dcf.push(d);
            }
            let map = region_map(seg, &scores)?;
            Ok(LevelScores { scores, dcf, map })
        })
        .collect()
}
