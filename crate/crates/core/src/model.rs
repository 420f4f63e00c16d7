//! Multi-channel voxel classifier.
//!
//! Every modality is z-scored and contributes four features per voxel (raw
//! intensity, 3x3x3 box mean, 3x3x3 box standard deviation, central-difference
//! gradient magnitude); a constant bias feature closes the vector. A linear
//! softmax layer over all channels jointly is trained by plain SGD on the
//! mean cross-entropy of sampled voxel batches, with poly learning-rate decay.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::volume::{box_mean, zscore_values, Dims, LabelMask, MultiModalSample, ProbabilityMap};

pub const FEATURES_PER_MODALITY: usize = 4;

pub const fn feature_dim(modalities: usize) -> usize {
    FEATURES_PER_MODALITY * modalities + 1
}

/// Per-voxel feature vectors, `dim` consecutive values per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: Dims,
    modalities: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn dim(&self) -> usize {
        feature_dim(self.modalities)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.len()
    }

    pub fn voxel(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.data[k * d..(k + 1) * d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim())
    }

    /// Features of the input with every channel except `l` replaced by its
    /// z-scored mean (zero). A zero channel has all four features zero, so
    /// this only clears columns.
    pub fn keep_only_modality(&self, l: usize) -> FeatureMap {
        let d = self.dim();
        let keep = l * FEATURES_PER_MODALITY..(l + 1) * FEATURES_PER_MODALITY;
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(d) {
            for (j, v) in row[..d - 1].iter_mut().enumerate() {
                if !keep.contains(&j) {
                    *v = 0.0;
                }
            }
        }
        FeatureMap {
            dims: self.dims,
            modalities: self.modalities,
            data,
        }
    }
}

fn channel_features(z: &[f64], dims: Dims) -> [Vec<f64>; 4] {
    let mean = box_mean(z, dims, 1);
    let sq: Vec<f64> = z.iter().map(|v| v * v).collect();
    let mean_sq = box_mean(&sq, dims, 1);
    let std = mean
        .iter()
        .zip(&mean_sq)
        .map(|(m, s)| (s - m * m).max(0.0).sqrt())
        .collect();
    let mut grad = vec![0.0; z.len()];
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    for zi in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let at = |x: usize, y: usize, zz: usize| z[dims.index(x, y, zz)];
                let gx = (at((x + 1).min(nx - 1), y, zi) - at(x.saturating_sub(1), y, zi)) / 2.0;
                let gy = (at(x, (y + 1).min(ny - 1), zi) - at(x, y.saturating_sub(1), zi)) / 2.0;
                let gz = (at(x, y, (zi + 1).min(nz - 1)) - at(x, y, zi.saturating_sub(1))) / 2.0;
                grad[dims.index(x, y, zi)] = (gx * gx + gy * gy + gz * gz).sqrt();
            }
        }
    }
    [z.to_vec(), mean, std, grad]
}

/// Features of all modalities. With `keep = Some(l)`, every other z-scored
/// channel is replaced by zeros before featurization.
pub fn extract_features_masked(x: &MultiModalSample, keep: Option<usize>) -> FeatureMap {
    let dims = x.dims();
    let m = x.modality_count();
    let d = feature_dim(m);
    let mut data = vec![0.0; dims.len() * d];
    for (l, vol) in x.modalities().iter().enumerate() {
        if keep.is_some_and(|k| k != l) {
            continue;
        }
        let feats = channel_features(&zscore_values(vol), dims);
        for (f, values) in feats.iter().enumerate() {
            let col = l * FEATURES_PER_MODALITY + f;
            for (k, v) in values.iter().enumerate() {
                data[k * d + col] = *v;
            }
        }
    }
    for row in data.chunks_exact_mut(d) {
        row[d - 1] = 1.0;
    }
    FeatureMap {
        dims,
        modalities: m,
        data,
    }
}

pub fn extract_features(x: &MultiModalSample) -> FeatureMap {
    extract_features_masked(x, None)
}

/// Linear softmax classifier; `weights` is `classes x feature_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    modalities: usize,
    classes: usize,
    weights: Vec<f64>,
}

impl SegModel {
    pub fn zeros(modalities: usize, classes: usize) -> Self {
        Self {
            modalities,
            classes,
            weights: vec![0.0; classes * feature_dim(modalities)],
        }
    }

    pub fn from_weights(modalities: usize, classes: usize, weights: Vec<f64>) -> Result<Self> {
        if modalities == 0 || classes < 2 {
            return Err(Error::config("a model needs >= 1 modality and >= 2 classes"));
        }
        if weights.len() != classes * feature_dim(modalities) {
            return Err(Error::shape(format!(
                "{} weights for {classes} classes x {} features",
                weights.len(),
                feature_dim(modalities)
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidValue("non-finite model weight".into()));
        }
        Ok(Self {
            modalities,
            classes,
            weights,
        })
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.modalities)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// SHA-256 of the little-endian weight bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_features(&self, f: &FeatureMap) -> Result<()> {
        if f.modalities != self.modalities {
            return Err(Error::shape(format!(
                "model expects {} modalities, input has {}",
                self.modalities, f.modalities
            )));
        }
        Ok(())
    }

    fn check_sample(&self, x: &MultiModalSample) -> Result<()> {
        if x.modality_count() != self.modalities {
            return Err(Error::shape(format!(
                "model expects {} modalities, sample {} has {}",
                self.modalities,
                x.id,
                x.modality_count()
            )));
        }
        Ok(())
    }

    /// Softmax of the logits of one feature vector, written into `out`.
    #[inline]
    pub fn voxel_proba(&self, features: &[f64], out: &mut [f64]) {
        let d = features.len();
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * d..(c + 1) * d];
            *o = row.iter().zip(features).map(|(w, f)| w * f).sum();
        }
        softmax_in_place(out);
    }

    pub fn predict_proba_features(&self, f: &FeatureMap) -> Result<ProbabilityMap> {
        self.check_features(f)?;
        let c = self.classes;
        let mut probs = vec![0.0; f.voxel_count() * c];
        for (row, out) in f.rows().zip(probs.chunks_exact_mut(c)) {
            self.voxel_proba(row, out);
        }
        ProbabilityMap::new(f.dims, c, probs)
    }

    /// Argmax of [`Self::voxel_proba`] per voxel, ties to the lowest class.
    pub fn predict_mask_features(&self, f: &FeatureMap) -> Result<LabelMask> {
        self.check_features(f)?;
        let mut buf = vec![0.0; self.classes];
        let labels = f
            .rows()
            .map(|row| {
                self.voxel_proba(row, &mut buf);
                crate::volume::argmax_first(&buf) as u16
            })
            .collect();
        LabelMask::new(f.dims, labels)
    }

    pub fn predict_proba(&self, x: &MultiModalSample) -> Result<ProbabilityMap> {
        self.check_sample(x)?;
        self.predict_proba_features(&extract_features(x))
    }

    pub fn predict_mask(&self, x: &MultiModalSample) -> Result<LabelMask> {
        self.check_sample(x)?;
        self.predict_mask_features(&extract_features(x))
    }
}

#[inline]
fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Mean cross-entropy of a voxel batch and its gradient with respect to the
/// weights (same layout as [`SegModel::weights`]).
pub fn cross_entropy_grad(
    weights: &[f64],
    classes: usize,
    batch: &[&[f64]],
    labels: &[u16],
) -> (f64, Vec<f64>) {
    assert_eq!(batch.len(), labels.len());
    let d = weights.len() / classes;
    let mut grad = vec![0.0; weights.len()];
    let mut loss = 0.0;
    let mut p = vec![0.0; classes];
    for (f, &y) in batch.iter().zip(labels) {
        for (c, pc) in p.iter_mut().enumerate() {
            *pc = weights[c * d..(c + 1) * d]
                .iter()
                .zip(f.iter())
                .map(|(w, x)| w * x)
                .sum();
        }
        // log-sum-exp for a stable loss
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + p.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - p[usize::from(y)];
        for (c, pc) in p.iter_mut().enumerate() {
            let prob = (*pc - lse).exp();
            let delta = prob - if c == usize::from(y) { 1.0 } else { 0.0 };
            for (g, x) in grad[c * d..(c + 1) * d].iter_mut().zip(f.iter()) {
                *g += delta * x;
            }
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Total epochs `T` of the schedule.
    pub total_epochs: usize,
    pub poly_power: f64,
    pub batch_voxels: usize,
    /// Equal draws per class present in the labeled voxels.
    pub balance: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.5,
            total_epochs: 200,
            poly_power: 0.9,
            batch_voxels: 512,
            balance: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0 must be positive"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total epochs must be at least 1"));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(Error::config("poly_power must be finite and >= 0"));
        }
        if self.batch_voxels < classes {
            return Err(Error::config(format!(
                "batch_voxels {} is smaller than the class count {classes}",
                self.batch_voxels
            )));
        }
        Ok(())
    }

    /// Poly schedule `lr0 * (1 - t/T)^power`.
    pub fn lr(&self, t: usize) -> f64 {
        let frac = 1.0 - t as f64 / self.total_epochs as f64;
        self.lr0 * frac.max(0.0).powf(self.poly_power)
    }
}

/// Labeled voxels ready for batch sampling.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet<'a> {
    features: Vec<&'a FeatureMap>,
    /// `(sample, voxel)` pairs per class.
    by_class: Vec<Vec<(u32, u32)>>,
    total: usize,
}

impl<'a> TrainingSet<'a> {
    pub fn new(classes: usize) -> Self {
        Self {
            features: Vec::new(),
            by_class: vec![Vec::new(); classes],
            total: 0,
        }
    }

    pub fn push(&mut self, features: &'a FeatureMap, mask: &LabelMask) -> Result<()> {
        if features.dims() != mask.dims() {
            return Err(Error::shape("features and mask dims differ"));
        }
        mask.check_classes(self.by_class.len())?;
        let s = self.features.len() as u32;
        for (k, &l) in mask.labels().iter().enumerate() {
            self.by_class[usize::from(l)].push((s, k as u32));
        }
        self.total += mask.labels().len();
        self.features.push(features);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    fn draw<R: Rng>(&self, rng: &mut R, batch: usize, balance: bool) -> (Vec<&'a [f64]>, Vec<u16>) {
        let mut feats = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        let mut take = |c: usize, idx: (u32, u32)| {
            feats.push(self.features[idx.0 as usize].voxel(idx.1 as usize));
            labels.push(c as u16);
        };
        if balance {
            let present: Vec<usize> = (0..self.by_class.len())
                .filter(|&c| !self.by_class[c].is_empty())
                .collect();
            let per = batch / present.len();
            let extra = batch % present.len();
            for (i, &c) in present.iter().enumerate() {
                let pool = &self.by_class[c];
                for _ in 0..per + usize::from(i < extra) {
                    take(c, pool[rng.random_range(0..pool.len())]);
                }
            }
        } else {
            for _ in 0..batch {
                let mut r = rng.random_range(0..self.total);
                for (c, pool) in self.by_class.iter().enumerate() {
                    if r < pool.len() {
                        take(c, pool[r]);
                        break;
                    }
                    r -= pool.len();
                }
            }
        }
        (feats, labels)
    }
}

/// Runs epochs `t_start .. t_start + n_epochs`, one SGD step per epoch on a
/// batch drawn from sub-stream `t` of `cfg.seed`. Returns the batch loss of
/// each epoch, measured before its step.
pub fn train_epochs_on(
    model: &mut SegModel,
    set: &TrainingSet<'_>,
    cfg: &TrainConfig,
    t_start: usize,
    n_epochs: usize,
) -> Result<Vec<f64>> {
    cfg.validate(model.classes)?;
    if set.is_empty() {
        return Err(Error::precondition("cannot train on an empty labeled set"));
    }
    if set.by_class.len() != model.classes {
        return Err(Error::shape("training set class count differs from the model"));
    }
    if let Some(f) = set.features.first() {
        model.check_features(f)?;
    }
    if t_start + n_epochs > cfg.total_epochs {
        return Err(Error::precondition(format!(
            "epochs {t_start}..{} exceed the schedule length {}",
            t_start + n_epochs,
            cfg.total_epochs
        )));
    }
    let mut losses = Vec::with_capacity(n_epochs);
    for t in t_start..t_start + n_epochs {
        let mut rng = substream(cfg.seed, t as u64);
        let (batch, labels) = set.draw(&mut rng, cfg.batch_voxels, cfg.balance);
        let (loss, grad) = cross_entropy_grad(&model.weights, model.classes, &batch, &labels);
        if !loss.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite loss at epoch {t}")));
        }
        let lr = cfg.lr(t);
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Convenience wrapper that featurizes `labeled` and trains a copy of `model`.
pub fn train_epochs(
    model: &SegModel,
    labeled: &[(&MultiModalSample, &LabelMask)],
    cfg: &TrainConfig,
    t_start: usize,
    n_epochs: usize,
) -> Result<(SegModel, Vec<f64>)> {
    if labeled.is_empty() {
        return Err(Error::precondition("cannot train on an empty labeled set"));
    }
    let feats = labeled
        .iter()
        .map(|(x, _)| {
            model.check_sample(x)?;
            Ok(extract_features(x))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = TrainingSet::new(model.classes);
    for (f, (_, m)) in feats.iter().zip(labeled) {
        set.push(f, m)?;
    }
    let mut out = model.clone();
    let losses = train_epochs_on(&mut out, &set, cfg, t_start, n_epochs)?;
    Ok((out, losses))
}

// ---------------------------------------------------------------------------
// checkpoint: "ASEG", version u8, 3 reserved zero bytes, M, C, feature_dim as
// u32 LE, then f64 LE weights row-major.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASEG";
const CHECKPOINT_VERSION: u8 = 1;
const CHECKPOINT_HEADER: usize = 20;

pub fn model_to_bytes(model: &SegModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER + 8 * model.weights.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    for v in [model.modalities, model.classes, model.feature_dim()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for w in &model.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<SegModel> {
    let err = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(err(0, "missing ASEG magic"));
    }
    if bytes.len() < CHECKPOINT_HEADER {
        return Err(err(bytes.len(), "truncated header"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(err(4, "unsupported checkpoint version"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (m, c, d) = (word(0), word(1), word(2));
    if d != feature_dim(m) {
        return Err(err(16, "feature_dim does not match modality count"));
    }
    let expected = CHECKPOINT_HEADER + 8 * c * d;
    if bytes.len() != expected {
        return Err(err(bytes.len().min(expected), "weight payload has the wrong length"));
    }
    let weights = bytes[CHECKPOINT_HEADER..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    SegModel::from_weights(m, c, weights)
}

pub fn save_model(path: impl AsRef<Path>, model: &SegModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SegModel> {
    let path = path.as_ref();
    model_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
