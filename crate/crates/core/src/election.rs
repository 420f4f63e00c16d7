//! Dominant-modality election: which single scan of a selected sample is
//! sent for annotation.
//!
//! The current model's full multi-channel prediction serves as the
//! pseudo-label. Each modality is then fed alone (all other z-scored
//! channels set to zero, i.e. their mean) and scored by Dice against the
//! pseudo-label; the best-agreeing modality wins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{extract_features, FeatureMap, SegModel};
use crate::volume::{LabelMask, MultiModalSample};

/// Foreground Dice `2|A n B| / (|A| + |B|)` over labels `!= 0`. Two empty
/// masks score 1, exactly one empty mask scores 0.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("dice of {} and {} masks", a.dims(), b.dims())));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (fx, fy) = (x != 0, y != 0);
        na += usize::from(fx);
        nb += usize::from(fy);
        both += usize::from(fx && fy);
    }
    Ok(match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (na + nb) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectionResult {
    pub sample_id: usize,
    /// Dice of each single-modality prediction against the pseudo-label.
    pub dice: Vec<f64>,
    pub winner: usize,
    /// The pseudo-label was empty; the winner defaulted to modality 0.
    pub degenerate: bool,
    /// Dice of each single-modality prediction against the ground truth,
    /// recorded for analysis only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truth_dice: Vec<f64>,
}

/// Index of the maximal value, ties to the lowest index.
fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Election on precomputed full features. When `truth` is given, the
/// per-modality Dice against it is recorded as well.
pub fn elect_dominant_features(
    model: &SegModel,
    sample_id: usize,
    features: &FeatureMap,
    truth: Option<&LabelMask>,
) -> Result<ElectionResult> {
    let pseudo = model.predict_mask_features(features)?;
    let mut scores = Vec::with_capacity(features.modalities());
    let mut truth_dice = Vec::new();
    for l in 0..features.modalities() {
        let solo = model.predict_mask_features(&features.keep_only_modality(l))?;
        scores.push(dice(&solo, &pseudo)?);
        if let Some(t) = truth {
            truth_dice.push(dice(&solo, t)?);
        }
    }
    let degenerate = pseudo.foreground_count() == 0;
    let winner = if degenerate { 0 } else { argmax_lowest(&scores) };
    Ok(ElectionResult {
        sample_id,
        dice: scores,
        winner,
        degenerate,
        truth_dice,
    })
}

pub fn elect_dominant(model: &SegModel, x: &MultiModalSample) -> Result<ElectionResult> {
    if x.modality_count() != model.modalities() {
        return Err(Error::shape(format!(
            "model expects {} modalities, sample {} has {}",
            model.modalities(),
            x.id,
            x.modality_count()
        )));
    }
    elect_dominant_features(model, x.id, &extract_features(x), None)
}
