//! Evaluation metrics and the experiment-level comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::election::dice;
use crate::error::{Error, Result};
use crate::model::{FeatureMap, SegModel};
use crate::volume::LabelMask;

/// Mean IoU over the foreground classes present in either mask. When no
/// foreground class is present at all the score is 1, mirroring Dice.
pub fn miou(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("IoU of {} and {} masks", a.dims(), b.dims())));
    }
    let classes = usize::from(a.max_label().max(b.max_label())) + 1;
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (x, y) = (usize::from(x), usize::from(y));
        if x == y {
            inter[x] += 1;
            union[x] += 1;
        } else {
            union[x] += 1;
            union[y] += 1;
        }
    }
    let ious: Vec<f64> = (1..classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dice_pct: f64,
    pub miou_pct: f64,
    pub per_sample_dice: Vec<f64>,
}

/// Predicted masks scored against ground truth; means are reported in percent.
pub fn score_masks(pred: &[LabelMask], truth: &[LabelMask]) -> Result<EvalResult> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::precondition("evaluation needs matching, non-empty mask lists"));
    }
    let mut per_sample_dice = Vec::with_capacity(pred.len());
    let mut iou_sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        per_sample_dice.push(dice(p, t)?);
        iou_sum += miou(p, t)?;
    }
    let n = pred.len() as f64;
    Ok(EvalResult {
        dice_pct: 100.0 * per_sample_dice.iter().sum::<f64>() / n,
        miou_pct: 100.0 * iou_sum / n,
        per_sample_dice,
    })
}

pub fn evaluate_features(
    model: &SegModel,
    features: &[&FeatureMap],
    truths: &[&LabelMask],
) -> Result<EvalResult> {
    let preds = features
        .iter()
        .map(|f| model.predict_mask_features(f))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<LabelMask> = truths.iter().map(|&t| t.clone()).collect();
    score_masks(&preds, &truths)
}

pub fn evaluate(model: &SegModel, eval: &crate::phantom::Dataset) -> Result<EvalResult> {
    let preds = eval
        .samples
        .iter()
        .map(|x| model.predict_mask(x))
        .collect::<Result<Vec<_>>>()?;
    score_masks(&preds, &eval.truths)
}

/// Final result of one arm under one seed, the unit of aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: String,
    pub seed: u64,
    pub dice_pct: f64,
    pub miou_pct: f64,
    pub labeled_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub n_seeds: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub labeled_count: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const ARM_ORDER: [&str; 6] = ["lower", "upper", "ours", "random", "oneoff", "entropy"];

fn arm_rank(arm: &str) -> (usize, String) {
    (
        ARM_ORDER.iter().position(|a| *a == arm).unwrap_or(ARM_ORDER.len()),
        arm.to_string(),
    )
}

/// One row per arm: bounds first, then strategies.
pub fn aggregate(outcomes: &[ArmOutcome]) -> Result<Vec<ComparisonRow>> {
    if outcomes.is_empty() {
        return Err(Error::precondition("nothing to aggregate"));
    }
    let mut groups: BTreeMap<(usize, String), Vec<&ArmOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups.entry(arm_rank(&o.arm)).or_default().push(o);
    }
    Ok(groups
        .into_iter()
        .map(|((_, arm), rows)| {
            let dice: Vec<f64> = rows.iter().map(|r| r.dice_pct).collect();
            let iou: Vec<f64> = rows.iter().map(|r| r.miou_pct).collect();
            let (dice_mean, dice_std) = mean_std(&dice);
            let (miou_mean, miou_std) = mean_std(&iou);
            ComparisonRow {
                strategy: arm,
                n_seeds: rows.len(),
                dice_mean,
                dice_std,
                miou_mean,
                miou_std,
                labeled_count: rows.iter().map(|r| r.labeled_count).max().unwrap_or(0),
            }
        })
        .collect())
}

/// Mean Dice difference `ours - oneoff`, when both arms are present.
pub fn sequential_gain(rows: &[ComparisonRow]) -> Option<f64> {
    let find = |s: &str| rows.iter().find(|r| r.strategy == s).map(|r| r.dice_mean);
    Some(find("ours")? - find("oneoff")?)
}

pub const COMPARISON_HEADER: &str =
    "strategy,n_seeds,dice_mean,dice_std,miou_mean,miou_std,labeled_count";

/// CSV with the fixed schema; a `seq_minus_oneoff` column is appended
/// (filled on the `ours` row) whenever both arms exist.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let gain = sequential_gain(rows);
    let mut out = String::from(COMPARISON_HEADER);
    if gain.is_some() {
        out.push_str(",seq_minus_oneoff");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{}",
            r.strategy, r.n_seeds, r.dice_mean, r.dice_std, r.miou_mean, r.miou_std, r.labeled_count
        );
        if let Some(g) = gain {
            out.push(',');
            if r.strategy == "ours" {
                let _ = write!(out, "{g:.4}");
            }
        }
        out.push('\n');
    }
    out
}

/// Aligned plain-text rendering of the same table.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let gain = sequential_gain(rows);
    let mut out = format!(
        "{:<10} {:>7} {:>16} {:>16} {:>8}",
        "strategy", "seeds", "Dice (%)", "mIoU (%)", "|L|"
    );
    if gain.is_some() {
        out.push_str(&format!(" {:>10}", "seq-1off"));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{:<10} {:>7} {:>9.2} ± {:<5.2} {:>9.2} ± {:<5.2} {:>8}",
            r.strategy, r.n_seeds, r.dice_mean, r.dice_std, r.miou_mean, r.miou_std, r.labeled_count
        );
        if let Some(g) = gain {
            if r.strategy == "ours" {
                let _ = write!(out, " {g:>+10.2}");
            }
        }
        out.push('\n');
    }
    out
}
