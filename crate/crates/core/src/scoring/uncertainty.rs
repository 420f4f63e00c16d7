use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMask, ProbabilityMap};

/// Per-voxel predictive entropy normalized by `ln C`, so every value lies
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    dims: Dims,
    values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Normalized entropy of one class distribution, with `0 ln 0 = 0`.
#[inline]
pub fn normalized_entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| -q * q.ln())
        .sum();
    h / (p.len() as f64).ln()
}

pub fn entropy_map(p: &ProbabilityMap) -> Result<UncertaintyMap> {
    if p.classes() < 2 {
        return Err(Error::config("entropy needs at least two classes"));
    }
    Ok(UncertaintyMap {
        dims: p.dims(),
        values: p.voxels().map(normalized_entropy).collect(),
    })
}

/// Mean voxel-wise uncertainty `mu`.
pub fn uncertainty_score(u: &UncertaintyMap) -> f64 {
    if u.values.is_empty() {
        return 0.0;
    }
    u.values.iter().sum::<f64>() / u.values.len() as f64
}

/// Number of voxels predicted as any non-background class.
pub fn abundance(mask: &LabelMask) -> usize {
    mask.foreground_count()
}

/// `zeta = mu * foreground count`.
pub fn informativeness(mu: f64, foreground: usize) -> f64 {
    mu * foreground as f64
}

/// `s = zeta * gamma`.
pub fn criterion(zeta: f64, gamma: f64) -> f64 {
    zeta * gamma
}

/// Id with the largest score; ties go to the lowest id.
pub fn select_best(scores: &[(usize, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(id, s) in scores {
        best = match best {
            None => Some((id, s)),
            Some((bid, bs)) if s > bs || (s == bs && id < bid) => Some((id, s)),
            keep => keep,
        };
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| Error::precondition("cannot select from an empty pool"))
}
