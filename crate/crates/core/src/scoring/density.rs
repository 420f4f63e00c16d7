//! Sample-to-sample distances and the kernel density over the unlabeled pool.

use serde::{Deserialize, Serialize};

use super::pca::{fit_pca, project_sample, PcaBasis};
use super::wasserstein::{sliced_distance, sorted_slices};
use crate::error::{Error, Result};
use crate::volume::MultiModalSample;

/// How each modality scan is reduced before distances are taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub patch: usize,
    pub components: usize,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            components: 1,
        }
    }
}

/// One basis per modality, fit on the whole pool.
pub fn fit_bases(pool: &[MultiModalSample], cfg: ReductionConfig) -> Result<Vec<PcaBasis>> {
    let m = pool
        .first()
        .ok_or_else(|| Error::config("cannot fit bases on an empty pool"))?
        .modality_count();
    (0..m)
        .map(|l| fit_pca(pool, l, cfg.patch, cfg.components))
        .collect()
}

/// Per-modality sorted 1-D views of a sample's projected patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    per_modality: Vec<Vec<Vec<f64>>>,
}

pub fn signature(x: &MultiModalSample, bases: &[PcaBasis]) -> Result<Signature> {
    if x.modality_count() != bases.len() {
        return Err(Error::shape(format!(
            "sample {} has {} modalities, {} bases given",
            x.id,
            x.modality_count(),
            bases.len()
        )));
    }
    let per_modality = bases
        .iter()
        .map(|b| Ok(sorted_slices(&project_sample(b, x)?)))
        .collect::<Result<_>>()?;
    Ok(Signature { per_modality })
}

/// Modality-averaged W1 between two signatures.
pub fn signature_distance(a: &Signature, b: &Signature) -> Result<f64> {
    if a.per_modality.len() != b.per_modality.len() {
        return Err(Error::shape("signatures have different modality counts"));
    }
    let mut total = 0.0;
    for (x, y) in a.per_modality.iter().zip(&b.per_modality) {
        total += sliced_distance(x, y)?;
    }
    Ok(total / a.per_modality.len() as f64)
}

/// `omega(x_i, x_j)`: mean over modalities of the W1 distance between the
/// projected patch distributions.
pub fn pair_distance(xi: &MultiModalSample, xj: &MultiModalSample, bases: &[PcaBasis]) -> Result<f64> {
    signature_distance(&signature(xi, bases)?, &signature(xj, bases)?)
}

/// Symmetric matrix of pair distances over a fixed pool, with the kernel
/// scale `omega_d` stored alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDistanceMatrix {
    n: usize,
    values: Vec<f64>,
    threshold: f64,
}

impl PairDistanceMatrix {
    /// Builds the matrix and sets `omega_d` to the median off-diagonal entry.
    pub fn compute(pool: &[MultiModalSample], bases: &[PcaBasis]) -> Result<Self> {
        let sigs = pool
            .iter()
            .map(|x| signature(x, bases))
            .collect::<Result<Vec<_>>>()?;
        let n = sigs.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = signature_distance(&sigs[i], &sigs[j])?;
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        let mut m = Self {
            n,
            values,
            threshold: 1.0,
        };
        m.threshold = m.median_off_diagonal();
        Ok(m)
    }

    pub fn from_values(n: usize, values: Vec<f64>, threshold: f64) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape("distance matrix must be n x n"));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::InvalidValue("distance matrix diagonal must be zero".into()));
            }
            for j in 0..n {
                let (a, b) = (values[i * n + j], values[j * n + i]);
                if !(a >= 0.0) || (a - b).abs() > 1e-12 {
                    return Err(Error::InvalidValue(
                        "distance matrix must be symmetric and non-negative".into(),
                    ));
                }
            }
        }
        Ok(Self { n, values, threshold })
    }

    /// Median of the entries above the diagonal; `1.0` when there are none
    /// or all are zero (any positive scale gives the same kernel then).
    pub fn median_off_diagonal(&self) -> f64 {
        let mut upper: Vec<f64> = (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        if upper.is_empty() {
            return 1.0;
        }
        upper.sort_by(f64::total_cmp);
        let k = upper.len();
        let med = if k % 2 == 1 {
            upper[k / 2]
        } else {
            (upper[k / 2 - 1] + upper[k / 2]) / 2.0
        };
        if med > 0.0 {
            med
        } else {
            1.0
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

/// `gamma_i = sum over j in U, j != i of exp(-(omega_ij / omega_d)^2)`.
pub fn density(i: usize, unlabeled: &[usize], d: &PairDistanceMatrix) -> Result<f64> {
    let scale = d.threshold();
    if !(scale > 0.0) {
        return Err(Error::config("neighborhood distance threshold must be positive"));
    }
    if !unlabeled.contains(&i) {
        return Err(Error::precondition(format!("sample {i} is not in the unlabeled pool")));
    }
    if let Some(&j) = unlabeled.iter().find(|&&j| j >= d.len()) {
        return Err(Error::precondition(format!("sample {j} is outside the distance matrix")));
    }
    Ok(unlabeled
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (-(d.get(i, j) / scale).powi(2)).exp())
        .sum())
}
