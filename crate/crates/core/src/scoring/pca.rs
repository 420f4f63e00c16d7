//! Patch PCA used to reduce each modality scan to a low-dimensional
//! empirical distribution.
//!
//! A scan is cut into non-overlapping `p x p x p` patches (edge-clamped when
//! the extent is not a multiple of `p`); each patch is a point in `R^{p^3}`.
//! The basis is fit on the patches of one modality pooled over all samples.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::volume::{Dims, MultiModalSample, Volume3D};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub modality: usize,
    pub patch: usize,
    pub mean: Vec<f64>,
    /// `d` orthonormal vectors of length `patch^3`.
    pub components: Vec<Vec<f64>>,
    /// Population variances along each component, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaBasis {
    pub fn components_count(&self) -> usize {
        self.components.len()
    }

    pub fn project_patch(&self, patch: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(patch)
                    .zip(&self.mean)
                    .map(|((w, x), m)| w * (x - m))
                    .sum()
            })
            .collect()
    }
}

fn blocks(n: usize, p: usize) -> usize {
    n.div_ceil(p)
}

pub fn patch_count(dims: Dims, p: usize) -> usize {
    blocks(dims.nx, p) * blocks(dims.ny, p) * blocks(dims.nz, p)
}

/// All patches of a volume, concatenated; `p^3` values each.
pub fn patches(v: &Volume3D, p: usize) -> Vec<f64> {
    let dims = v.dims();
    let voxels = v.voxels();
    let mut out = Vec::with_capacity(patch_count(dims, p) * p * p * p);
    for bz in 0..blocks(dims.nz, p) {
        for by in 0..blocks(dims.ny, p) {
            for bx in 0..blocks(dims.nx, p) {
                for dz in 0..p {
                    let z = (bz * p + dz).min(dims.nz - 1);
                    for dy in 0..p {
                        let y = (by * p + dy).min(dims.ny - 1);
                        for dx in 0..p {
                            let x = (bx * p + dx).min(dims.nx - 1);
                            out.push(f64::from(voxels[dims.index(x, y, z)]));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fits the top-`d` principal components of modality `l` patches over `pool`.
pub fn fit_pca(pool: &[MultiModalSample], l: usize, p: usize, d: usize) -> Result<PcaBasis> {
    if pool.is_empty() {
        return Err(Error::config("PCA needs a non-empty pool"));
    }
    let width = p.checked_pow(3).filter(|&w| w > 0).ok_or_else(|| Error::config("patch size must be >= 1"))?;
    if d == 0 || d > width {
        return Err(Error::config(format!("component count {d} must be in 1..={width}")));
    }
    if let Some(x) = pool.iter().find(|x| l >= x.modality_count()) {
        return Err(Error::shape(format!("sample {} has no modality {l}", x.id)));
    }
    let data: Vec<f64> = pool.iter().flat_map(|x| patches(x.modality(l), p)).collect();
    let n = data.len() / width;
    if n < d {
        return Err(Error::config(format!("{n} patches cannot support {d} components")));
    }

    let mut mean = vec![0.0; width];
    for row in data.chunks_exact(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, width, |i, j| data[i * width + j] - mean[j]);
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components = order[..d]
        .iter()
        .map(|&k| {
            let col = eig.eigenvectors.column(k);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|v| v * sign).collect()
        })
        .collect();
    let eigenvalues = order[..d].iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();

    Ok(PcaBasis {
        modality: l,
        patch: p,
        mean,
        components,
        eigenvalues,
    })
}

/// Empirical distribution of a sample's modality scan in component space:
/// one `d`-vector per patch.
pub fn project_sample(basis: &PcaBasis, x: &MultiModalSample) -> Result<Vec<Vec<f64>>> {
    if basis.modality >= x.modality_count() {
        return Err(Error::shape(format!(
            "basis modality {} is missing from sample {}",
            basis.modality, x.id
        )));
    }
    let width = basis.mean.len();
    Ok(patches(x.modality(basis.modality), basis.patch)
        .chunks_exact(width)
        .map(|patch| basis.project_patch(patch))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_clamp_at_edges() {
        let dims = Dims::new(3, 1, 1);
        let v = Volume3D::new(dims, vec![1.0, 2.0, 3.0]).unwrap();
        // 2 blocks along x, each 2x2x2 with clamped y and z
        let p = patches(&v, 2);
        assert_eq!(p.len(), 16);
        assert_eq!(&p[..2], &[1.0, 2.0]);
        assert_eq!(&p[8..10], &[3.0, 3.0]);
    }

    #[test]
    fn rejects_bad_component_counts() {
        let v = Volume3D::filled(Dims::cube(2), 1.0).unwrap();
        let x = MultiModalSample::new(0, vec![v]).unwrap();
        assert!(fit_pca(std::slice::from_ref(&x), 0, 2, 0).is_err());
        assert!(fit_pca(std::slice::from_ref(&x), 0, 2, 9).is_err());
        // one 2^3 patch cannot support two components
        assert!(fit_pca(std::slice::from_ref(&x), 0, 2, 2).is_err());
        assert!(fit_pca(&[x], 1, 2, 1).is_err());
    }
}
