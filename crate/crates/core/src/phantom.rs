//! Synthetic multi-modal phantoms with a controllable domain shift.
//!
//! Each modality is a low-frequency cosine texture scaled by a gain, shifted
//! by a bias, with an additive contrast inside axis-aligned ellipsoidal
//! tumors, plus Gaussian noise, optionally box-smoothed. The tumor masks are the
//! ground truth and serve as the annotation oracle.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::volume::{self, Dims, LabelMask, MultiModalSample, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub dims: Dims,
    pub modalities: usize,
    /// Inclusive range of tumors per sample.
    pub tumor_count_range: (usize, usize),
    /// Inclusive range of per-axis radii, in voxels.
    pub tumor_radius_range: (f64, f64),
    pub intensity_gain: Vec<f64>,
    pub intensity_bias: Vec<f64>,
    /// Additive intensity inside tumors, per modality.
    pub tumor_contrast: Vec<f64>,
    pub noise_sigma: f64,
    pub smoothing_radius: usize,
    pub seed: u64,
    /// Per-sample, per-modality gain factor `exp(gain_jitter * u)`, `u ~ U(-1, 1)`.
    #[serde(default)]
    pub gain_jitter: f64,
    /// Per-sample, per-modality contrast factor `1 + contrast_jitter * u`.
    #[serde(default)]
    pub contrast_jitter: f64,
}

impl DomainSpec {
    /// Source domain of the default experiment.
    pub fn default_source() -> Self {
        Self {
            dims: Dims::cube(32),
            modalities: 3,
            tumor_count_range: (1, 3),
            tumor_radius_range: (2.0, 7.0),
            intensity_gain: vec![1.0; 3],
            intensity_bias: vec![0.0; 3],
            tumor_contrast: vec![2.0, 1.6, 1.2],
            noise_sigma: 0.05,
            smoothing_radius: 0,
            seed: 11,
            gain_jitter: 0.0,
            contrast_jitter: 0.0,
        }
    }

    /// Target domain of the default experiment: stronger texture, a bias
    /// offset, more noise, a reversed modality contrast ordering and
    /// per-sample variation of gain and contrast.
    pub fn default_target() -> Self {
        Self {
            intensity_gain: vec![1.4; 3],
            intensity_bias: vec![0.3; 3],
            tumor_contrast: vec![0.0, 1.2, 2.0],
            noise_sigma: 0.2,
            seed: 23,
            gain_jitter: 0.6,
            contrast_jitter: 1.0,
            ..Self::default_source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities;
        if m == 0 {
            return Err(Error::config("modality count must be at least 1"));
        }
        for (name, v) in [
            ("intensity_gain", &self.intensity_gain),
            ("intensity_bias", &self.intensity_bias),
            ("tumor_contrast", &self.tumor_contrast),
        ] {
            if v.len() != m {
                return Err(Error::config(format!(
                    "{name} has {} entries for {m} modalities",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        if self.dims.is_empty() {
            return Err(Error::config("dims must be non-zero"));
        }
        let (cmin, cmax) = self.tumor_count_range;
        if cmin > cmax {
            return Err(Error::config("tumor_count_range min exceeds max"));
        }
        let (rmin, rmax) = self.tumor_radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::config("tumor radii must be positive with min <= max"));
        }
        if cmax > 0 {
            let half = self.dims.min_extent() as f64 / 2.0;
            // a tumor must also clear the outermost voxel layer on both sides
            let fit = (self.dims.min_extent() as f64 - 3.0) / 2.0;
            if rmax >= half || rmax > fit {
                return Err(Error::config(format!(
                    "tumor radius {rmax} does not fit in dims {}",
                    self.dims
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        for (name, j) in [("gain_jitter", self.gain_jitter), ("contrast_jitter", self.contrast_jitter)] {
            if !(j >= 0.0 && j.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub sample: MultiModalSample,
    pub truth: LabelMask,
    pub tumors: Vec<Ellipsoid>,
}

struct CosineTerm {
    freq: [f64; 3],
    phase: [f64; 3],
}

fn texture_terms<R: Rng>(rng: &mut R) -> Vec<CosineTerm> {
    (0..3)
        .map(|_| CosineTerm {
            freq: std::array::from_fn(|_| f64::from(rng.random_range(1u8..=2))),
            phase: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
        })
        .collect()
}

/// Generates one sample from `rng`. The draw order is fixed, so the output
/// is a pure function of `(spec, rng state)`.
pub fn generate<R: Rng>(spec: &DomainSpec, id: usize, rng: &mut R) -> Result<GeneratedSample> {
    spec.validate()?;
    let dims = spec.dims;
    let ext = [dims.nx, dims.ny, dims.nz];

    let (cmin, cmax) = spec.tumor_count_range;
    let count = rng.random_range(cmin..=cmax);
    let (rmin, rmax) = spec.tumor_radius_range;
    let tumors: Vec<Ellipsoid> = (0..count)
        .map(|_| {
            let radii: [f64; 3] = std::array::from_fn(|_| {
                if rmin == rmax {
                    rmin
                } else {
                    rng.random_range(rmin..=rmax)
                }
            });
            let center = std::array::from_fn(|a| {
                let lo = radii[a] + 1.0;
                let hi = ext[a] as f64 - 2.0 - radii[a];
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            });
            Ellipsoid { center, radii }
        })
        .collect();

    let mut truth = LabelMask::zeros(dims);
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                if tumors.iter().any(|t| t.contains(x, y, z)) {
                    truth.labels_mut()[dims.index(x, y, z)] = 1;
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::config(format!("noise distribution: {e}")))?;
    let mut modalities = Vec::with_capacity(spec.modalities);
    for l in 0..spec.modalities {
        let terms = texture_terms(rng);
        let jg: f64 = rng.random_range(-1.0..1.0);
        let jc: f64 = rng.random_range(-1.0..1.0);
        let (gain, bias, contrast) = (
            spec.intensity_gain[l] * (spec.gain_jitter * jg).exp(),
            spec.intensity_bias[l],
            spec.tumor_contrast[l] * (1.0 + spec.contrast_jitter * jc),
        );
        let mut values = vec![0.0; dims.len()];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let p = [x as f64, y as f64, z as f64];
                    let tex = terms
                        .iter()
                        .map(|t| {
                            (0..3)
                                .map(|a| (TAU * t.freq[a] * p[a] / ext[a] as f64 + t.phase[a]).cos())
                                .product::<f64>()
                        })
                        .sum::<f64>()
                        / terms.len() as f64;
                    let k = dims.index(x, y, z);
                    let inside = if truth.labels()[k] != 0 { contrast } else { 0.0 };
                    values[k] = tex * gain + bias + inside + noise.sample(rng);
                }
            }
        }
        let values = volume::box_mean(&values, dims, spec.smoothing_radius);
        modalities.push(Volume3D::from_f64(dims, &values)?);
    }

    Ok(GeneratedSample {
        sample: MultiModalSample::new(id, modalities)?,
        truth,
        tumors,
    })
}

pub fn gen_sample<R: Rng>(
    spec: &DomainSpec,
    id: usize,
    rng: &mut R,
) -> Result<(MultiModalSample, LabelMask)> {
    let g = generate(spec, id, rng)?;
    Ok((g.sample, g.truth))
}

/// Samples with their ground-truth masks.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<MultiModalSample>,
    pub truths: Vec<LabelMask>,
    pub spec: DomainSpec,
}

impl Dataset {
    pub fn new(samples: Vec<MultiModalSample>, truths: Vec<LabelMask>, spec: DomainSpec) -> Result<Self> {
        if samples.len() != truths.len() {
            return Err(Error::shape(format!(
                "{} samples but {} masks",
                samples.len(),
                truths.len()
            )));
        }
        for (s, t) in samples.iter().zip(&truths) {
            if s.dims() != t.dims() {
                return Err(Error::shape(format!("sample {} dims differ from its mask", s.id)));
            }
        }
        Ok(Self {
            samples,
            truths,
            spec,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sub-dataset of the given positions, re-identified `0..idx.len()`.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut samples = Vec::with_capacity(idx.len());
        let mut truths = Vec::with_capacity(idx.len());
        for (new_id, &i) in idx.iter().enumerate() {
            let mut s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::precondition(format!("sample index {i} out of range")))?
                .clone();
            s.id = new_id;
            samples.push(s);
            truths.push(self.truths[i].clone());
        }
        Self::new(samples, truths, self.spec.clone())
    }
}

/// Sample `i` is drawn from sub-stream `seed ^ splitmix64(i)`, so datasets
/// of different sizes share their common prefix.
pub fn gen_dataset(spec: &DomainSpec, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    spec.validate()?;
    let mut samples = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(spec.seed, i as u64);
        let (s, t) = gen_sample(spec, i, &mut rng)?;
        samples.push(s);
        truths.push(t);
    }
    Dataset::new(samples, truths, spec.clone())
}

pub fn modality_file(i: usize, l: usize) -> String {
    format!("sample_{i}_mod_{l}.avol")
}

pub fn mask_file(i: usize) -> String {
    format!("sample_{i}_mask.avol")
}

/// Writes `sample_<i>_mod_<l>.avol`, `sample_<i>_mask.avol` and `spec.json`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (s, t)) in data.samples.iter().zip(&data.truths).enumerate() {
        for (l, m) in s.modalities().iter().enumerate() {
            volume::write_volume(dir.join(modality_file(i, l)), m)?;
        }
        volume::write_mask(dir.join(mask_file(i)), t)?;
    }
    let spec_path = dir.join("spec.json");
    let json = serde_json::to_string_pretty(&data.spec)
        .map_err(|e| Error::InvalidValue(e.to_string()))?;
    fs::write(&spec_path, json + "\n").map_err(|e| Error::io(&spec_path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: DomainSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", spec_path.display()),
    })?;
    let mut samples = Vec::new();
    let mut truths = Vec::new();
    let mut i = 0;
    while dir.join(mask_file(i)).exists() {
        let mods = (0..spec.modalities)
            .map(|l| volume::read_volume(dir.join(modality_file(i, l))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(MultiModalSample::new(i, mods)?);
        truths.push(volume::read_mask(dir.join(mask_file(i)))?);
        i += 1;
    }
    if samples.is_empty() {
        return Err(Error::io(
            dir.join(mask_file(0)),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory has no samples"),
        ));
    }
    Dataset::new(samples, truths, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DomainSpec {
        DomainSpec {
            dims: Dims::cube(16),
            tumor_radius_range: (2.0, 4.0),
            ..DomainSpec::default_target()
        }
    }

    #[test]
    fn no_tumors_gives_empty_mask() {
        let spec = DomainSpec {
            tumor_count_range: (0, 0),
            ..small()
        };
        let (_, mask) = gen_sample(&spec, 0, &mut substream(1, 0)).unwrap();
        assert_eq!(mask.foreground_count(), 0);
    }

    #[test]
    fn deterministic() {
        let spec = small();
        let a = gen_sample(&spec, 0, &mut substream(5, 0)).unwrap();
        let b = gen_sample(&spec, 0, &mut substream(5, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small();
        spec.tumor_radius_range = (2.0, 8.0);
        assert!(spec.validate().is_err());
        let mut spec = small();
        spec.noise_sigma = -1.0;
        assert!(spec.validate().is_err());
        let mut spec = small();
        spec.tumor_contrast.pop();
        assert!(spec.validate().is_err());
        let mut spec = small();
        spec.modalities = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tumors_clear_the_boundary() {
        let spec = small();
        for i in 0..10 {
            let g = generate(&spec, 0, &mut substream(3, i)).unwrap();
            let d = spec.dims;
            for z in 0..d.nz {
                for y in 0..d.ny {
                    for x in 0..d.nx {
                        let edge = [x, y, z].contains(&0) || x == d.nx - 1 || y == d.ny - 1 || z == d.nz - 1;
                        if edge {
                            assert_eq!(g.truth.labels()[d.index(x, y, z)], 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn labels_are_binary() {
        let data = gen_dataset(&small(), 4).unwrap();
        for t in &data.truths {
            assert!(t.labels().iter().all(|&l| l <= 1));
        }
    }
}
