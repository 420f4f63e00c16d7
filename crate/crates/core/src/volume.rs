//! Volumetric data types and the `AVOL` binary container.
//!
//! All arrays use x-fastest order: the voxel at `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.
//!
//! File layout (little-endian):
//!
//! | bytes | content                                                   |
//! |-------|-----------------------------------------------------------|
//! | 0..4  | magic `AVOL`                                              |
//! | 4     | version (1)                                               |
//! | 5     | kind: 0 float volume, 1 integer mask, 2 probability map   |
//! | 6..8  | reserved, zero                                            |
//! | 8..20 | `nx`, `ny`, `nz` as `u32`                                 |
//! | 20..24| class count `C` as `u32` (probability maps only)          |
//! | ...   | payload: `f32` values, or `u16` labels for masks          |
//!
//! Probability maps hold `C` consecutive entries per voxel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVOL";
pub const FORMAT_VERSION: u8 = 1;
const BASE_HEADER: usize = 20;

/// Tolerance on the per-voxel sum of a probability map.
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn min_extent(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// A scalar 3D volume. Voxels are stored as `f32`; arithmetic on them is
/// done in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    voxels: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != dims.len() {
            return Err(Error::shape(format!(
                "volume {dims} needs {} voxels, got {}",
                dims.len(),
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite voxel {} at index {i}",
                voxels[i]
            )));
        }
        Ok(Self { dims, voxels })
    }

    /// Rounds each value to `f32`.
    pub fn from_f64(dims: Dims, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.voxels.iter().map(|&v| f64::from(v)).collect()
    }
}

/// The co-registered modality scans of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub id: usize,
    modalities: Vec<Volume3D>,
}

impl MultiModalSample {
    pub fn new(id: usize, modalities: Vec<Volume3D>) -> Result<Self> {
        let first = modalities
            .first()
            .ok_or_else(|| Error::shape("a sample needs at least one modality"))?;
        let dims = first.dims();
        if let Some(l) = modalities.iter().position(|m| m.dims() != dims) {
            return Err(Error::shape(format!(
                "modality {l} has dims {} but modality 0 has {dims}",
                modalities[l].dims()
            )));
        }
        Ok(Self { id, modalities })
    }

    pub fn dims(&self) -> Dims {
        self.modalities[0].dims()
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn modalities(&self) -> &[Volume3D] {
        &self.modalities
    }

    pub fn modality(&self, l: usize) -> &Volume3D {
        &self.modalities[l]
    }

    /// The same subject restricted to one modality (single-modality ablation).
    pub fn only_modality(&self, l: usize) -> Result<Self> {
        let m = self.modalities.get(l).ok_or_else(|| {
            Error::shape(format!(
                "modality {l} out of range for a {}-modality sample",
                self.modality_count()
            ))
        })?;
        Self::new(self.id, vec![m.clone()])
    }
}

/// Integer label volume; class `0` is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    labels: Vec<u16>,
}

impl LabelMask {
    pub fn new(dims: Dims, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::shape(format!(
                "mask {dims} needs {} labels, got {}",
                dims.len(),
                labels.len()
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            labels: vec![0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Errors unless every label is below `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| usize::from(l) >= classes) {
            Some(i) => Err(Error::InvalidValue(format!(
                "label {} at index {i} is not below class count {classes}",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Per-voxel class distributions, `classes` entries per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    dims: Dims,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(dims: Dims, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::shape("probability map needs at least one class"));
        }
        if probs.len() != dims.len() * classes {
            return Err(Error::shape(format!(
                "probability map {dims} x {classes} needs {} entries, got {}",
                dims.len() * classes,
                probs.len()
            )));
        }
        for (k, row) in probs.chunks_exact(classes).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidValue(format!(
                    "voxel {k} has a negative or non-finite probability"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidValue(format!(
                    "voxel {k} probabilities sum to {sum}"
                )));
            }
        }
        Ok(Self {
            dims,
            classes,
            probs,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn voxel(&self, k: usize) -> &[f64] {
        &self.probs[k * self.classes..(k + 1) * self.classes]
    }

    pub fn voxels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.classes)
    }

    /// Per-voxel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let labels = self.voxels().map(|row| argmax_first(row) as u16).collect();
        LabelMask {
            dims: self.dims,
            labels,
        }
    }
}

pub(crate) fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = c;
        }
    }
    best
}

/// Z-scored values in `f64` (population standard deviation). A volume whose
/// standard deviation is below `1e-12` maps to all zeros.
pub fn zscore_values(v: &Volume3D) -> Vec<f64> {
    let n = v.voxels.len() as f64;
    let mean = v.voxels.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v
        .voxels
        .iter()
        .map(|&x| (f64::from(x) - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; v.voxels.len()];
    }
    v.voxels
        .iter()
        .map(|&x| (f64::from(x) - mean) / std)
        .collect()
}

pub fn zscore(v: &Volume3D) -> Volume3D {
    let values = zscore_values(v);
    Volume3D {
        dims: v.dims,
        voxels: values.iter().map(|&x| x as f32).collect(),
    }
}

/// Mean over the `(2r+1)^3` neighborhood with edge-clamped indices.
pub fn box_mean(values: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    if radius == 0 {
        return out;
    }
    let ext = [dims.nx, dims.ny, dims.nz];
    let stride = [1, dims.nx, dims.nx * dims.ny];
    let width = (2 * radius + 1) as f64;
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = ext[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..ext[o1] {
            for b in 0..ext[o2] {
                let base = a * stride[o1] + b * stride[o2];
                line.clear();
                line.extend((0..n).map(|i| out[base + i * stride[axis]]));
                for i in 0..n {
                    let mut acc = 0.0;
                    for d in -(radius as isize)..=(radius as isize) {
                        acc += line[(i as isize + d).clamp(0, n as isize - 1) as usize];
                    }
                    out[base + i * stride[axis]] = acc / width;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// file format

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Volume = 0,
    Mask = 1,
    Probability = 2,
}

impl Kind {
    fn header_len(self) -> usize {
        match self {
            Kind::Probability => BASE_HEADER + 4,
            _ => BASE_HEADER,
        }
    }
}

fn header(kind: Kind, dims: Dims, classes: Option<usize>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(kind.header_len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(kind as u8);
    out.extend_from_slice(&[0, 0]);
    for d in dims.as_array().into_iter().chain(classes) {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidValue(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn volume_to_bytes(v: &Volume3D) -> Result<Vec<u8>> {
    if let Some(i) = v.voxels.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidValue(format!("non-finite voxel at index {i}")));
    }
    let mut out = header(Kind::Volume, v.dims, None)?;
    out.reserve(4 * v.voxels.len());
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn mask_to_bytes(m: &LabelMask) -> Result<Vec<u8>> {
    let mut out = header(Kind::Mask, m.dims, None)?;
    out.reserve(2 * m.labels.len());
    for l in &m.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

/// Probabilities are rounded to `f32` on disk.
pub fn probability_map_to_bytes(p: &ProbabilityMap) -> Result<Vec<u8>> {
    let mut out = header(Kind::Probability, p.dims, Some(p.classes))?;
    out.reserve(4 * p.probs.len());
    for &x in &p.probs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Writes `v`; a non-finite voxel is rejected before the file is touched.
pub fn write_volume(path: impl AsRef<Path>, v: &Volume3D) -> Result<()> {
    write_bytes(path.as_ref(), &volume_to_bytes(v)?)
}

pub fn write_mask(path: impl AsRef<Path>, m: &LabelMask) -> Result<()> {
    write_bytes(path.as_ref(), &mask_to_bytes(m)?)
}

pub fn write_probability_map(path: impl AsRef<Path>, p: &ProbabilityMap) -> Result<()> {
    write_bytes(path.as_ref(), &probability_map_to_bytes(p)?)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Header {
    dims: Dims,
    classes: Option<usize>,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8], kind: Kind) -> Result<Header> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "missing AVOL magic"));
    }
    if bytes.len() < kind.header_len() {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != kind as u8 {
        return Err(format_err(
            5,
            format!("expected kind {}, found {}", kind as u8, bytes[5]),
        ));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(format_err(6, "reserved bytes are not zero"));
    }
    let word = |i: usize| {
        let off = 8 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let dims = Dims::new(word(0), word(1), word(2));
    let classes = (kind == Kind::Probability).then(|| word(3));
    if classes == Some(0) {
        return Err(format_err(20, "class count is zero"));
    }
    Ok(Header {
        dims,
        classes,
        payload_offset: kind.header_len(),
    })
}

fn check_payload_len(bytes: &[u8], h: &Header, elem: usize, count: usize) -> Result<()> {
    let expected = h.payload_offset + elem * count;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated payload: {} bytes, expected {expected}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    Ok(())
}

fn read_f32s(bytes: &[u8], h: &Header, count: usize) -> Result<Vec<f32>> {
    check_payload_len(bytes, h, 4, count)?;
    bytes[h.payload_offset..]
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format_err(h.payload_offset + 4 * i, "non-finite value"))
            }
        })
        .collect()
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<Volume3D> {
    let h = parse_header(bytes, Kind::Volume)?;
    let voxels = read_f32s(bytes, &h, h.dims.len())?;
    Ok(Volume3D {
        dims: h.dims,
        voxels,
    })
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<LabelMask> {
    let h = parse_header(bytes, Kind::Mask)?;
    check_payload_len(bytes, &h, 2, h.dims.len())?;
    let labels = bytes[h.payload_offset..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(LabelMask {
        dims: h.dims,
        labels,
    })
}

pub fn probability_map_from_bytes(bytes: &[u8]) -> Result<ProbabilityMap> {
    let h = parse_header(bytes, Kind::Probability)?;
    let classes = h.classes.unwrap_or(1);
    let values = read_f32s(bytes, &h, h.dims.len() * classes)?;
    let probs = values.into_iter().map(f64::from).collect();
    ProbabilityMap::new(h.dims, classes, probs).map_err(|e| format_err(h.payload_offset, e.to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    volume_from_bytes(&read_file(path.as_ref())?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    mask_from_bytes(&read_file(path.as_ref())?)
}

pub fn read_probability_map(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    probability_map_from_bytes(&read_file(path.as_ref())?)
}
