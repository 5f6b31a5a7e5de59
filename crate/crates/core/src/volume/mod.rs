//! Core volumetric data types and bit-exact file I/O.
//!
//! All grids use an x-fastest linear layout: the value at voxel
//! `(x, y, z)` lives at index `x + nx * (y + ny * z)`, matching the
//! MetaImage raw-payload convention.

mod mhd;

pub use mhd::{read_metaimage, MetaImage};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Voxel counts along x, y, z. All strictly positive.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index of voxel (x, y, z), x-fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        x + self.nx * (y + self.ny * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }

    fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::InvalidVolume(format!("zero extent in dims {self:?}")));
        }
        Ok(())
    }
}

impl From<(usize, usize, usize)> for Dims {
    fn from((nx, ny, nz): (usize, usize, usize)) -> Self {
        Dims { nx, ny, nz }
    }
}

/// Voxel spacing in millimetres. All strictly positive.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Spacing {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Self {
        Spacing { sx, sy, sz }
    }

    pub fn isotropic(s: f64) -> Self {
        Spacing { sx: s, sy: s, sz: s }
    }

    fn validate(&self) -> Result<()> {
        for s in [self.sx, self.sy, self.sz] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidVolume(format!("non-positive spacing {self:?}")));
            }
        }
        Ok(())
    }
}

impl From<(f64, f64, f64)> for Spacing {
    fn from((sx, sy, sz): (f64, f64, f64)) -> Self {
        Spacing { sx, sy, sz }
    }
}

/// Number of segmentation classes, background included.
pub const NUM_CLASSES: usize = 5;

/// Highest valid label value.
pub const MAX_LABEL: u8 = 4;

/// The four target organs with their fixed label encoding.
/// 0 is background and is not an organ.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
pub enum Organ {
    Liver = 1,
    Spleen = 2,
    RightKidney = 3,
    LeftKidney = 4,
}

impl Organ {
    pub const ALL: [Organ; 4] = [Organ::Liver, Organ::Spleen, Organ::RightKidney, Organ::LeftKidney];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Organ::Liver => "liver",
            Organ::Spleen => "spleen",
            Organ::RightKidney => "r.kidney",
            Organ::LeftKidney => "l.kidney",
        }
    }

    pub fn from_label(label: u8) -> Option<Organ> {
        match label {
            1 => Some(Organ::Liver),
            2 => Some(Organ::Spleen),
            3 => Some(Organ::RightKidney),
            4 => Some(Organ::LeftKidney),
            _ => None,
        }
    }
}

/// Scalar field over a voxel grid, in HU or normalized units.
///
/// Immutable after construction; cheap to share read-only.
#[derive(Clone, PartialEq, Debug)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    values: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, values: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if values.len() != dims.count() {
            return Err(Error::InvalidVolume(format!(
                "value count {} != {} voxels for dims {:?}",
                values.len(),
                dims.count(),
                dims
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite value {v}")));
        }
        Ok(Volume { dims, spacing, values })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        Volume::new(dims, spacing, vec![value; dims.count()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.dims.index(x, y, z)]
    }

    /// Exact aggregates over all voxels (64-bit mean accumulation).
    pub fn stats(&self) -> VolumeStats {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &v in &self.values {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        VolumeStats {
            min,
            max,
            mean: sum / self.values.len() as f64,
            voxel_count: self.values.len(),
        }
    }
}

/// Aggregates returned by [`Volume::stats`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeStats {
    pub min: f32,
    pub max: f32,
    pub mean: f64,
    pub voxel_count: usize,
}

/// Organ-label grid. Every label is in `0..=MAX_LABEL`.
#[derive(Clone, PartialEq, Debug)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if labels.len() != dims.count() {
            return Err(Error::InvalidVolume(format!(
                "label count {} != {} voxels for dims {:?}",
                labels.len(),
                dims.count(),
                dims
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > MAX_LABEL) {
            return Err(Error::InvalidVolume(format!("label {l} out of range 0..={MAX_LABEL}")));
        }
        Ok(LabelVolume { dims, spacing, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    /// Voxel count per class label.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Binary mask of all non-background voxels.
    pub fn foreground_mask(&self) -> MaskVolume {
        MaskVolume {
            dims: self.dims,
            spacing: self.spacing,
            bits: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// Binary grid, one bit per voxel.
#[derive(Clone, PartialEq, Debug)]
pub struct MaskVolume {
    dims: Dims,
    spacing: Spacing,
    bits: Vec<bool>,
}

impl MaskVolume {
    pub fn new(dims: Dims, spacing: Spacing, bits: Vec<bool>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if bits.len() != dims.count() {
            return Err(Error::InvalidVolume(format!(
                "bit count {} != {} voxels for dims {:?}",
                bits.len(),
                dims.count(),
                dims
            )));
        }
        Ok(MaskVolume { dims, spacing, bits })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.dims.index(x, y, z)]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

/// Co-registered low-kV / high-kV acquisition of one case.
#[derive(Clone, Debug)]
pub struct DectPair {
    low: Volume,
    high: Volume,
    identifier: String,
}

impl DectPair {
    pub fn new(low: Volume, high: Volume, identifier: impl Into<String>) -> Result<Self> {
        if low.dims() != high.dims() {
            return Err(Error::InvalidVolume(format!(
                "spectra dims differ: {:?} vs {:?}",
                low.dims(),
                high.dims()
            )));
        }
        if low.spacing() != high.spacing() {
            return Err(Error::InvalidVolume(format!(
                "spectra spacing differs: {:?} vs {:?}",
                low.spacing(),
                high.spacing()
            )));
        }
        Ok(DectPair { low, high, identifier: identifier.into() })
    }

    pub fn low(&self) -> &Volume {
        &self.low
    }

    pub fn high(&self) -> &Volume {
        &self.high
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    pub fn dims(&self) -> Dims {
        self.low.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.low.spacing()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp() -> Spacing {
        Spacing::isotropic(1.0)
    }

    #[test]
    fn stats_constant_field() {
        let v = Volume::filled(Dims::new(3, 2, 2), sp(), 5.0).unwrap();
        let s = v.stats();
        assert_eq!(s.min, 5.0);
        assert_eq!(s.max, 5.0);
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.voxel_count, 12);
    }

    #[test]
    fn stats_hand_computed() {
        let v = Volume::new(Dims::new(4, 1, 1), sp(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = v.stats();
        assert_eq!(s.min, 0.0);
        assert_eq!(s.max, 3.0);
        assert_eq!(s.mean, 1.5);
        assert_eq!(s.voxel_count, 4);
    }

    #[test]
    fn zero_dims_rejected_at_construction() {
        // Stats can never see zero voxels because construction refuses them.
        assert!(Volume::new(Dims::new(0, 2, 2), sp(), vec![]).is_err());
    }

    #[test]
    fn count_mismatch_rejected() {
        assert!(Volume::new(Dims::new(2, 2, 2), sp(), vec![0.0; 7]).is_err());
        assert!(Volume::new(Dims::new(2, 2, 2), sp(), vec![0.0; 9]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Volume::new(Dims::new(1, 1, 1), sp(), vec![f32::NAN]).is_err());
        assert!(Volume::new(Dims::new(1, 1, 1), sp(), vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn bad_spacing_rejected() {
        assert!(Volume::filled(Dims::new(1, 1, 1), Spacing::new(0.0, 1.0, 1.0), 0.0).is_err());
        assert!(Volume::filled(Dims::new(1, 1, 1), Spacing::new(1.0, -0.5, 1.0), 0.0).is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(LabelVolume::new(Dims::new(1, 1, 1), sp(), vec![5]).is_err());
        assert!(LabelVolume::new(Dims::new(1, 1, 1), sp(), vec![4]).is_ok());
    }

    #[test]
    fn dect_pair_requires_coregistration() {
        let a = Volume::filled(Dims::new(2, 2, 2), sp(), 0.0).unwrap();
        let b = Volume::filled(Dims::new(2, 2, 3), sp(), 0.0).unwrap();
        assert!(DectPair::new(a.clone(), b, "c").is_err());
        let c = Volume::filled(Dims::new(2, 2, 2), Spacing::isotropic(0.5), 0.0).unwrap();
        assert!(DectPair::new(a.clone(), c, "c").is_err());
        assert!(DectPair::new(a.clone(), a, "c").is_ok());
    }

    #[test]
    fn index_roundtrip() {
        let d = Dims::new(3, 4, 5);
        for idx in 0..d.count() {
            let (x, y, z) = d.coords(idx);
            assert_eq!(d.index(x, y, z), idx);
        }
    }

    #[test]
    fn organ_labels() {
        assert_eq!(Organ::Liver.label(), 1);
        assert_eq!(Organ::LeftKidney.label(), 4);
        assert_eq!(Organ::from_label(3), Some(Organ::RightKidney));
        assert_eq!(Organ::from_label(0), None);
        assert_eq!(Organ::from_label(9), None);
    }
}
