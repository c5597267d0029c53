//! 3-D scalar volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a volume's values mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Intensity,
    /// Values in `[0, 1]`.
    Probability,
    /// Values in `{0, 1}`.
    BinaryMask,
}

/// A 3-D grid with voxel spacing in mm.
///
/// Voxels are stored with `x` varying fastest: the value at `(x, y, z)` lives
/// at `x + X·(y + Y·z)`. This matches NIfTI on-disk order and makes every
/// axial slice a contiguous block.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    kind: VolumeKind,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::dim(format!(
                "volume {dims:?} needs {expected} voxels, got {}",
                data.len()
            )));
        }
        let v = Volume {
            dims,
            spacing,
            data,
            kind,
        };
        v.check_kind(kind)?;
        Ok(v)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![0.0; dims.iter().product()],
            kind,
        }
    }

    /// A binary mask built from a boolean predicate per voxel.
    pub fn from_mask(dims: [usize; 3], spacing: [f64; 3], mask: &[bool]) -> Result<Self> {
        let data = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume::new(dims, spacing, data, VolumeKind::BinaryMask)
    }

    fn check_kind(&self, kind: VolumeKind) -> Result<()> {
        match kind {
            VolumeKind::Intensity => Ok(()),
            VolumeKind::Probability => match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                Some(i) => Err(Error::Value(format!(
                    "probability volume has value {} at voxel {i}",
                    self.data[i]
                ))),
                None => Ok(()),
            },
            VolumeKind::BinaryMask => match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
                Some(i) => Err(Error::Value(format!(
                    "binary mask has value {} at voxel {i}",
                    self.data[i]
                ))),
                None => Ok(()),
            },
        }
    }

    /// Reinterprets the volume, validating the value range of the new kind.
    pub fn with_kind(mut self, kind: VolumeKind) -> Result<Self> {
        self.check_kind(kind)?;
        self.kind = kind;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Axial slice `z` as a contiguous block in (y, x) order.
    pub fn axial(&self, z: usize) -> &[f64] {
        let p = self.dims[0] * self.dims[1];
        &self.data[z * p..(z + 1) * p]
    }

    pub fn mask_bits(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0.0).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn same_grid(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dim(format!(
                "volume dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_x_fastest() {
        let v = Volume::new([2, 3, 2], [1.0; 3], (0..12).map(f64::from).collect(), VolumeKind::Intensity).unwrap();
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1), 6.0);
        assert_eq!(v.axial(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn kind_validation() {
        assert!(Volume::new([1, 1, 2], [1.0; 3], vec![0.0, 2.0], VolumeKind::BinaryMask).is_err());
        assert!(Volume::new([1, 1, 2], [1.0; 3], vec![0.0, 1.5], VolumeKind::Probability).is_err());
        assert!(Volume::new([1, 1, 2], [1.0; 3], vec![0.0], VolumeKind::Intensity).is_err());
        let v = Volume::new([1, 1, 2], [1.0; 3], vec![0.0, 1.0], VolumeKind::Intensity).unwrap();
        assert_eq!(v.with_kind(VolumeKind::BinaryMask).unwrap().kind(), VolumeKind::BinaryMask);
    }
}
