//! Subject preprocessing: crop/pad, brain masking, normalization and
//! conversion between volumes and slice batches.
//!
//! A 2-D slice is addressed as `[row][col]` with rows along the volume's x
//! axis and columns along y, so a 132×256×83 volume has 132-row slices.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_nifti, ManifestEntry};
use crate::tensor::{Shape, Tensor};
use crate::train::SubjectSlices;
use crate::volume::{Volume, VolumeKind};

pub const TARGET_SIZE: usize = 200;

/// Maps between an original `rows × cols` slice and a `target × target`
/// slice: original index = target index + offset, per axis. Positive offsets
/// crop, negative offsets pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceGeometry {
    pub rows: usize,
    pub cols: usize,
    pub target: usize,
    pub offsets: [isize; 2],
}

impl SliceGeometry {
    pub fn new(rows: usize, cols: usize, target: usize) -> Self {
        // Crop keeps the centre (the extra voxel leaves from the high side);
        // pad puts the extra voxel on the high side.
        let off = |n: usize| -> isize {
            if n >= target {
                ((n - target) / 2) as isize
            } else {
                -(((target - n) / 2) as isize)
            }
        };
        SliceGeometry {
            rows,
            cols,
            target,
            offsets: [off(rows), off(cols)],
        }
    }

    fn source(&self, axis: usize, t: usize) -> Option<usize> {
        let n = if axis == 0 { self.rows } else { self.cols };
        let s = t as isize + self.offsets[axis];
        (s >= 0 && (s as usize) < n).then_some(s as usize)
    }

    /// Original row-major slice to target slice; uncovered cells are 0.
    pub fn apply<T: Copy + Default>(&self, slice: &[T]) -> Vec<T> {
        assert_eq!(slice.len(), self.rows * self.cols);
        let t = self.target;
        let mut out = vec![T::default(); t * t];
        for r in 0..t {
            let Some(sr) = self.source(0, r) else { continue };
            for c in 0..t {
                if let Some(sc) = self.source(1, c) {
                    out[r * t + c] = slice[sr * self.cols + sc];
                }
            }
        }
        out
    }

    /// Target slice back to the original extents; cropped-away cells are 0.
    pub fn invert<T: Copy + Default>(&self, slice: &[T]) -> Vec<T> {
        let t = self.target;
        assert_eq!(slice.len(), t * t);
        let mut out = vec![T::default(); self.rows * self.cols];
        for r in 0..t {
            let Some(sr) = self.source(0, r) else { continue };
            for c in 0..t {
                if let Some(sc) = self.source(1, c) {
                    out[sr * self.cols + sc] = slice[r * t + c];
                }
            }
        }
        out
    }
}

/// Centre-crops or zero-pads a row-major `rows × cols` slice to
/// `target × target`.
pub fn crop_or_pad_slice(slice: &[f64], rows: usize, cols: usize, target: usize) -> Result<(Vec<f64>, SliceGeometry)> {
    if slice.len() != rows * cols {
        return Err(Error::dim(format!("slice has {} values, expected {rows}×{cols}", slice.len())));
    }
    let geom = SliceGeometry::new(rows, cols, target);
    Ok((geom.apply(slice), geom))
}

/// Rule for the brain-mask intensity threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrainThreshold {
    /// Otsu over a 256-bin histogram of all voxels.
    #[default]
    Otsu,
    /// Voxels strictly above the value are brain.
    Fixed(f64),
}

/// Otsu split of `values`: returns the smallest value that counts as
/// foreground, i.e. everything `>=` the result is foreground. `None` when
/// the values are constant.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    const BINS: usize = 256;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return None;
    }
    let bin = |v: f64| (((v - lo) / (hi - lo) * BINS as f64) as usize).min(BINS - 1);
    let mut hist = [0u64; BINS];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &h) in hist.iter().enumerate().take(BINS - 1) {
        w0 += h as f64;
        sum0 += k as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            best_k = k;
        }
    }
    // Lowest value landing in a bin above best_k.
    values
        .iter()
        .copied()
        .filter(|&v| bin(v) > best_k)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))))
}

/// Thresholds `flair` and fills holes slice by slice.
pub fn brain_mask(flair: &Volume, rule: BrainThreshold) -> Result<Volume> {
    let data = flair.data();
    if data.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyMask("brain mask of an all-zero volume".into()));
    }
    let mut bits: Vec<bool> = match rule {
        BrainThreshold::Otsu => match otsu_threshold(data) {
            Some(t) => data.iter().map(|&v| v >= t).collect(),
            None => vec![true; data.len()],
        },
        BrainThreshold::Fixed(t) => data.iter().map(|&v| v > t).collect(),
    };
    let [x, y, z] = flair.dims();
    for s in 0..z {
        fill_holes_2d(&mut bits[s * x * y..(s + 1) * x * y], x, y);
    }
    if !bits.iter().any(|&b| b) {
        return Err(Error::EmptyMask("threshold selected no voxels".into()));
    }
    Volume::from_mask(flair.dims(), flair.spacing(), &bits)
}

/// Background not 4-connected to the border becomes foreground. `plane` is
/// indexed `x + nx * y`.
fn fill_holes_2d(plane: &mut [bool], nx: usize, ny: usize) {
    let mut outside = vec![false; plane.len()];
    let mut queue = VecDeque::new();
    let seed = |i: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if !plane[i] && !outside[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    };
    for xi in 0..nx {
        seed(xi, &mut outside, &mut queue);
        seed(xi + nx * (ny - 1), &mut outside, &mut queue);
    }
    for yi in 0..ny {
        seed(nx * yi, &mut outside, &mut queue);
        seed(nx - 1 + nx * yi, &mut outside, &mut queue);
    }
    while let Some(i) = queue.pop_front() {
        let (xi, yi) = (i % nx, i / nx);
        let mut visit = |j: usize| seed(j, &mut outside, &mut queue);
        if xi > 0 {
            visit(i - 1);
        }
        if xi + 1 < nx {
            visit(i + 1);
        }
        if yi > 0 {
            visit(i - nx);
        }
        if yi + 1 < ny {
            visit(i + nx);
        }
    }
    for (p, o) in plane.iter_mut().zip(outside) {
        *p = !o;
    }
}

/// Zero-mean, unit-variance (population) rescaling using statistics from
/// inside `mask`. Voxels outside the mask become 0.
pub fn gaussian_normalize(vol: &Volume, mask: &Volume) -> Result<Volume> {
    vol.same_grid(mask)?;
    let inside: Vec<f64> = vol
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m != 0.0)
        .map(|(&v, _)| v)
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask("normalization mask is empty".into()));
    }
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let std = (inside.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(std > 1e-8) {
        return Err(Error::Degenerate(format!("within-mask standard deviation {std:e}")));
    }
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m != 0.0 { (v - mean) / std } else { 0.0 })
        .collect();
    Volume::new(vol.dims(), vol.spacing(), data, VolumeKind::Intensity)
}

/// One subject's co-registered volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub center: String,
    pub flair: Volume,
    pub t1: Volume,
    pub mask: Option<Volume>,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        center: impl Into<String>,
        flair: Volume,
        t1: Volume,
        mask: Option<Volume>,
    ) -> Result<Self> {
        flair.same_grid(&t1)?;
        let mask = match mask {
            Some(m) => {
                flair.same_grid(&m)?;
                Some(m.with_kind(VolumeKind::BinaryMask)?)
            }
            None => None,
        };
        Ok(SubjectRecord {
            subject_id: subject_id.into(),
            center: center.into(),
            flair,
            t1,
            mask,
        })
    }

    /// Loads the NIfTI files named by a manifest entry.
    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        let mask = entry.mask_path.as_ref().map(load_nifti).transpose()?;
        SubjectRecord::new(
            entry.subject_id.clone(),
            entry.center.clone(),
            load_nifti(&entry.flair_path)?,
            load_nifti(&entry.t1_path)?,
            mask,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub brain_threshold: BrainThreshold,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: TARGET_SIZE,
            brain_threshold: BrainThreshold::Otsu,
        }
    }
}

/// Masks and normalizes both modalities; the brain mask comes from FLAIR.
pub fn normalize_record(record: &SubjectRecord, config: &PreprocessConfig) -> Result<SubjectRecord> {
    let brain = brain_mask(&record.flair, config.brain_threshold)?;
    Ok(SubjectRecord {
        subject_id: record.subject_id.clone(),
        center: record.center.clone(),
        flair: gaussian_normalize(&record.flair, &brain)?,
        t1: gaussian_normalize(&record.t1, &brain)?,
        mask: record.mask.clone(),
    })
}

/// Axial slice `z` as a row-major (x rows, y cols) array.
fn slice_xy(vol: &Volume, z: usize) -> Vec<f64> {
    let [nx, ny, _] = vol.dims();
    let plane = vol.axial(z);
    let mut out = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            out[x * ny + y] = plane[x + nx * y];
        }
    }
    out
}

fn stack_channels(vols: &[&Volume], target: usize) -> Result<(Tensor<f32>, SliceGeometry)> {
    let first = vols[0];
    for v in &vols[1..] {
        first.same_grid(v)?;
    }
    let [nx, ny, nz] = first.dims();
    let geom = SliceGeometry::new(nx, ny, target);
    let c = vols.len();
    let plane = target * target;
    let mut data = vec![0f32; nz * c * plane];
    for z in 0..nz {
        for (ch, v) in vols.iter().enumerate() {
            let t = geom.apply(&slice_xy(v, z));
            let dst = &mut data[(z * c + ch) * plane..(z * c + ch + 1) * plane];
            for (d, s) in dst.iter_mut().zip(t) {
                *d = s as f32;
            }
        }
    }
    Ok((Tensor::from_vec([nz, c, target, target], data)?, geom))
}

/// (Z, 2, T, T) batch with FLAIR in channel 0 and T1 in channel 1.
pub fn stack_modalities(record: &SubjectRecord, target: usize) -> Result<(Tensor<f32>, SliceGeometry)> {
    stack_channels(&[&record.flair, &record.t1], target)
}

/// (Z, 1, T, T) batch of a single volume, e.g. a lesion mask.
pub fn stack_volume(vol: &Volume, target: usize) -> Result<(Tensor<f32>, SliceGeometry)> {
    stack_channels(&[vol], target)
}

/// Inverse of [`stack_volume`] for channel `channel` of `t`.
pub fn slices_to_volume(
    t: &Tensor<f32>,
    channel: usize,
    geom: &SliceGeometry,
    spacing: [f64; 3],
    kind: VolumeKind,
) -> Result<Volume> {
    let s = t.shape();
    if s.h != geom.target || s.w != geom.target || channel >= s.c {
        return Err(Error::dim(format!(
            "tensor {s} does not match a {}×{} slice geometry (channel {channel})",
            geom.target, geom.target
        )));
    }
    let (nx, ny, nz) = (geom.rows, geom.cols, s.n);
    let mut data = vec![0.0; nx * ny * nz];
    for z in 0..nz {
        let plane: Vec<f64> = t.plane(z, channel).iter().map(|&v| v as f64).collect();
        let xy = geom.invert(&plane);
        let dst = &mut data[z * nx * ny..(z + 1) * nx * ny];
        for x in 0..nx {
            for y in 0..ny {
                dst[x + nx * y] = xy[x * ny + y];
            }
        }
    }
    Volume::new([nx, ny, nz], spacing, data, kind)
}

/// A subject ready for the network.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub subject_id: String,
    pub center: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub geometry: SliceGeometry,
    /// (Z, 2, T, T)
    pub images: Tensor<f32>,
    /// (Z, 1, T, T), present when the record has a ground-truth mask.
    pub masks: Option<Tensor<f32>>,
    /// Ground truth on the original grid.
    pub ground_truth: Option<Volume>,
}

impl PreparedSubject {
    pub fn from_record(record: &SubjectRecord, config: &PreprocessConfig) -> Result<Self> {
        let norm = normalize_record(record, config)?;
        let (images, geometry) = stack_modalities(&norm, config.target_size)?;
        let masks = match &record.mask {
            Some(m) => Some(stack_volume(m, config.target_size)?.0),
            None => None,
        };
        Ok(PreparedSubject {
            subject_id: record.subject_id.clone(),
            center: record.center.clone(),
            dims: record.flair.dims(),
            spacing: record.flair.spacing(),
            geometry,
            images,
            masks,
            ground_truth: record.mask.clone(),
        })
    }

    /// Training view; fails without a ground-truth mask.
    pub fn to_slices(&self) -> Result<SubjectSlices<f32>> {
        let masks = self.masks.clone().ok_or_else(|| {
            Error::config(format!("subject {} has no ground-truth mask", self.subject_id))
        })?;
        SubjectSlices::new(self.subject_id.clone(), self.images.clone(), masks)
    }

    pub fn slice_shape(&self) -> Shape {
        self.images.shape()
    }
}
