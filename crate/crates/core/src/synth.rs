//! Synthetic brain phantoms with known lesions.
//!
//! The brain is an axis-aligned ellipsoid; lesions are grown by random
//! 6-neighbour accretion inside it, each kept at least two background voxels
//! away from every other lesion.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{save_nifti, write_manifest, ManifestEntry};
use crate::preprocess::SubjectRecord;
use crate::rng::{derive_seed, stream_rng};
use crate::volume::{Volume, VolumeKind};

const LESION_STREAM: u64 = 0x4c45_5349;
const NOISE_STREAM: u64 = 0x4e4f_4953;
/// Seed draws per lesion before giving up.
const PLACEMENT_ATTEMPTS: usize = 200;
/// Background voxels required between two lesions.
const LESION_GAP: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_small: usize,
    pub n_medium: usize,
    pub n_large: usize,
    pub small_range: [usize; 2],
    pub medium_range: [usize; 2],
    pub large_range: [usize; 2],
    pub brain_intensity: f64,
    pub flair_contrast: f64,
    pub t1_contrast: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [96, 96, 16],
            spacing: [1.0, 1.0, 1.0],
            n_small: 6,
            n_medium: 4,
            n_large: 3,
            small_range: [1, 9],
            medium_range: [10, 20],
            large_range: [21, 60],
            brain_intensity: 100.0,
            flair_contrast: 80.0,
            t1_contrast: -40.0,
            noise_sd: 5.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [x, y, z] = self.dims;
        if x == 0 || y == 0 || z == 0 || x % 8 != 0 || y % 8 != 0 {
            return Err(Error::config(format!(
                "phantom dims {:?} need nonzero extents with x and y divisible by 8",
                self.dims
            )));
        }
        let ranges = [
            ("small", self.small_range, 1, 9),
            ("medium", self.medium_range, 10, 20),
            ("large", self.large_range, 21, usize::MAX),
        ];
        for (name, [lo, hi], min, max) in ranges {
            if lo > hi || lo < min || hi > max {
                return Err(Error::config(format!(
                    "{name} lesion range [{lo}, {hi}] must lie within [{min}, {max}]"
                )));
            }
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::config(format!("noise sd {} must be finite and >= 0", self.noise_sd)));
        }
        Ok(())
    }

    pub fn lesion_count(&self) -> usize {
        self.n_small + self.n_medium + self.n_large
    }
}

/// Voxel centres inside the ellipsoid with semi-axes (0.46 X, 0.46 Y, 0.75 Z)
/// centred in the grid.
pub fn brain_region(dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let axis = |i: usize, n: usize, frac: f64| ((i as f64 + 0.5) - n as f64 / 2.0) / (frac * n as f64);
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (u, v, w) = (axis(x, nx, 0.46), axis(y, ny, 0.46), axis(z, nz, 0.75));
                out.push(u * u + v * v + w * w <= 1.0);
            }
        }
    }
    out
}

fn neighbours6(i: usize, dims: [usize; 3]) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims;
    let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
    let plane = nx * ny;
    [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - plane),
        (z + 1 < nz).then(|| i + plane),
    ]
    .into_iter()
    .flatten()
}

/// Grows a connected voxel set of exactly `target` voxels inside `allowed`.
///
/// The seed is drawn uniformly from `allowed`; each step adds a uniformly
/// chosen 6-neighbour of the current set. The returned indices are sorted.
pub fn grow_lesion<R: Rng + ?Sized>(rng: &mut R, allowed: &[bool], dims: [usize; 3], target: usize) -> Result<Vec<usize>> {
    if allowed.len() != dims.iter().product::<usize>() {
        return Err(Error::dim(format!("region has {} voxels, dims {dims:?}", allowed.len())));
    }
    if target == 0 {
        return Err(Error::config("lesion target volume must be at least 1"));
    }
    let candidates: Vec<usize> = (0..allowed.len()).filter(|&i| allowed[i]).collect();
    if candidates.len() < target {
        return Err(Error::Capacity(format!(
            "region has {} voxels, lesion needs {target}",
            candidates.len()
        )));
    }
    let seed = candidates[rng.random_range(0..candidates.len())];
    let mut taken = vec![false; allowed.len()];
    let mut queued = vec![false; allowed.len()];
    let mut lesion = vec![seed];
    let mut frontier = Vec::new();
    taken[seed] = true;
    let mut push_neighbours = |i: usize, frontier: &mut Vec<usize>, taken: &[bool]| {
        for j in neighbours6(i, dims) {
            if allowed[j] && !taken[j] && !queued[j] {
                queued[j] = true;
                frontier.push(j);
            }
        }
    };
    push_neighbours(seed, &mut frontier, &taken);
    while lesion.len() < target {
        if frontier.is_empty() {
            return Err(Error::Capacity(format!(
                "connected region around voxel {seed} holds {} voxels, lesion needs {target}",
                lesion.len()
            )));
        }
        let next = frontier.swap_remove(rng.random_range(0..frontier.len()));
        taken[next] = true;
        lesion.push(next);
        push_neighbours(next, &mut frontier, &taken);
    }
    lesion.sort_unstable();
    Ok(lesion)
}

/// Marks every voxel within Chebyshev distance `radius` of `voxels`.
fn block_around(blocked: &mut [bool], voxels: &[usize], dims: [usize; 3], radius: usize) {
    let [nx, ny, nz] = dims;
    let r = radius as isize;
    for &i in voxels {
        let (x, y, z) = ((i % nx) as isize, ((i / nx) % ny) as isize, (i / (nx * ny)) as isize);
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (a, b, c) = (x + dx, y + dy, z + dz);
                    if a >= 0 && b >= 0 && c >= 0 && (a as usize) < nx && (b as usize) < ny && (c as usize) < nz {
                        blocked[a as usize + nx * (b as usize + ny * c as usize)] = true;
                    }
                }
            }
        }
    }
}

/// Builds one phantom subject. Lesions are placed large first.
pub fn generate_phantom(spec: &PhantomSpec, subject_id: &str, center: &str) -> Result<SubjectRecord> {
    spec.validate()?;
    let dims = spec.dims;
    let n: usize = dims.iter().product();
    let brain = brain_region(dims);
    let mut rng = stream_rng(spec.seed, &[LESION_STREAM]);

    let mut targets = Vec::with_capacity(spec.lesion_count());
    for (count, [lo, hi]) in [
        (spec.n_large, spec.large_range),
        (spec.n_medium, spec.medium_range),
        (spec.n_small, spec.small_range),
    ] {
        for _ in 0..count {
            targets.push(rng.random_range(lo..=hi));
        }
    }

    let mut lesion = vec![false; n];
    let mut blocked = vec![false; n];
    for (k, &target) in targets.iter().enumerate() {
        let allowed: Vec<bool> = brain.iter().zip(&blocked).map(|(&b, &x)| b && !x).collect();
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            match grow_lesion(&mut rng, &allowed, dims, target) {
                Ok(voxels) => {
                    placed = Some(voxels);
                    break;
                }
                Err(Error::Capacity(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let voxels = placed.ok_or_else(|| {
            Error::Capacity(format!(
                "could not place lesion {} of {} ({target} voxels) in a {dims:?} phantom",
                k + 1,
                targets.len()
            ))
        })?;
        for &i in &voxels {
            lesion[i] = true;
        }
        block_around(&mut blocked, &voxels, dims, LESION_GAP);
    }

    let noise = |stream: u64| -> Vec<f64> {
        if spec.noise_sd == 0.0 {
            return vec![0.0; n];
        }
        let normal = Normal::new(0.0, spec.noise_sd).expect("validated sd");
        let mut r = stream_rng(spec.seed, &[NOISE_STREAM, stream]);
        (0..n).map(|_| normal.sample(&mut r)).collect()
    };
    let build = |contrast: f64, noise: Vec<f64>| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let base = if brain[i] { spec.brain_intensity } else { 0.0 };
                let c = if lesion[i] { contrast } else { 0.0 };
                base + c + noise[i]
            })
            .collect()
    };
    let flair = Volume::new(dims, spec.spacing, build(spec.flair_contrast, noise(0)), VolumeKind::Intensity)?;
    let t1 = Volume::new(dims, spec.spacing, build(spec.t1_contrast, noise(1)), VolumeKind::Intensity)?;
    let mask = Volume::from_mask(dims, spec.spacing, &lesion)?;
    SubjectRecord::new(subject_id, center, flair, t1, Some(mask))
}

/// Subject `j` of center `c` is named `c{c}_s{j:02}`.
pub fn subject_name(center: usize, index: usize) -> (String, String) {
    (format!("c{center}_s{index:02}"), format!("c{center}"))
}

/// Writes `centers × per_center` phantoms as NIfTI files plus
/// `manifest.json` into `dir`. Subject seeds derive from `spec.seed`.
///
/// The manifest stores file names relative to `dir`; the returned entries
/// carry the joined paths.
pub fn write_phantom_set(dir: impl AsRef<Path>, spec: &PhantomSpec, centers: usize, per_center: usize) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(centers * per_center);
    for c in 0..centers {
        for j in 0..per_center {
            let (id, center) = subject_name(c, j);
            let s = PhantomSpec {
                seed: derive_seed(spec.seed, &[c as u64, j as u64]),
                ..spec.clone()
            };
            let rec = generate_phantom(&s, &id, &center)?;
            let file = |suffix: &str| PathBuf::from(format!("{id}_{suffix}.nii"));
            save_nifti(&rec.flair, dir.join(file("flair")))?;
            save_nifti(&rec.t1, dir.join(file("t1")))?;
            save_nifti(rec.mask.as_ref().expect("phantoms carry masks"), dir.join(file("mask")))?;
            entries.push(ManifestEntry {
                subject_id: id.clone(),
                center,
                flair_path: file("flair"),
                t1_path: file("t1"),
                mask_path: Some(file("mask")),
            });
        }
    }
    write_manifest(&entries, dir.join("manifest.json"))?;
    for e in &mut entries {
        for p in [&mut e.flair_path, &mut e.t1_path] {
            *p = dir.join(&*p);
        }
        e.mask_path = e.mask_path.take().map(|m| dir.join(m));
    }
    Ok(entries)
}
