//! 3-D connected-component labeling (two-pass union-find).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Voxel adjacency used to define a lesion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    Eighteen,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    /// Maximum number of unit steps separating two adjacent voxels.
    fn max_manhattan(self) -> i32 {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// All neighbour offsets `(dx, dy, dz)`.
    pub fn offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let m = dx.abs() + dy.abs() + dz.abs();
                    if m > 0 && m <= self.max_manhattan() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::config(format!("connectivity must be 6, 18 or 26, got {v}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

/// Labeling of a binary volume into connected components.
///
/// Labels run `1..=count` in order of each component's first voxel in raster
/// (x fastest) order; 0 is background. `sizes[k]` is the voxel count of label
/// `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionComponents {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
    pub count: usize,
    pub sizes: Vec<usize>,
    pub connectivity: Connectivity,
}

impl LesionComponents {
    pub fn foreground_voxels(&self) -> usize {
        self.sizes.iter().sum()
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

/// Labels the nonzero voxels of `mask`.
pub fn label_components_3d(mask: &Volume, connectivity: Connectivity) -> LesionComponents {
    label_components(&mask.mask_bits(), mask.dims(), connectivity)
}

/// Labels a boolean grid stored x-fastest.
pub fn label_components(fg: &[bool], dims: [usize; 3], connectivity: Connectivity) -> LesionComponents {
    let [nx, ny, nz] = dims;
    assert_eq!(fg.len(), nx * ny * nz, "mask length must match dims");
    // Offsets that precede the current voxel in raster order.
    let backward: Vec<[i32; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
        .collect();
    let mut parent: Vec<u32> = (0..fg.len() as u32).collect();

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !fg[i] {
                    continue;
                }
                for &[dx, dy, dz] in &backward {
                    let (qx, qy, qz) = (x as i64 + dx as i64, y as i64 + dy as i64, z as i64 + dz as i64);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 {
                        continue;
                    }
                    let j = qx as usize + nx * (qy as usize + ny * qz as usize);
                    if fg[j] {
                        let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                        if a != b {
                            // Keep the earlier voxel as root.
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi as usize] = lo;
                        }
                    }
                }
            }
        }
    }

    let mut root_label = vec![0u32; fg.len()];
    let mut labels = vec![0u32; fg.len()];
    let mut sizes = Vec::new();
    for i in 0..fg.len() {
        if !fg[i] {
            continue;
        }
        let r = find(&mut parent, i as u32) as usize;
        if root_label[r] == 0 {
            sizes.push(0);
            root_label[r] = sizes.len() as u32;
        }
        labels[i] = root_label[r];
        sizes[root_label[r] as usize - 1] += 1;
    }
    LesionComponents {
        dims,
        labels,
        count: sizes.len(),
        sizes,
        connectivity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], on: &[[usize; 3]]) -> Vec<bool> {
        let mut g = vec![false; dims.iter().product()];
        for &[x, y, z] in on {
            g[x + dims[0] * (y + dims[1] * z)] = true;
        }
        g
    }

    #[test]
    fn neighbourhood_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn face_neighbours_join() {
        let g = grid([3, 3, 3], &[[0, 0, 0], [1, 0, 0]]);
        let c = label_components(&g, [3, 3, 3], Connectivity::Six);
        assert_eq!((c.count, c.sizes.clone()), (1, vec![2]));
    }

    #[test]
    fn corner_neighbours_depend_on_connectivity() {
        let g = grid([2, 2, 2], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(label_components(&g, [2, 2, 2], Connectivity::TwentySix).count, 1);
        assert_eq!(label_components(&g, [2, 2, 2], Connectivity::Eighteen).count, 2);
        assert_eq!(label_components(&g, [2, 2, 2], Connectivity::Six).count, 2);
        let e = grid([2, 2, 1], &[[0, 0, 0], [1, 1, 0]]);
        assert_eq!(label_components(&e, [2, 2, 1], Connectivity::Eighteen).count, 1);
    }

    #[test]
    fn empty_mask() {
        let c = label_components(&[false; 8], [2, 2, 2], Connectivity::TwentySix);
        assert_eq!(c.count, 0);
        assert!(c.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn labels_follow_raster_order() {
        // A U shape whose arms meet only on a later row: union-find must merge
        // the two provisional trees into one label 1.
        let g = grid([5, 3, 1], &[[0, 0, 0], [4, 0, 0], [0, 1, 0], [4, 1, 0], [0, 2, 0], [1, 2, 0], [2, 2, 0], [3, 2, 0], [4, 2, 0], [2, 0, 0]]);
        let c = label_components(&g, [5, 3, 1], Connectivity::Six);
        assert_eq!(c.count, 2);
        assert_eq!(c.labels[0], 1);
        assert_eq!(c.labels[2], 2);
        assert_eq!(c.labels[4], 1);
        assert_eq!(c.sizes, vec![9, 1]);
    }

    #[test]
    fn connectivity_from_u8() {
        assert_eq!(Connectivity::try_from(18).unwrap(), Connectivity::Eighteen);
        assert!(Connectivity::try_from(8).is_err());
        let j = serde_json::to_string(&Connectivity::Six).unwrap();
        assert_eq!(j, "6");
    }
}
