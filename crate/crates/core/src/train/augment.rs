//! Random affine augmentation (rotation, shear, zoom about the slice centre).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Symmetric sampling ranges for the affine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Rotation drawn from `U[-r, r]` degrees.
    pub rotation_degrees: f64,
    /// Shear factor drawn from `U[-s, s]`.
    pub shear: f64,
    /// Zoom drawn from `U[1 - z, 1 + z]`.
    pub zoom: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotation_degrees: 15.0,
            shear: 0.1,
            zoom: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_degrees: f64,
    pub shear: f64,
    pub zoom: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_degrees: 0.0,
        shear: 0.0,
        zoom: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, ranges: &AugmentRanges) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        AffineParams {
            rotation_degrees: sym(ranges.rotation_degrees),
            shear: sym(ranges.shear),
            zoom: 1.0 + sym(ranges.zoom),
        }
    }

    /// Matrix taking output offsets from the centre to source offsets, in
    /// (row, col) coordinates. The forward map is rotation · shear · zoom.
    fn inverse_matrix(&self) -> Result<[[f64; 2]; 2]> {
        if !(self.zoom > 0.0) {
            return Err(Error::Value(format!("zoom must be positive, got {}", self.zoom)));
        }
        let (s, c) = self.rotation_degrees.to_radians().sin_cos();
        let rot = [[c, -s], [s, c]];
        let shear = [[1.0, self.shear], [0.0, 1.0]];
        let fwd = mul(mul(rot, shear), [[self.zoom, 0.0], [0.0, self.zoom]]);
        let det = fwd[0][0] * fwd[1][1] - fwd[0][1] * fwd[1][0];
        Ok([
            [fwd[1][1] / det, -fwd[0][1] / det],
            [-fwd[1][0] / det, fwd[0][0] / det],
        ])
    }
}

fn mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Resampling kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// Warps every (H, W) plane of `t` with the same affine map; samples falling
/// outside the grid read as 0.
pub fn warp<T: Real>(t: &Tensor<T>, params: &AffineParams, interp: Interpolation) -> Result<Tensor<T>> {
    let inv = params.inverse_matrix()?;
    let s = t.shape();
    let (h, w) = (s.h, s.w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(s);
    let planes = s.n * s.c;
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        let at = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                src[y as usize * w + x as usize].to_f64()
            }
        };
        for y in 0..h {
            let qy = y as f64 - cy;
            for x in 0..w {
                let qx = x as f64 - cx;
                let sy = inv[0][0] * qy + inv[0][1] * qx + cy;
                let sx = inv[1][0] * qy + inv[1][1] * qx + cx;
                let v = match interp {
                    Interpolation::Nearest => at(sy.round() as isize, sx.round() as isize),
                    Interpolation::Bilinear => {
                        let (fy, fx) = (sy.floor(), sx.floor());
                        let (ty, tx) = (sy - fy, sx - fx);
                        let (iy, ix) = (fy as isize, fx as isize);
                        let top = at(iy, ix) * (1.0 - tx) + if tx > 0.0 { at(iy, ix + 1) * tx } else { 0.0 };
                        let bottom = if ty > 0.0 {
                            at(iy + 1, ix) * (1.0 - tx) + if tx > 0.0 { at(iy + 1, ix + 1) * tx } else { 0.0 }
                        } else {
                            0.0
                        };
                        top * (1.0 - ty) + bottom * ty
                    }
                };
                dst[y * w + x] = T::from_f64(v);
            }
        }
    }
    Ok(out)
}

/// Applies one affine draw identically to an image stack (bilinear) and its
/// mask (nearest). Shapes are preserved and the mask stays binary.
pub fn augment_sample<T: Real>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    params: &AffineParams,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (si, sm) = (image.shape(), mask.shape());
    if (si.h, si.w) != (sm.h, sm.w) {
        return Err(Error::dim(format!(
            "image {si} and mask {sm} differ in spatial extent"
        )));
    }
    Ok((
        warp(image, params, Interpolation::Bilinear)?,
        warp(mask, params, Interpolation::Nearest)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::<f32>::randn([1, 2, 9, 6], 1.0, &mut rng);
        let mask = img.map(|v| if v > 0.0 { 1.0 } else { 0.0 }).batch_slice(0, 1).unwrap();
        let (a, m) = augment_sample(&img, &mask, &AffineParams::IDENTITY).unwrap();
        assert_eq!(m, mask);
        for (x, y) in a.data().iter().zip(img.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn quarter_turn_permutes_indices() {
        let grid = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let params = AffineParams {
            rotation_degrees: 90.0,
            ..AffineParams::IDENTITY
        };
        let out = warp(&grid, &params, Interpolation::Nearest).unwrap();
        // A quarter turn about the centre maps output (y, x) to source (x, W-1-y).
        let mut expect = vec![0.0; 4];
        for y in 0..2 {
            for x in 0..2 {
                expect[y * 2 + x] = grid.get(0, 0, x, 1 - y);
            }
        }
        assert_eq!(out.data(), expect.as_slice());
        assert_eq!(out.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn zoom_out_fills_border_with_zero() {
        let img = Tensor::<f64>::full([1, 1, 8, 8], 1.0);
        let p = AffineParams { zoom: 0.5, ..AffineParams::IDENTITY };
        let out = warp(&img, &p, Interpolation::Nearest).unwrap();
        assert_eq!(out.get(0, 0, 0, 0), 0.0);
        assert_eq!(out.get(0, 0, 4, 4), 1.0);
    }

    #[test]
    fn mismatched_extent() {
        let img = Tensor::<f32>::zeros([1, 2, 8, 8]);
        let mask = Tensor::<f32>::zeros([1, 1, 8, 6]);
        assert!(augment_sample(&img, &mask, &AffineParams::IDENTITY).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn any_draw_keeps_shape_and_binary_mask(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::<f32>::randn([1, 2, h, w], 1.0, &mut rng);
            let mask = Tensor::<f32>::randn([1, 1, h, w], 1.0, &mut rng).map(|v| if v > 0.3 { 1.0 } else { 0.0 });
            let params = AffineParams::sample(&mut rng, &AugmentRanges::default());
            let (a, m) = augment_sample(&img, &mask, &params).unwrap();
            prop_assert_eq!(a.shape(), img.shape());
            prop_assert_eq!(m.shape(), mask.shape());
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!(a.all_finite());
        }
    }
}
