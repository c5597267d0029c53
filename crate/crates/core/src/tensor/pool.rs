use rayon::prelude::*;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Result of [`maxpool2x2`]: pooled values plus, for each output element,
/// the flat index of the input element that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first element of the window
/// in row-major order.
pub fn maxpool2x2<T: Real>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::dim(format!("maxpool2x2 needs even H and W, got {s}")));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut output = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.len()];
    let src = input.data();
    output
        .data_mut()
        .par_chunks_mut(os.plane().max(1))
        .zip(argmax.par_chunks_mut(os.plane().max(1)))
        .enumerate()
        .for_each(|(p, (dst, arg))| {
            let base = p * s.plane();
            for y in 0..os.h {
                for x in 0..os.w {
                    let top = base + 2 * y * s.w + 2 * x;
                    let window = [top, top + 1, top + s.w, top + s.w + 1];
                    let mut best = window[0];
                    for &k in &window[1..] {
                        if src[k] > src[best] {
                            best = k;
                        }
                    }
                    dst[y * os.w + x] = src[best];
                    arg[y * os.w + x] = best;
                }
            }
        });
    Ok(Pooled { output, argmax })
}

/// Routes each output gradient to the stored argmax position.
pub fn maxpool2x2_adjoint<T: Real>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let os = Shape::new(input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2);
    grad_out.expect_shape(os, "maxpool2x2_adjoint")?;
    if argmax.len() != os.len() {
        return Err(Error::dim("argmax length does not match pooled shape"));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&k, &v) in argmax.iter().zip(grad_out.data()) {
        gd[k] += v;
    }
    Ok(g)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    out.set(n, c, y, x, input.get(n, c, y / 2, x / 2));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pools_windows() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2x2(&x).unwrap().output.data(), &[4.0]);

        let x = Tensor::<f32>::from_vec([1, 1, 4, 4], (1..=16).map(|v| v as f32).collect()).unwrap();
        // Window maxima enumerated by hand: bottom-right of each 2x2 block.
        assert_eq!(maxpool2x2(&x).unwrap().output.data(), &[6.0, 8.0, 14.0, 16.0]);

        let x = Tensor::<f32>::full([2, 3, 4, 6], 1.5);
        let p = maxpool2x2(&x).unwrap().output;
        assert_eq!(p, Tensor::full([2, 3, 2, 3], 1.5));
    }

    #[test]
    fn ties_break_to_first() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        assert_eq!(maxpool2x2(&x).unwrap().argmax, vec![0]);
    }

    #[test]
    fn odd_extent_is_rejected() {
        assert!(maxpool2x2(&Tensor::<f32>::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn pool_then_upsample_never_exceeds_window_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn([2, 2, 6, 8], 1.0, &mut rng);
        let up = upsample_nearest2x(&maxpool2x2(&x).unwrap().output);
        for (a, b) in x.data().iter().zip(up.data()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([2, 3, 4, 6], 1.0, &mut rng);
        let p = maxpool2x2(&x).unwrap();
        let gy = Tensor::<f64>::randn(p.output.shape(), 1.0, &mut rng);
        let gx = maxpool2x2_adjoint(x.shape(), &p.argmax, &gy).unwrap();
        // Pooling is locally linear (a selection), so <gy, P x> = <P^T gy, x>.
        let lhs = gy.dot(&p.output).unwrap();
        let rhs = gx.dot(&x).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
