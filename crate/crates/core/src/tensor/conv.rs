use rayon::prelude::*;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Zero-padding scheme for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad by `r / 2` on every side so H and W are preserved. Needs odd `r`.
    Same,
    /// No padding; output shrinks by `r - 1`.
    Valid,
}

impl Padding {
    fn amount(self, r: usize) -> Result<usize> {
        match self {
            Padding::Same if r % 2 == 0 => Err(Error::config(format!(
                "same padding needs an odd kernel size, got {r}"
            ))),
            Padding::Same => Ok(r / 2),
            Padding::Valid => Ok(0),
        }
    }
}

/// Gradients of a convolution with respect to each of its arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

struct Geometry {
    input: Shape,
    out: Shape,
    r: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &[T],
        padding: Padding,
    ) -> Result<Self> {
        let is = input.shape();
        let ks = kernel.shape();
        if ks.h != ks.w {
            return Err(Error::dim(format!("kernel must be square, got {ks}")));
        }
        if ks.c != is.c {
            return Err(Error::dim(format!(
                "kernel expects {} input channels, input has {}",
                ks.c, is.c
            )));
        }
        if bias.len() != ks.n {
            return Err(Error::dim(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                ks.n
            )));
        }
        let r = ks.h;
        let pad = padding.amount(r)?;
        if is.h + 2 * pad < r || is.w + 2 * pad < r {
            return Err(Error::dim(format!(
                "input {is} is smaller than kernel {r}x{r}"
            )));
        }
        let out = Shape::new(is.n, ks.n, is.h + 2 * pad + 1 - r, is.w + 2 * pad + 1 - r);
        Ok(Geometry {
            input: is,
            out,
            r,
            pad,
        })
    }

    /// Output rows `y` for which `y + i - pad` is a valid input row.
    #[inline]
    fn rows(&self, i: usize) -> (usize, usize) {
        span(i, self.pad, self.input.h, self.out.h)
    }

    #[inline]
    fn cols(&self, j: usize) -> (usize, usize) {
        span(j, self.pad, self.input.w, self.out.w)
    }
}

#[inline]
fn span(k: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

/// 2-D cross-correlation:
/// `out[n,o,y,x] = bias[o] + Σ_{c,i,j} in[n,c,y+i-p,x+j-p] · k[o,c,i,j]`
/// with zeros outside the input. Kernel layout is (out, in, r, r).
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &[T],
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, kernel, bias, padding)?;
    let (c_in, r, pad) = (g.input.c, g.r, g.pad);
    let (w_in, w_out) = (g.input.w, g.out.w);
    let mut out = Tensor::zeros(g.out);
    let kdata = kernel.data();
    let out_ch = g.out.c;

    out.data_mut()
        .par_chunks_mut(g.out.plane().max(1))
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let (n, o) = (plane_idx / out_ch, plane_idx % out_ch);
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..c_in {
                let src = input.plane(n, c);
                let kbase = (o * c_in + c) * r * r;
                for i in 0..r {
                    let (y0, y1) = g.rows(i);
                    for j in 0..r {
                        let wgt = kdata[kbase + i * r + j];
                        let (x0, x1) = g.cols(j);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = y + i - pad;
                            let s = &src[sy * w_in + x0 + j - pad..sy * w_in + x1 + j - pad];
                            let d = &mut dst[y * w_out + x0..y * w_out + x1];
                            for (dv, &sv) in d.iter_mut().zip(s) {
                                *dv += wgt * sv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Exact adjoints of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_adjoint<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let zero_bias = vec![T::ZERO; kernel.shape().n];
    let g = Geometry::new(input, kernel, &zero_bias, padding)?;
    grad_out.expect_shape(g.out, "conv2d_adjoint gradOut")?;
    let (c_in, c_out, r, pad) = (g.input.c, g.out.c, g.r, g.pad);
    let (w_in, w_out) = (g.input.w, g.out.w);
    let kdata = kernel.data();

    let mut grad_input = Tensor::zeros(g.input);
    grad_input
        .data_mut()
        .par_chunks_mut(g.input.plane().max(1))
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let (n, c) = (plane_idx / c_in, plane_idx % c_in);
            for o in 0..c_out {
                let go = grad_out.plane(n, o);
                let kbase = (o * c_in + c) * r * r;
                for i in 0..r {
                    let (y0, y1) = g.rows(i);
                    for j in 0..r {
                        let wgt = kdata[kbase + i * r + j];
                        let (x0, x1) = g.cols(j);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = y + i - pad;
                            let s = &go[y * w_out + x0..y * w_out + x1];
                            let d = &mut dst[sy * w_in + x0 + j - pad..sy * w_in + x1 + j - pad];
                            for (dv, &sv) in d.iter_mut().zip(s) {
                                *dv += wgt * sv;
                            }
                        }
                    }
                }
            }
        });

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    grad_kernel
        .data_mut()
        .par_chunks_mut((c_in * r * r).max(1))
        .enumerate()
        .for_each(|(o, dst)| {
            for c in 0..c_in {
                for i in 0..r {
                    let (y0, y1) = g.rows(i);
                    for j in 0..r {
                        let (x0, x1) = g.cols(j);
                        let mut acc = T::ZERO;
                        if x0 < x1 {
                            for n in 0..g.input.n {
                                let src = input.plane(n, c);
                                let go = grad_out.plane(n, o);
                                for y in y0..y1 {
                                    let sy = y + i - pad;
                                    let s = &src
                                        [sy * w_in + x0 + j - pad..sy * w_in + x1 + j - pad];
                                    let gv = &go[y * w_out + x0..y * w_out + x1];
                                    acc += dot(s, gv);
                                }
                            }
                        }
                        dst[(c * r + i) * r + j] = acc;
                    }
                }
            }
        });

    let bias = (0..c_out)
        .into_par_iter()
        .map(|o| {
            (0..g.out.n)
                .map(|n| grad_out.plane(n, o).iter().copied().sum::<T>())
                .sum::<T>()
        })
        .collect();

    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias,
    })
}

#[inline]
pub(super) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Literal transcription of the convolution sum, used as an oracle.
    fn conv_direct(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &[f64], pad: usize) -> Tensor<f64> {
        let is = input.shape();
        let ks = kernel.shape();
        let r = ks.h;
        let (ho, wo) = (is.h + 2 * pad + 1 - r, is.w + 2 * pad + 1 - r);
        let mut out = Tensor::zeros([is.n, ks.n, ho, wo]);
        for n in 0..is.n {
            for o in 0..ks.n {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = bias[o];
                        for c in 0..is.c {
                            for i in 0..r {
                                for j in 0..r {
                                    let sy = y as isize + i as isize - pad as isize;
                                    let sx = x as isize + j as isize - pad as isize;
                                    if sy < 0 || sx < 0 || sy >= is.h as isize || sx >= is.w as isize {
                                        continue;
                                    }
                                    acc += input.get(n, c, sy as usize, sx as usize)
                                        * kernel.get(o, c, i, j);
                                }
                            }
                        }
                        out.set(n, o, y, x, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_scalar() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0f32]).unwrap();
        let k = Tensor::from_vec([1, 1, 1, 1], vec![3.0f32]).unwrap();
        let y = conv2d(&x, &k, &[0.0], Padding::Same).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn all_ones_same_padding() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &[0.0], Padding::Same).unwrap();
        // Counts of in-bounds neighbours, computed by the direct oracle.
        let oracle = conv_direct(&x, &k, &[0.0], 1);
        assert_eq!(oracle.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        assert_eq!(y, oracle);
    }

    #[test]
    fn identity_kernel_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn([2, 3, 7, 5], 1.0, &mut rng);
        let mut k = Tensor::<f32>::zeros([3, 3, 3, 3]);
        for c in 0..3 {
            k.set(c, c, 1, 1, 1.0);
        }
        let y = conv2d(&x, &k, &[0.0; 3], Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (r, padding, pad) in [(3, Padding::Same, 1), (5, Padding::Same, 2), (3, Padding::Valid, 0), (2, Padding::Valid, 0)] {
            let x = Tensor::<f64>::randn([2, 3, 6, 7], 1.0, &mut rng);
            let k = Tensor::<f64>::randn([4, 3, r, r], 1.0, &mut rng);
            let b = [0.1, -0.2, 0.3, 0.0];
            let y = conv2d(&x, &k, &b, padding).unwrap();
            let want = conv_direct(&x, &k, &b, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_and_config_errors() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, &[0.0], Padding::Same), Err(Error::Dimension(_))));
        let k = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert!(matches!(conv2d(&x, &k, &[0.0], Padding::Same), Err(Error::Config(_))));
        let k = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let g = Tensor::<f32>::zeros([1, 1, 3, 3]);
        assert!(conv2d_adjoint(&x, &k, &g, Padding::Same).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([2, 3, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([2, 3, 3, 3], 1.0, &mut rng);
        let g = conv2d_adjoint(&x, &k, &Tensor::zeros([2, 2, 5, 5]), Padding::Same).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_kernel_grad_is_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([2, 1, 4, 3], 1.0, &mut rng);
        let go = Tensor::<f64>::randn([2, 1, 4, 3], 1.0, &mut rng);
        let k = Tensor::from_vec([1, 1, 1, 1], vec![0.7]).unwrap();
        let g = conv2d_adjoint(&x, &k, &go, Padding::Same).unwrap();
        let expect: f64 = x.data().iter().zip(go.data()).map(|(a, b)| a * b).sum();
        assert!((g.kernel.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn input_adjoint_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for padding in [Padding::Same, Padding::Valid] {
            let x = Tensor::<f64>::randn([2, 3, 6, 5], 1.0, &mut rng);
            let k = Tensor::<f64>::randn([4, 3, 3, 3], 1.0, &mut rng);
            let y = conv2d(&x, &k, &[0.0; 4], padding).unwrap();
            let gy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let g = conv2d_adjoint(&x, &k, &gy, padding).unwrap();
            let lhs = gy.dot(&y).unwrap();
            let rhs = g.input.dot(&x).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            // Linear in the kernel as well.
            let rhs_k = g.kernel.dot(&k).unwrap();
            assert!((lhs - rhs_k).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }
}
