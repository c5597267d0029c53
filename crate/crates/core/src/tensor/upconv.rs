use rayon::prelude::*;

use super::conv::dot;
use super::{ConvGrads, Real, Shape, Tensor};
use crate::error::{Error, Result};

fn check_kernel<T: Real>(kernel: &Tensor<T>) -> Result<()> {
    let ks = kernel.shape();
    if ks.h != 2 || ks.w != 2 {
        return Err(Error::dim(format!(
            "transposed convolution kernel must be 2x2, got {ks}"
        )));
    }
    Ok(())
}

/// Learned 2x upsampling (transposed convolution, 2x2 kernel, stride 2):
/// `out[n,o,2y+a,2x+b] = bias[o] + Σ_c in[n,c,y,x] · k[c,o,a,b]`.
/// Kernel layout is (in, out, 2, 2).
pub fn transposed_conv2x2<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &[T],
) -> Result<Tensor<T>> {
    check_kernel(kernel)?;
    let (is, ks) = (input.shape(), kernel.shape());
    if ks.n != is.c {
        return Err(Error::dim(format!(
            "kernel expects {} input channels, input has {}",
            ks.n, is.c
        )));
    }
    if bias.len() != ks.c {
        return Err(Error::dim(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            ks.c
        )));
    }
    let os = Shape::new(is.n, ks.c, is.h * 2, is.w * 2);
    let mut out = Tensor::zeros(os);
    let kd = kernel.data();
    let c_out = ks.c;
    out.data_mut()
        .par_chunks_mut(os.plane().max(1))
        .enumerate()
        .for_each(|(p, dst)| {
            let (n, o) = (p / c_out, p % c_out);
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..is.c {
                let src = input.plane(n, c);
                let kb = (c * c_out + o) * 4;
                for y in 0..is.h {
                    let row = &src[y * is.w..(y + 1) * is.w];
                    for a in 0..2 {
                        let drow = &mut dst[(2 * y + a) * os.w..(2 * y + a + 1) * os.w];
                        let (k0, k1) = (kd[kb + 2 * a], kd[kb + 2 * a + 1]);
                        for (pair, &v) in drow.chunks_exact_mut(2).zip(row) {
                            pair[0] += k0 * v;
                            pair[1] += k1 * v;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Stride-2 valid convolution with a 2x2 kernel in (in, out, 2, 2) layout,
/// mapping a (N, out, 2H, 2W) tensor to (N, in, H, W). This is the adjoint of
/// the linear part of [`transposed_conv2x2`].
pub fn conv2x2_stride2<T: Real>(y: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    check_kernel(kernel)?;
    let (ys, ks) = (y.shape(), kernel.shape());
    if ks.c != ys.c {
        return Err(Error::dim(format!(
            "kernel has {} output channels, tensor has {}",
            ks.c, ys.c
        )));
    }
    if ys.h % 2 != 0 || ys.w % 2 != 0 {
        return Err(Error::dim(format!("stride-2 convolution needs even extents, got {ys}")));
    }
    let os = Shape::new(ys.n, ks.n, ys.h / 2, ys.w / 2);
    let mut out = Tensor::zeros(os);
    let kd = kernel.data();
    let (c_in, c_out) = (ks.n, ks.c);
    out.data_mut()
        .par_chunks_mut(os.plane().max(1))
        .enumerate()
        .for_each(|(p, dst)| {
            let (n, c) = (p / c_in, p % c_in);
            for o in 0..c_out {
                let src = y.plane(n, o);
                let kb = (c * c_out + o) * 4;
                for yy in 0..os.h {
                    let drow = &mut dst[yy * os.w..(yy + 1) * os.w];
                    for a in 0..2 {
                        let srow = &src[(2 * yy + a) * ys.w..(2 * yy + a + 1) * ys.w];
                        let (k0, k1) = (kd[kb + 2 * a], kd[kb + 2 * a + 1]);
                        for (d, pair) in drow.iter_mut().zip(srow.chunks_exact(2)) {
                            *d += k0 * pair[0] + k1 * pair[1];
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Exact adjoints of [`transposed_conv2x2`].
pub fn transposed_conv2x2_adjoint<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    check_kernel(kernel)?;
    let (is, ks) = (input.shape(), kernel.shape());
    let os = Shape::new(is.n, ks.c, is.h * 2, is.w * 2);
    grad_out.expect_shape(os, "transposed_conv2x2_adjoint gradOut")?;
    let grad_input = conv2x2_stride2(grad_out, kernel)?;

    let c_out = ks.c;
    let mut grad_kernel = Tensor::zeros(ks);
    grad_kernel
        .data_mut()
        .par_chunks_mut(c_out * 4)
        .enumerate()
        .for_each(|(c, dst)| {
            let mut row_buf = vec![T::ZERO; is.w];
            for o in 0..c_out {
                for a in 0..2 {
                    for b in 0..2 {
                        let mut acc = T::ZERO;
                        for n in 0..is.n {
                            let src = input.plane(n, c);
                            let go = grad_out.plane(n, o);
                            for y in 0..is.h {
                                let grow = &go[(2 * y + a) * os.w..(2 * y + a + 1) * os.w];
                                for (dst, pair) in row_buf.iter_mut().zip(grow.chunks_exact(2)) {
                                    *dst = pair[b];
                                }
                                acc += dot(&src[y * is.w..(y + 1) * is.w], &row_buf);
                            }
                        }
                        dst[(o * 2 + a) * 2 + b] = acc;
                    }
                }
            }
        });

    let bias = (0..c_out)
        .into_par_iter()
        .map(|o| {
            (0..is.n)
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
