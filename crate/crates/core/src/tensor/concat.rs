use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Concatenates along the channel axis, `a`'s channels first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::dim(format!("cannot concat channels of {sa} and {sb}")));
    }
    let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (ia, ib) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * ia..(n + 1) * ia]);
        data.extend_from_slice(&b.data()[n * ib..(n + 1) * ib]);
    }
    Tensor::from_vec(shape, data)
}

/// Adjoint of [`concat_channels`]: splits off the first `first` channels.
pub fn split_channels<T: Real>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = t.shape();
    if first > s.c {
        return Err(Error::dim(format!("cannot split {first} channels from {s}")));
    }
    let (ca, cb) = (first, s.c - first);
    let p = s.plane();
    let mut a = Vec::with_capacity(s.n * ca * p);
    let mut b = Vec::with_capacity(s.n * cb * p);
    for n in 0..s.n {
        let item = &t.data()[n * s.c * p..(n + 1) * s.c * p];
        a.extend_from_slice(&item[..ca * p]);
        b.extend_from_slice(&item[ca * p..]);
    }
    Ok((
        Tensor::from_vec([s.n, ca, s.h, s.w], a)?,
        Tensor::from_vec([s.n, cb, s.h, s.w], b)?,
    ))
}
