//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "SNET"  u32 version
//! u32 kernel_size  u32 stack_depth  u32 in_channels  u32 widths[4]
//! u32 height  u32 width  u64 seed
//! u32 tensor_count
//! per tensor, in topology order (weight, bias per layer):
//!     u32 dims[4]  f32 data[product(dims)]
//! ```

use std::path::Path;

use super::{StackNet, StackNetConfig};
use crate::error::{Error, Result};
use crate::tensor::Real;

const MAGIC: &[u8; 4] = b"SNET";
const VERSION: u32 = 1;

/// Serializes the model parameters as 32-bit floats.
pub fn write_checkpoint<T: Real>(model: &StackNet<T>) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = [
        c.kernel_size,
        c.stack_depth,
        c.in_channels,
        c.channel_widths[0],
        c.channel_widths[1],
        c.channel_widths[2],
        c.channel_widths[3],
        c.height,
        c.width,
    ];
    for v in header {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    let count = model.params().count() as u32;
    out.extend_from_slice(&count.to_le_bytes());
    for p in model.params() {
        for d in p.value.shape().as_array() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                field,
                offset: self.pos,
                message: format!("need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, rebuilding the model from its stored config.
pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<StackNet<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            field: "magic",
            offset: 0,
            message: "not a SNET checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            field: "version",
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut h = [0usize; 9];
    for v in h.iter_mut() {
        *v = r.u32("config")? as usize;
    }
    let config = StackNetConfig {
        kernel_size: h[0],
        stack_depth: h[1],
        in_channels: h[2],
        channel_widths: [h[3], h[4], h[5], h[6]],
        height: h[7],
        width: h[8],
        seed: r.u64("seed")?,
    };
    let mut model = StackNet::<T>::new(config)?;
    let offset = r.pos;
    let count = r.u32("tensor_count")? as usize;
    if count != model.params().count() {
        return Err(Error::Parse {
            field: "tensor_count",
            offset,
            message: format!(
                "checkpoint has {count} tensors, config implies {}",
                model.params().count()
            ),
        });
    }
    for p in model.params_mut() {
        let offset = r.pos;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u32("tensor_shape")? as usize;
        }
        if dims != p.value.shape().as_array() {
            return Err(Error::Parse {
                field: "tensor_shape",
                offset,
                message: format!("expected {}, found {dims:?}", p.value.shape()),
            });
        }
        let raw = r.take(4 * p.value.len(), "tensor_data")?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = T::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            field: "trailing",
            offset: r.pos,
            message: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &StackNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<StackNet<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> StackNet<f32> {
        StackNet::new(StackNetConfig {
            kernel_size: 5,
            stack_depth: 2,
            in_channels: 2,
            channel_widths: [2, 3, 3, 4],
            height: 16,
            width: 8,
            seed: 99,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        // Perturb so the weights differ from a fresh init with the same seed.
        for (i, p) in m.params_mut().enumerate() {
            p.value.data_mut()[0] = i as f32 * 0.125 - 3.0;
        }
        let bytes = write_checkpoint(&m);
        assert_eq!(&bytes[..4], b"SNET");
        let back: StackNet<f32> = read_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().zip(m.params()) {
            let bits = |t: &crate::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let bytes = write_checkpoint(&model());
        for cut in [0, 3, 7, 20, 48, bytes.len() / 2, bytes.len() - 1] {
            assert!(read_checkpoint::<f32>(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f32>(&bad), Err(Error::Parse { field: "magic", .. })));
        let mut long = bytes;
        long.push(0);
        assert!(read_checkpoint::<f32>(&long).is_err());
    }
}
