//! Single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Only uncompressed files holding one 3-D volume of uint8, int16 or float32
//! are supported. Orientation fields are ignored; voxels are kept in stored
//! index order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_MAGIC: usize = 344;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Voxel storage types understood by this module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::Uint8),
            4 => Some(Datatype::Int16),
            16 => Some(Datatype::Float32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }

    /// The natural on-disk type for a volume kind.
    pub fn for_kind(kind: VolumeKind) -> Self {
        match kind {
            VolumeKind::BinaryMask => Datatype::Uint8,
            VolumeKind::Intensity | VolumeKind::Probability => Datatype::Float32,
        }
    }
}

/// The header fields this module reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub endian: Endian,
}

struct Bytes<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Bytes<'_> {
    fn array<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a: [u8; N] = self.buf[off..off + N].try_into().unwrap();
        if self.endian == Endian::Big {
            a.reverse();
        }
        a
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.array(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.array(off))
    }
}

fn parse_err(field: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        field,
        offset,
        message: message.into(),
    }
}

/// Parses and validates the 348-byte header, detecting byte order from
/// `sizeof_hdr`.
pub fn read_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(parse_err(
            "sizeof_hdr",
            bytes.len(),
            format!("file has {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let raw = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let endian = if raw == HEADER_SIZE as i32 {
        Endian::Little
    } else if raw.swap_bytes() == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(parse_err("sizeof_hdr", 0, format!("expected 348, found {raw}")));
    };
    let b = Bytes { buf: bytes, endian };

    let magic: [u8; 4] = bytes[OFF_MAGIC..OFF_MAGIC + 4].try_into().unwrap();
    if &magic != b"n+1\0" {
        return Err(parse_err(
            "magic",
            OFF_MAGIC,
            format!("expected single-file magic \"n+1\\0\", found {magic:?}"),
        ));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = b.i16(OFF_DIM + 2 * i);
    }
    if !(3..=4).contains(&dim[0]) {
        return Err(parse_err("dim", OFF_DIM, format!("dim[0] must be 3 or 4, found {}", dim[0])));
    }
    for i in 1..=dim[0] as usize {
        if dim[i] < 1 {
            return Err(parse_err("dim", OFF_DIM + 2 * i, format!("dim[{i}] = {} is not positive", dim[i])));
        }
    }
    if dim[0] == 4 && dim[4] != 1 {
        return Err(parse_err("dim", OFF_DIM + 8, format!("only single volumes are supported, dim[4] = {}", dim[4])));
    }

    let datatype = b.i16(OFF_DATATYPE);
    let dt = Datatype::from_code(datatype).ok_or_else(|| {
        parse_err("datatype", OFF_DATATYPE, format!("unsupported datatype code {datatype}"))
    })?;
    let bitpix = b.i16(OFF_BITPIX);
    if bitpix as usize != 8 * dt.bytes() {
        return Err(parse_err(
            "bitpix",
            OFF_BITPIX,
            format!("bitpix {bitpix} does not match datatype {datatype}"),
        ));
    }

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = b.f32(OFF_PIXDIM + 4 * i);
    }
    let vox_offset = b.f32(OFF_VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(parse_err(
            "vox_offset",
            OFF_VOX_OFFSET,
            format!("invalid voxel offset {vox_offset}"),
        ));
    }
    Ok(NiftiHeader {
        sizeof_hdr: HEADER_SIZE as i32,
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset,
        scl_slope: b.f32(OFF_SCL_SLOPE),
        scl_inter: b.f32(OFF_SCL_INTER),
        magic,
        endian,
    })
}

/// Decodes a `.nii` byte buffer into an intensity volume.
///
/// Values are scaled by `scl_slope`/`scl_inter` when the slope is nonzero.
pub fn read_nifti(bytes: &[u8]) -> Result<Volume> {
    let h = read_header(bytes)?;
    let dt = Datatype::from_code(h.datatype).expect("validated in read_header");
    let dims = [h.dim[1] as usize, h.dim[2] as usize, h.dim[3] as usize];
    let count: usize = dims.iter().product();
    let start = h.vox_offset as usize;
    let end = count
        .checked_mul(dt.bytes())
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| parse_err("vox_offset", OFF_VOX_OFFSET, "payload extent overflows"))?;
    if bytes.len() < end {
        return Err(parse_err(
            "data",
            bytes.len().min(start),
            format!("payload needs bytes {start}..{end}, file has {}", bytes.len()),
        ));
    }
    let payload = Bytes {
        buf: &bytes[start..end],
        endian: h.endian,
    };
    let (slope, inter) = if h.scl_slope != 0.0 && h.scl_slope.is_finite() {
        (h.scl_slope as f64, h.scl_inter as f64)
    } else {
        (1.0, 0.0)
    };
    let data = (0..count)
        .map(|i| {
            let raw = match dt {
                Datatype::Uint8 => payload.buf[i] as f64,
                Datatype::Int16 => payload.i16(2 * i) as f64,
                Datatype::Float32 => payload.f32(4 * i) as f64,
            };
            raw * slope + inter
        })
        .collect();
    let spacing = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64];
    Volume::new(dims, spacing, data, VolumeKind::Intensity)
}

/// Encodes `vol` as little-endian NIfTI-1 with `vox_offset` 352, slope 1 and
/// intercept 0.
pub fn write_nifti(vol: &Volume, datatype: Datatype) -> Result<Vec<u8>> {
    encode_nifti(vol, datatype, Endian::Little)
}

/// As [`write_nifti`] with a chosen byte order.
pub fn encode_nifti(vol: &Volume, datatype: Datatype, endian: Endian) -> Result<Vec<u8>> {
    let dims = vol.dims();
    for (axis, &d) in dims.iter().enumerate() {
        if d == 0 || d > i16::MAX as usize {
            return Err(Error::Value(format!("extent {d} on axis {axis} cannot be stored")));
        }
    }
    check_representable(vol, datatype)?;

    let mut out = vec![0u8; DEFAULT_VOX_OFFSET + vol.len() * datatype.bytes()];
    let put = |out: &mut [u8], off: usize, le: &[u8]| {
        let dst = &mut out[off..off + le.len()];
        dst.copy_from_slice(le);
        if endian == Endian::Big {
            dst.reverse();
        }
    };
    put(&mut out, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let dim = [3i16, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut out, OFF_DIM + 2 * i, &d.to_le_bytes());
    }
    put(&mut out, OFF_DATATYPE, &datatype.code().to_le_bytes());
    put(&mut out, OFF_BITPIX, &(8 * datatype.bytes() as i16).to_le_bytes());
    let sp = vol.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut out, OFF_PIXDIM + 4 * i, &p.to_le_bytes());
    }
    put(&mut out, OFF_VOX_OFFSET, &(DEFAULT_VOX_OFFSET as f32).to_le_bytes());
    put(&mut out, OFF_SCL_SLOPE, &1.0f32.to_le_bytes());
    put(&mut out, OFF_SCL_INTER, &0.0f32.to_le_bytes());
    // Spatial units: millimetres.
    out[OFF_XYZT_UNITS] = 2;
    out[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");

    let body = &mut out[DEFAULT_VOX_OFFSET..];
    for (i, &v) in vol.data().iter().enumerate() {
        match datatype {
            Datatype::Uint8 => body[i] = v as u8,
            Datatype::Int16 => put(body, 2 * i, &(v as i16).to_le_bytes()),
            Datatype::Float32 => put(body, 4 * i, &(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

fn check_representable(vol: &Volume, datatype: Datatype) -> Result<()> {
    let bad = |i: usize, v: f64, what: &str| {
        Err(Error::Value(format!("voxel {i} has value {v}, not representable as {what}")))
    };
    for (i, &v) in vol.data().iter().enumerate() {
        match datatype {
            Datatype::Uint8 => {
                if vol.kind() == VolumeKind::BinaryMask && v != 0.0 && v != 1.0 {
                    return bad(i, v, "a binary uint8 mask");
                }
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return bad(i, v, "uint8");
                }
            }
            Datatype::Int16 => {
                if v.fract() != 0.0 || !(i16::MIN as f64..=i16::MAX as f64).contains(&v) {
                    return bad(i, v, "int16");
                }
            }
            Datatype::Float32 => {
                if !v.is_finite() || v.abs() > f32::MAX as f64 {
                    return bad(i, v, "float32");
                }
            }
        }
    }
    Ok(())
}

pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_nifti(&bytes)
}

/// Writes `vol` using the datatype natural for its kind.
pub fn save_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_nifti(vol, Datatype::for_kind(vol.kind()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
