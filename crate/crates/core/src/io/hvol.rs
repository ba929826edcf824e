use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::ops::DisplacementField;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"HVL1";
/// magic (4) + ndims (1) + four u32 extents (16) + dtype (1).
pub const HEADER_LEN: usize = 22;
const DTYPE_OFFSET: u64 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    /// Binary mask, one byte per voxel.
    U8 = 3,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            3 => Some(Dtype::U8),
            _ => None,
        }
    }
}

/// `(C, D, H, W)` extents and element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HvolHeader {
    pub dims: [u32; 4],
    pub dtype: Dtype,
}

impl HvolHeader {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn payload_len(&self) -> usize {
        self.numel() * self.dtype.size()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HvolData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hvol {
    pub header: HvolHeader,
    pub data: HvolData,
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Serializes a `[C, D, H, W]` tensor. `Dtype::U8` requires values in {0, 1}.
pub fn encode(tensor: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let (c, [d, h, w]) = tensor.shape().volume()?;
    let dims = [c, d, h, w].map(|v| v as u32);
    let header = HvolHeader { dims, dtype };
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    out.extend_from_slice(&MAGIC);
    out.push(4);
    for v in dims {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(dtype as u8);
    match dtype {
        Dtype::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::U8 => {
            for (i, &v) in tensor.data().iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Contract(format!("mask element {i} is {v}, not 0 or 1")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Parses and validates an HVOL byte buffer; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Hvol> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[..4] != MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {:?}, expected \"HVL1\"", &bytes[..4]),
        ));
    }
    if bytes[4] != 4 {
        return Err(format_err(path, 4, format!("ndims is {}, expected 4", bytes[4])));
    }
    let mut dims = [0u32; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if *d == 0 {
            return Err(format_err(path, at as u64, format!("extent {i} is zero")));
        }
    }
    let dtype = Dtype::from_code(bytes[21])
        .ok_or_else(|| format_err(path, DTYPE_OFFSET, format!("unknown dtype code {}", bytes[21])))?;
    let header = HvolHeader { dims, dtype };
    if Shape::new(dims.map(|v| v as usize)).is_err() {
        return Err(format_err(
            path,
            5,
            format!("extents {dims:?} exceed the element limit"),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let want = header.payload_len();
    if payload.len() < want {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated payload: {} of {want} bytes", payload.len()),
        ));
    }
    if payload.len() > want {
        return Err(format_err(
            path,
            (HEADER_LEN + want) as u64,
            format!("{} trailing bytes after payload", payload.len() - want),
        ));
    }
    let data = match dtype {
        Dtype::F32 => HvolData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => HvolData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => {
            if let Some(i) = payload.iter().position(|&v| v > 1) {
                return Err(format_err(
                    path,
                    (HEADER_LEN + i) as u64,
                    format!("mask value {} is not 0 or 1", payload[i]),
                ));
            }
            HvolData::U8(payload.to_vec())
        }
    };
    Ok(Hvol { header, data })
}

pub fn read_hvol(path: impl AsRef<Path>) -> Result<Hvol> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

impl Hvol {
    /// Widens any dtype to a 64-bit tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = match &self.data {
            HvolData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            HvolData::F64(v) => v.clone(),
            HvolData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        };
        Tensor::from_vec(self.header.dims.map(|v| v as usize), data).expect("validated header")
    }
}

pub fn write_volume(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    write_atomic(path.as_ref(), &encode(tensor, dtype)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_volume(path, &mask.to_volume(), Dtype::U8)
}

pub fn write_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    write_volume(path, field.as_tensor(), Dtype::F64)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(read_hvol(path)?.to_tensor())
}

/// Reads a single-channel dtype-3 file.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let h = read_hvol(path)?;
    let HvolData::U8(data) = h.data else {
        return Err(format_err(
            path,
            DTYPE_OFFSET,
            format!("expected a mask (dtype 3), got {:?}", h.header.dtype),
        ));
    };
    if h.header.dims[0] != 1 {
        return Err(format_err(
            path,
            5,
            format!("mask must have 1 channel, got {}", h.header.dims[0]),
        ));
    }
    let [_, d, hh, w] = h.header.dims.map(|v| v as usize);
    BinaryMask::new([d, hh, w], data)
}

/// Reads a three-channel float file as a displacement field.
pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let h = read_hvol(path)?;
    if h.header.dtype == Dtype::U8 {
        return Err(format_err(
            path,
            DTYPE_OFFSET,
            "a displacement field must be floating point",
        ));
    }
    if h.header.dims[0] != 3 {
        return Err(format_err(
            path,
            5,
            format!("a displacement field has 3 channels, got {}", h.header.dims[0]),
        ));
    }
    DisplacementField::new(h.to_tensor()).map_err(|e| format_err(path, HEADER_LEN as u64, e.to_string()))
}
