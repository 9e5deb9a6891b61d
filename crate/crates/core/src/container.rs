//! The MRC1 array container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | content                                   |
//! |--------|-----------|-------------------------------------------|
//! | 0      | 4         | ASCII `MRC1`                              |
//! | 4      | 1         | dtype code: 0 = u8, 1 = f32 (IEEE-754)    |
//! | 5      | 1         | ndim, 1..=3                               |
//! | 6      | 2         | reserved, zero                            |
//! | 8      | 4 * ndim  | dims as u32, slowest-varying first        |
//! | ...    | payload   | row-major elements                        |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ForegroundProbMap, Grid2D};

pub const MAGIC: [u8; 4] = *b"MRC1";
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    U8 = 0,
    F32 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::U8),
            1 => Ok(Dtype::F32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::F32 => "f32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::U8(_) => Dtype::U8,
            Payload::F32(_) => Dtype::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::U8(v) => v.len(),
            Payload::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A decoded container: dimensions plus a typed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dims: Vec<u32>,
    pub payload: Payload,
}

impl Container {
    pub fn new(dims: Vec<u32>, payload: Payload) -> Result<Self> {
        let count = element_count(&dims)?;
        if count != payload.len() {
            return Err(Error::InvalidShape(format!(
                "dims {dims:?} describe {count} elements but payload has {}",
                payload.len()
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn dtype(&self) -> Dtype {
        self.payload.dtype()
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out =
            Vec::with_capacity(HEADER_LEN + 4 * self.dims.len() + self.payload.len() * dtype.size());
        out.extend_from_slice(&MAGIC);
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let n = bytes.len().min(4);
        if bytes[..n] != MAGIC[..n] {
            let mut magic = [0u8; 4];
            magic[..n].copy_from_slice(&bytes[..n]);
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let dtype = Dtype::from_code(bytes[4])?;
        let ndim = bytes[5];
        if !(1..=3).contains(&ndim) {
            return Err(Error::UnsupportedNdim(ndim));
        }
        let dims_end = HEADER_LEN + 4 * ndim as usize;
        if bytes.len() < dims_end {
            return Err(Error::TruncatedPayload {
                expected: dims_end,
                actual: bytes.len(),
            });
        }
        let dims: Vec<u32> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let count = element_count(&dims)?;
        let body = &bytes[dims_end..];
        let expected = count * dtype.size();
        if body.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                actual: body.len(),
            });
        }
        if body.len() > expected {
            return Err(Error::InvalidShape(format!(
                "{} trailing bytes after payload",
                body.len() - expected
            )));
        }
        let payload = match dtype {
            Dtype::U8 => Payload::U8(body.to_vec()),
            Dtype::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        Ok(Self { dims, payload })
    }

    /// Interprets a 2D container as `(height, width)`.
    pub fn dims_2d(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [h, w] => Ok((*h as usize, *w as usize)),
            other => Err(Error::InvalidShape(format!(
                "expected a 2D array, found dims {other:?}"
            ))),
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        let (h, w) = mask.dims();
        Self {
            dims: vec![h as u32, w as u32],
            payload: Payload::U8(mask.as_slice().to_vec()),
        }
    }

    /// Stores a real-valued grid as f32.
    pub fn from_real_grid(grid: &Grid2D<f64>) -> Self {
        let (h, w) = grid.dims();
        Self {
            dims: vec![h as u32, w as u32],
            payload: Payload::F32(grid.as_slice().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn into_mask(self) -> Result<BinaryMask> {
        let (h, w) = self.dims_2d()?;
        match self.payload {
            Payload::U8(v) => BinaryMask::new(Grid2D::new(h, w, v)?),
            Payload::F32(_) => Err(Error::DtypeMismatch {
                expected: "u8",
                actual: "f32",
            }),
        }
    }

    /// Real-valued view of a 2D container. u8 data is rescaled by `value / 255`;
    /// f32 data is widened unchanged.
    pub fn into_real_grid(self) -> Result<Grid2D<f64>> {
        let (h, w) = self.dims_2d()?;
        let data = match self.payload {
            Payload::U8(v) => v.into_iter().map(|b| b as f64 / 255.0).collect(),
            Payload::F32(v) => v.into_iter().map(f64::from).collect(),
        };
        Grid2D::new(h, w, data)
    }

    pub fn into_prob_map(self) -> Result<ForegroundProbMap> {
        ForegroundProbMap::new(self.into_real_grid()?)
    }
}

fn element_count(dims: &[u32]) -> Result<usize> {
    if dims.is_empty() || dims.len() > 3 {
        return Err(Error::UnsupportedNdim(dims.len() as u8));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidShape(format!("zero-length dimension in {dims:?}")));
    }
    let product: u128 = dims.iter().map(|&d| d as u128).product();
    if product > u32::MAX as u128 + 1 {
        return Err(Error::DimOverflow(dims.to_vec()));
    }
    Ok(product as usize)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Container::decode(&bytes)
}

pub fn write_container(container: &Container, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, container.encode())?;
    Ok(())
}
