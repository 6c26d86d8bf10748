//! Binary tensor container: magic "STDT", a u16 format version, then
//! back-to-back tensor records until end of file.
//!
//! Record layout (all integers little-endian):
//!   name length u16 | UTF-8 name | ndim u8 | dims u32 x ndim |
//!   dtype u8 (1 = f32, 2 = f64) | raw little-endian payload
//!
//! Payloads are written as f64; f32 files load widened to f64.

use std::collections::BTreeSet;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"STDT";
pub const FORMAT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: DenseTensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightContainer {
    pub tensors: Vec<NamedTensor>,
}

impl WeightContainer {
    pub fn push(&mut self, name: impl Into<String>, tensor: DenseTensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Result<&DenseTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
            .ok_or_else(|| Error::NotFound(format!("tensor '{name}' in weight container")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u16::<LittleEndian>(FORMAT_VERSION)?;
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::DuplicateName(t.name.clone()));
            }
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::InvalidArgument(format!(
                    "tensor name too long ({} bytes)",
                    name.len()
                )));
            }
            let shape = t.tensor.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::InvalidArgument("tensor rank exceeds 255".into()));
            }
            out.write_u16::<LittleEndian>(name.len() as u16)?;
            out.extend_from_slice(name);
            out.write_u8(shape.len() as u8)?;
            for &d in shape {
                if d > u32::MAX as usize {
                    return Err(Error::InvalidArgument(format!("dimension {d} exceeds u32")));
                }
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            out.write_u8(DTYPE_F64)?;
            for &v in t.tensor.data() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic, "magic bytes")?;
        if &magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = cur
            .read_u16::<LittleEndian>()
            .map_err(|_| parse_err(&cur, "format version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let mut tensors = Vec::new();
        let mut seen = BTreeSet::new();
        while cur.position() < bytes.len() as u64 {
            let name_len = cur
                .read_u16::<LittleEndian>()
                .map_err(|_| parse_err(&cur, "record name length"))? as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut cur, &mut name_buf, "record name")?;
            let name = String::from_utf8(name_buf).map_err(|_| Error::Parse {
                offset: cur.position(),
                message: "record name is not valid UTF-8".into(),
            })?;
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }

            let ndim = cur.read_u8().map_err(|_| parse_err(&cur, "rank byte"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(
                    cur.read_u32::<LittleEndian>()
                        .map_err(|_| parse_err(&cur, "dimension"))? as usize,
                );
            }
            if shape.iter().any(|&d| d == 0) {
                return Err(Error::DimMismatch(format!(
                    "tensor '{name}' declares a zero dimension"
                )));
            }
            let count: usize = shape.iter().product();

            let dtype = cur.read_u8().map_err(|_| parse_err(&cur, "dtype byte"))?;
            let data = match dtype {
                DTYPE_F32 => {
                    let mut v = Vec::with_capacity(count);
                    for _ in 0..count {
                        v.push(f64::from(
                            cur.read_f32::<LittleEndian>()
                                .map_err(|_| parse_err(&cur, "f32 payload"))?,
                        ));
                    }
                    v
                }
                DTYPE_F64 => {
                    let mut v = Vec::with_capacity(count);
                    for _ in 0..count {
                        v.push(
                            cur.read_f64::<LittleEndian>()
                                .map_err(|_| parse_err(&cur, "f64 payload"))?,
                        );
                    }
                    v
                }
                other => {
                    return Err(Error::Parse {
                        offset: cur.position(),
                        message: format!("unknown dtype code {other}"),
                    })
                }
            };
            let tensor = DenseTensor::new(shape, data)
                .map_err(|e| Error::DimMismatch(format!("tensor '{name}': {e}")))?;
            tensors.push(NamedTensor { name, tensor });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn parse_err(cur: &Cursor<&[u8]>, what: &str) -> Error {
    Error::Parse {
        offset: cur.position(),
        message: format!("truncated while reading {what}"),
    }
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8], what: &str) -> Result<()> {
    cur.read_exact(buf).map_err(|_| Error::Parse {
        offset: cur.position(),
        message: format!("truncated while reading {what}"),
    })
}

/// Writes an f32 container; used for widening tests and compact exports.
pub fn to_bytes_f32(container: &WeightContainer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(FORMAT_VERSION)?;
    for t in &container.tensors {
        out.write_u16::<LittleEndian>(t.name.len() as u16)?;
        out.extend_from_slice(t.name.as_bytes());
        out.write_u8(t.tensor.shape().len() as u8)?;
        for &d in t.tensor.shape() {
            out.write_u32::<LittleEndian>(d as u32)?;
        }
        out.write_u8(DTYPE_F32)?;
        for &v in t.tensor.data() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(out)
}
