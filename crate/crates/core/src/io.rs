//! Binary tensor files and atomic file writes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OURO" | version: u32 | rank: u32 | dims: u64 × rank | dtype: u32 | payload
//! ```
//!
//! dtype 0 is `f64`, 1 is `i8`, 2 is packed signed 4-bit codes: each row of
//! the last axis takes `⌈cols/2⌉` bytes, even columns in the low nibble.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OURO";
pub const VERSION: u32 = 1;
/// Larger ranks are rejected as corrupt.
pub const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F64 = 0,
    I8 = 1,
    PackedU4 = 2,
}

impl DType {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::I8),
            2 => Some(DType::PackedU4),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    I8(Vec<i8>),
    /// Raw nibble bytes, row-padded.
    PackedU4(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// Bytes needed for a packed-u4 payload of `shape`.
pub fn packed_len(shape: &[usize]) -> Option<usize> {
    match shape.split_last() {
        None => Some(1),
        Some((&last, lead)) => {
            let rows = lead.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
            rows.checked_mul(last.div_ceil(2))
        }
    }
}

impl TensorFile {
    pub fn f64(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F64(_) => DType::F64,
            Payload::I8(_) => DType::I8,
            Payload::PackedU4(_) => DType::PackedU4,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.dtype() as u32).to_le_bytes());
        match &self.payload {
            Payload::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            Payload::PackedU4(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses a complete file image; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("tensor file", "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                "tensor file",
                format!("unsupported version {version}"),
            ));
        }
        let rank = r.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::format(
                "tensor file",
                format!("rank {rank} exceeds {MAX_RANK}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| Error::format("tensor file", "dimension overflows usize"))?;
            shape.push(d);
        }
        let code = r.u32()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::format("tensor file", format!("unknown dtype code {code}")))?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("tensor file", "element count overflows"))?;
        let payload_len = match dtype {
            DType::F64 => count.checked_mul(8),
            DType::I8 => Some(count),
            DType::PackedU4 => packed_len(&shape),
        }
        .ok_or_else(|| Error::format("tensor file", "payload size overflows"))?;
        let remaining = bytes.len() - r.pos;
        if remaining != payload_len {
            return Err(Error::format(
                "tensor file",
                format!("payload is {remaining} bytes, shape {shape:?} needs {payload_len}"),
            ));
        }
        let raw = r.take(payload_len)?;
        let payload = match dtype {
            DType::F64 => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::format("tensor file", "non-finite f64 payload"));
                }
                Payload::F64(v)
            }
            DType::I8 => Payload::I8(raw.iter().map(|&b| b as i8).collect()),
            DType::PackedU4 => Payload::PackedU4(raw.to_vec()),
        };
        Ok(Self { shape, payload })
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.payload {
            Payload::F64(v) => Tensor::new(self.shape, v),
            other => Err(Error::format(
                "tensor file",
                format!(
                    "expected f64 payload, found {:?}",
                    TensorFile {
                        shape: vec![],
                        payload: other
                    }
                    .dtype()
                ),
            )),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("tensor file", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// True for a bare file name that stays inside its directory.
pub(crate) fn is_plain_file_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\', ':'])
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    res.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &TensorFile::f64(t).encode())
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what: format!("{what} {}", path.display()),
            detail,
        },
        other => other,
    })
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_tensor_file(path)?.into_tensor().map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
        other => other,
    })
}
