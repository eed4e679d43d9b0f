//! `FSTN` tensor encoding; see docs/formats.md.

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"FSTN";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::dim(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * dtype.size());
    match dtype {
        DType::F64 => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        DType::F32 => t.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
    }
    Ok(())
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
    /// Offset of `bytes[0]` within the enclosing file, for error messages.
    base: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.base + self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed. `base` is the position of `bytes` in the file.
pub fn decode_tensor(bytes: &[u8], base: usize) -> Result<(Tensor, usize)> {
    let mut c = Cursor { bytes, pos: 0, base };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(base, format!("bad magic {:?}, expected \"FSTN\"", String::from_utf8_lossy(magic))));
    }
    let at = c.offset();
    let version = c.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}, expected {VERSION}")));
    }
    let at = c.offset();
    let code = c.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(at, format!("unknown dtype {code}")))?;
    let at = c.offset();
    let rank = c.take(1, "rank")?[0] as usize;
    if rank > MAX_RANK {
        return Err(Error::format(at, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = c.take(4, "dimension")?;
        shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let at = c.offset();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
    let (n, len) = n.ok_or_else(|| Error::format(at, format!("payload size of shape {shape:?} overflows")))?;
    let payload = c.take(len, "payload")?;
    let data: Vec<f64> = match dtype {
        DType::F64 => payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    debug_assert_eq!(data.len(), n);
    Ok((Tensor::new(shape, data)?, c.pos))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, dtype, &mut buf)?;
    write_atomic(path, &buf)
}

/// Reads a file holding exactly one tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let (t, used) = decode_tensor(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(used, format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(t)
}
