//! Flat binary parameter container.
//!
//! Layout: magic `OPENCKPT`, version u32, then per parameter a record of
//! (u32 name length, name bytes, u32 rank, u64 extents, f64 row-major
//! values). All integers and floats are little-endian; records run to EOF.

use super::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"OPENCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset 0: expected OPENCKPT")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint at byte offset {0}")]
    Truncated(u64),
    #[error("parameter name is not valid utf-8 at byte offset {0}")]
    BadName(u64),
}

pub fn write_checkpoint(
    path: &Path,
    params: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(CheckpointError::Truncated(self.offset))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Reads either a full u32 or cleanly detects EOF at a record boundary.
    fn u32_or_eof(&mut self) -> Result<Option<u32>, CheckpointError> {
        let mut buf = [0u8; 4];
        let mut read = 0;
        while read < 4 {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) if read == 0 => return Ok(None),
                Ok(0) => return Err(CheckpointError::Truncated(self.offset + read as u64)),
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(buf)))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut c = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    c.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut out = Vec::new();
    while let Some(name_len) = c.u32_or_eof()? {
        let name_at = c.offset;
        let mut name = vec![0u8; name_len as usize];
        c.exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| CheckpointError::BadName(name_at))?;
        let rank = c.u32()?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(c.f64()?);
        }
        out.push((name, Tensor::from_vec(shape, data).expect("shape consistent")));
    }
    Ok(out)
}
