//! "SCKP" parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "SCKP" | version
//! repeated until end of file:
//!   name_len | name (UTF-8) | rank | extents[rank] | f32 payload (LE)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.to_vec() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    /// Fills `buf`; `Ok(false)` on a clean end of input before any byte.
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<bool> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::Format {
                        offset: self.offset + got as u64,
                        detail: format!("read failed in {what}: {e}"),
                    })
                }
            }
        }
        if got == 0 && !buf.is_empty() {
            return Ok(false);
        }
        if got < buf.len() {
            return Err(Error::Format {
                offset: self.offset + got as u64,
                detail: format!("truncated {what}"),
            });
        }
        self.offset += got as u64;
        Ok(true)
    }

    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        if !self.fill(buf, what)? {
            return Err(Error::Format {
                offset: self.offset,
                detail: format!("truncated {what}"),
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Reads every `(name, tensor)` entry in file order. Loaded tensors are
/// gradient-tracking leaves.
pub fn read_checkpoint<R: Read>(reader: R) -> Result<Vec<(String, Tensor)>> {
    let mut r = Counted { inner: reader, offset: 0 };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut entries = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !r.fill(&mut len, "entry header")? {
            break;
        }
        let start = r.offset - 4;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.exact(&mut name, "parameter name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            offset: start + 4,
            detail: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.exact(&mut payload, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::parameter(data, &shape).map_err(|e| Error::Format {
            offset: start,
            detail: format!("entry {name}: {e}"),
        })?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
