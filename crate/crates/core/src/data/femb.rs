//! FEMB binary dataset format (little-endian).
//!
//! Layout: magic `FEMB`; u32 version (= 1); u32 n; u32 d; u32 K;
//! u16-length-prefixed UTF-8 extractor id; n*d f32 embeddings row-major;
//! n u32 labels. Malformed input fails with the byte offset of the problem.

use std::fs;
use std::path::Path;

use crate::data::{DatasetMeta, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"FEMB";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_le(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<EmbeddingDataset> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected \"FEMB\"", String::from_utf8_lossy(magic)),
        });
    }
    let version_at = r.pos as u64;
    let version = r.u32_le("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let n = r.u32_le("sample count")? as usize;
    let d = r.u32_le("embedding width")? as usize;
    let k = r.u32_le("class count")? as usize;
    let id_len = r.u16_le("extractor id length")? as usize;
    let id_at = r.pos as u64;
    let id_bytes = r.take(id_len, "extractor id")?;
    let extractor_id = std::str::from_utf8(id_bytes)
        .map_err(|e| Error::Format {
            offset: id_at,
            message: format!("extractor id is not UTF-8: {e}"),
        })?
        .to_string();

    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(r.f32_le("embedding value")? as f64);
    }
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        y.push(r.u32_le("label")?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after labels", buf.len() - r.pos),
        });
    }

    let x = Matrix::from_vec(n, d, data)?;
    let meta = DatasetMeta { extractor_id, source: "femb".into(), num_classes: k };
    EmbeddingDataset::new(x, y, meta)
}

pub fn save(dataset: &EmbeddingDataset, path: &Path) -> Result<()> {
    let n = dataset.n();
    let d = dataset.d();
    let id = dataset.meta.extractor_id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(Error::Data("extractor id longer than 65535 bytes".into()));
    }
    let mut out = Vec::with_capacity(4 + 4 * 4 + 2 + id.len() + n * d * 4 + n * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.k() as u32).to_le_bytes());
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    for &v in dataset.x().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in dataset.y() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
