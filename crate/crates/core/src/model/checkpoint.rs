//! Binary tensor container.
//!
//! ```text
//! "FUYUCKPT" | version u32 | meta_len u64 | meta (UTF-8 JSON) | count u64
//! per tensor: name_len u64 | name | rank u64 | dims u64×rank | f64×numel
//! ```
//! All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FUYUCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub meta_json: String,
    pub tensors: IndexMap<String, Tensor>,
}

/// Writes to a sibling temp file and renames, so readers never see a partial file.
pub fn write_archive(
    path: &Path,
    meta_json: &str,
    tensors: &IndexMap<String, Tensor>,
) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input {
            path: path.to_path_buf(),
            detail: "checkpoint path has no file name".into(),
        })?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta_json.len() as u64).to_le_bytes())?;
        w.write_all(meta_json.as_bytes())?;
        w.write_all(&(tensors.len() as u64).to_le_bytes())?;
        for (name, t) in tensors {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
    remaining: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: u64, what: &str) -> Result<Vec<u8>> {
        if n > self.remaining {
            return Err(Error::Format(format!(
                "truncated checkpoint: {what} needs {n} bytes, {} left",
                self.remaining
            )));
        }
        let mut buf = vec![0u8; n as usize];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("reading {what}: {e}")))?;
        self.remaining -= n;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_archive(path: &Path) -> Result<TensorArchive> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = Reader {
        inner: BufReader::new(file),
        remaining: len,
    };
    if r.bytes(8, "magic")?.as_slice() != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.bytes(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = r.u64("meta length")?;
    let meta_json = String::from_utf8(r.bytes(meta_len, "meta")?)
        .map_err(|_| Error::Format("meta is not UTF-8".into()))?;
    let count = r.u64("tensor count")?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let name_len = r.u64("name length")?;
        let name = String::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u64("rank")?;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("tensor {name}: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let bytes = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {name}: shape {shape:?} overflows")))?;
        let raw = r.bytes(bytes, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.remaining != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining)));
    }
    Ok(TensorArchive { meta_json, tensors })
}
