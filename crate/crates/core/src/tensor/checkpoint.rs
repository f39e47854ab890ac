//! Versioned binary checkpoints.
//!
//! Layout, little-endian:
//! `"LGKD"`, u32 version, u32 entry count, then per entry: u32 name length,
//! UTF-8 name, u32 axis count, u64 per axis, f64 payload.

use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LGKD";

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads every `(name, tensor)` entry without reference to a model.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not an LGKD checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        if ndim > super::MAX_AXES {
            return Err(Error::format(path, format!("'{name}' has {ndim} axes")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(entries)
}

/// Loads a checkpoint into `params`, which supplies the expected names and
/// shapes. Any mismatch is a load error and leaves `params` untouched.
pub fn load_checkpoint(params: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = read_checkpoint(path)?;
    if entries.len() != params.len() {
        return Err(Error::Load(format!(
            "{}: checkpoint has {} tensors, model expects {}",
            path.display(),
            entries.len(),
            params.len()
        )));
    }
    for (p, (name, t)) in params.iter().zip(&entries) {
        if &p.name != name || p.value.shape() != t.shape() {
            return Err(Error::Load(format!(
                "{}: entry '{name}' {:?} does not match model parameter '{}' {:?}",
                path.display(),
                t.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    for (p, (_, t)) in params.iter_mut().zip(entries) {
        p.value = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ps = ParamStore::new();
        ps.add("conv.w", Tensor::from_fn(&[2, 3, 1, 1], |i| i as f64 * 0.25 - 1.0));
        ps.add("conv.b", Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        save_checkpoint(&ps, &path).unwrap();

        let mut loaded = ps.clone();
        for p in loaded.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        load_checkpoint(&mut loaded, &path).unwrap();
        assert_eq!(loaded, ps);

        let mut other = ParamStore::new();
        other.add("conv.w", Tensor::zeros(&[2, 3, 3, 3]));
        other.add("conv.b", Tensor::zeros(&[2]));
        assert!(matches!(load_checkpoint(&mut other, &path), Err(Error::Load(_))));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}
