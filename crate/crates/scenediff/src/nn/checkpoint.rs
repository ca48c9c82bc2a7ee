//! Binary checkpoint container: named-parameter index, shapes, dtype tag,
//! metadata strings, and a trailing SHA-256 content digest.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::params::{hex, ParamStore};
use super::scalar::Real;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SDCP";
const VERSION: u32 = 1;

/// Write a store plus metadata to `path`.
pub fn save_checkpoint<T: Real>(
    store: &ParamStore<T>,
    meta: &IndexMap<String, String>,
    path: &Path,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::DTYPE_TAG);

    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        write_str(&mut buf, k);
        buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
        buf.extend_from_slice(v.as_bytes());
    }

    let entries: Vec<_> = store.iter_entries().collect();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, e) in entries {
        write_str(&mut buf, name);
        buf.push(e.frozen as u8);
        buf.push(e.value.ndim() as u8);
        for &d in e.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in e.value.iter() {
            match T::DTYPE_TAG {
                1 => buf.extend_from_slice(&(x.to_f() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&x.to_f().to_le_bytes()),
            }
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(())
}

/// Load a checkpoint; verifies the digest and the dtype tag.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ParamStore<T>, IndexMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    if buf.len() < 4 + 4 + 1 + 32 {
        return Err(Error::Input(format!("checkpoint {path:?} truncated")));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Input(format!(
            "checkpoint {path:?} digest mismatch (corrupted file)"
        )));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.bytes(4)? != MAGIC {
        return Err(Error::Input("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Input(format!("unsupported checkpoint version {version}")));
    }
    let dtype = r.u8()?;
    if dtype != T::DTYPE_TAG {
        return Err(Error::Input(format!(
            "checkpoint dtype tag {dtype} does not match requested precision"
        )));
    }

    let mut meta = IndexMap::new();
    let n_meta = r.u32()? as usize;
    for _ in 0..n_meta {
        let k = r.string()?;
        let vlen = r.u32()? as usize;
        let v = String::from_utf8(r.bytes(vlen)?.to_vec())
            .map_err(|_| Error::Input("bad checkpoint metadata".into()))?;
        meta.insert(k, v);
    }

    let mut store = ParamStore::<T>::new();
    let n_params = r.u32()? as usize;
    for _ in 0..n_params {
        let name = r.string()?;
        let frozen = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let x = match dtype {
                1 => f32::from_le_bytes(r.bytes(4)?.try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(r.bytes(8)?.try_into().unwrap()),
            };
            data.push(T::from_f(x));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Input(format!("bad checkpoint shape: {e}")))?;
        store.insert(&name, arr);
        store.set_frozen(&name, frozen);
    }
    Ok((store, meta))
}

/// Content digest of a checkpoint file (the stored trailing hash).
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    if buf.len() < 32 {
        return Err(Error::Input("checkpoint truncated".into()));
    }
    Ok(hex(&buf[buf.len() - 32..]))
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Input("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.bytes(len)?.to_vec())
            .map_err(|_| Error::Input("bad checkpoint string".into()))
    }
}
