//! Named parameter tensors and the binary checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DVCKPT01"
//! meta_len     u32      length of the JSON metadata blob
//! meta         bytes    UTF-8 JSON (model/front-end configuration)
//! n_tensors    u32
//! per tensor:  u32 name_len, name bytes, u32 ndim, ndim × u64 dims,
//!              u64 offset (in f64 elements from the start of the data block)
//! data         f64 little-endian values, tensors back to back
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DVCKPT01";

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Tape handles for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = HashMap::with_capacity(self.entries.len());
        let mut order = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let v = tape.param(name, t.clone());
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Bound { vars, order }
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let mut vars = HashMap::with_capacity(self.entries.len());
        let mut order = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let v = tape.constant(t.clone());
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Bound { vars, order }
    }

    /// Raw bytes of all tensor data; used to compare parameter sets exactly.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn write_checkpoint(&self, w: &mut impl Write, meta: &str) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            offset += t.len() as u64;
        }
        for (_, t) in &self.entries {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<(ParamStore, String)> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let meta_len = read_u32(r).map_err(fmt)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(fmt)?;
        let meta = String::from_utf8(meta)
            .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        let n = read_u32(r).map_err(fmt)? as usize;
        let mut toc = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(r).map_err(fmt)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(fmt)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(r).map_err(fmt)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r).map_err(fmt)? as usize);
            }
            let offset = read_u64(r).map_err(fmt)? as usize;
            toc.push((name, shape, offset));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(fmt)?;
        if rest.len() % 8 != 0 {
            return Err(Error::Format("checkpoint data block is not f64-aligned".into()));
        }
        let values: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut store = ParamStore::new();
        for (name, shape, offset) in toc {
            let len: usize = shape.iter().product();
            let data = values
                .get(offset..offset + len)
                .ok_or_else(|| Error::Format(format!("tensor {name} points past the data block")))?;
            store.insert(name, Tensor::new(&shape, data.to_vec())?);
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &str) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        self.write_checkpoint(&mut f, meta)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore, String)> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        Self::read_checkpoint(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_toc() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(&[2, 3], (0..6).map(|v| v as f64 * 0.5).collect()).unwrap());
        s.insert("b", Tensor::scalar(-1.25));
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf, "{\"k\":1}").unwrap();
        let (back, meta) = ParamStore::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(s.num_scalars(), 7);
        // Data block is the last 7 f64 values.
        let tail = &buf[buf.len() - 8..];
        assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), -1.25);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        assert!(matches!(
            ParamStore::read_checkpoint(&mut &b"NOTACKPT"[..]),
            Err(Error::Format(_))
        ));
        let mut s = ParamStore::new();
        s.insert("x", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf, "").unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(
            ParamStore::read_checkpoint(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn prefixing_round_trips() {
        let mut inner = ParamStore::new();
        inner.insert("w", Tensor::zeros(&[1]));
        let mut outer = ParamStore::new();
        outer.extend_prefixed("fe.", &inner);
        assert!(outer.get("fe.w").is_some());
        assert_eq!(outer.sub_store("fe."), inner);
    }
}
